#include "urltran/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "urltran/encoder.hpp"
#include "urltran/error.hpp"
#include "urltran/eval.hpp"
#include "urltran/rng.hpp"
#include "urltran/tokenize.hpp"
#include "urltran/train.hpp"

namespace urltran {

namespace {

using json = nlohmann::ordered_json;

// Stage indices for deriving per-stage seeds from the single demo seed.
enum DemoStage : uint64_t {
    kCorpusStage = 0,
    kSplitStage = 1,
    kPretrainStage = 2,
    kFinetuneStage = 3,
    kAttackTrainStage = 4,
    kAttackValidStage = 5,
    kAttackTestStage = 6,
    kAdversarialStage = 7,
};

// Brand names as their dictionary-word parts; the generator both plants them
// (perturbed) into phishing hosts and leaves them (clean) in benign hosts.
const std::vector<std::vector<std::string>>& brand_words() {
    static const std::vector<std::vector<std::string>> brands = {
        {"pay", "pal"},    {"bank", "of", "america"}, {"face", "book"},
        {"drop", "box"},   {"wells", "fargo"},        {"master", "card"},
        {"micro", "soft"}, {"net", "flix"},           {"you", "tube"},
        {"word", "press"},
    };
    return brands;
}

const std::vector<std::string>& benign_host_words() {
    static const std::vector<std::string> words = {
        "sunny", "weather", "blue",   "sky",    "river",  "stone",
        "maple", "leaf",    "cloud",  "nine",   "happy",  "panda",
        "green", "garden",  "silver", "moon",   "rapid",  "mail",
        "photo", "share",   "music",  "stream", "game",   "zone",
        "news",  "daily",   "travel", "plan",   "recipe", "kitchen",
    };
    return words;
}

const std::vector<std::string>& decoration_words() {
    static const std::vector<std::string> words = {"secure", "login", "verify",
                                                   "support"};
    return words;
}

const std::vector<std::string>& top_level_domains() {
    static const std::vector<std::string> tlds = {"com", "net", "org", "io"};
    return tlds;
}

const std::vector<std::string>& benign_path_words() {
    static const std::vector<std::string> words = {
        "home", "about", "docs", "help", "search",
        "list", "item",  "page", "view", "index",
    };
    return words;
}

const std::vector<std::string>& phish_path_words() {
    static const std::vector<std::string> words = {
        "login",   "verify",  "secure",  "account", "update",
        "signin",  "confirm", "session", "billing", "recover",
    };
    return words;
}

const std::vector<std::string>& query_keys() {
    static const std::vector<std::string> keys = {"id",   "ref", "page", "sort",
                                                  "lang", "q",   "cat",  "v"};
    return keys;
}

const std::vector<std::string>& query_value_words() {
    static const std::vector<std::string> words = {"en",  "us",  "asc", "desc",
                                                   "all", "new", "top", "old"};
    return words;
}

// Accented Latin look-alikes (UTF-8) planted into phishing hosts. Distinct
// from the Cyrillic confusables in builtin_homoglyph_table(), so attack-time
// homoglyphs are genuinely novel to a model trained on this corpus.
struct AccentOptions {
    char letter;
    std::vector<std::string> accented;
};

const std::vector<AccentOptions>& accent_table() {
    static const std::vector<AccentOptions> table = {
        {'a', {"\xc3\xa0", "\xc3\xa1", "\xc3\xa2", "\xc3\xa4"}},  // à á â ä
        {'c', {"\xc3\xa7"}},                                      // ç
        {'e', {"\xc3\xa8", "\xc3\xa9", "\xc3\xaa", "\xc3\xab"}},  // è é ê ë
        {'i', {"\xc3\xac", "\xc3\xad", "\xc3\xae"}},              // ì í î
        {'n', {"\xc3\xb1"}},                                      // ñ
        {'o', {"\xc3\xb2", "\xc3\xb3", "\xc3\xb4", "\xc3\xb6"}},  // ò ó ô ö
        {'u', {"\xc3\xb9", "\xc3\xba", "\xc3\xbc"}},              // ù ú û
        {'y', {"\xc3\xbd"}},                                      // ý
    };
    return table;
}

const std::string& pick(const std::vector<std::string>& pool, Rng& rng) {
    return pool[rng.below(pool.size())];
}

// Replaces one uniformly chosen letter of `word` with a uniformly chosen
// accented variant.
std::string plant_accent(const std::string& word, Rng& rng) {
    std::vector<size_t> eligible;
    for (size_t i = 0; i < word.size(); ++i)
        for (const AccentOptions& entry : accent_table())
            if (entry.letter == word[i]) eligible.push_back(i);
    if (eligible.empty())
        raise(ErrorCode::invalid_argument,
              "no accentable letter in \"" + word + "\"");
    size_t at = eligible[rng.below(eligible.size())];
    const AccentOptions* entry = nullptr;
    for (const AccentOptions& candidate : accent_table())
        if (candidate.letter == word[at]) entry = &candidate;
    const std::string& accent = entry->accented[rng.below(entry->accented.size())];
    return word.substr(0, at) + accent + word.substr(at + 1);
}

// `pairs` distinct keys, values an even mix of numbers and short words.
std::string make_query(Rng& rng, size_t pairs) {
    std::vector<size_t> order(query_keys().size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    std::string out;
    for (size_t i = 0; i < pairs; ++i) {
        if (i > 0) out += '&';
        out += query_keys()[order[i]];
        out += '=';
        if (rng.bernoulli(0.5))
            out += std::to_string(rng.below(10000));
        else
            out += pick(query_value_words(), rng);
    }
    return out;
}

std::string make_benign_url(Rng& rng) {
    std::string host;
    if (rng.bernoulli(0.25)) {
        // An undecorated brand host, so brand words alone do not mark phish.
        const std::vector<std::string>& brand =
            brand_words()[rng.below(brand_words().size())];
        for (const std::string& word : brand) host += word;
    } else {
        host = pick(benign_host_words(), rng);
        host += pick(benign_host_words(), rng);
    }
    std::string url = "https://";
    if (rng.bernoulli(0.3)) url += "www.";
    url += host;
    url += '.';
    url += pick(top_level_domains(), rng);
    url += '/';
    url += pick(benign_path_words(), rng);
    if (rng.bernoulli(0.5)) {
        url += '/';
        url += pick(benign_path_words(), rng);
    }
    url += '?';
    url += make_query(rng, 2 + rng.below(2));
    return url;
}

std::string make_phish_url(Rng& rng) {
    const std::vector<std::string>& brand =
        brand_words()[rng.below(brand_words().size())];
    std::string label;
    if (rng.bernoulli(0.5)) {
        // Look-alike host: the brand with one accented letter.
        for (const std::string& word : brand) label += word;
        label = plant_accent(label, rng);
    } else {
        // Split host: brand words joined by hyphens, sometimes decorated.
        for (size_t i = 0; i < brand.size(); ++i) {
            if (i > 0) label += '-';
            label += brand[i];
        }
        uint64_t decoration = rng.below(4);
        if (decoration == 0) {
            label = "secure-" + label;
        } else if (decoration == 1) {
            label += '-';
            label += pick(decoration_words(), rng);
        }
    }
    std::string url = "https://";
    if (rng.bernoulli(0.1)) url += "www.";
    url += label;
    url += '.';
    url += pick(top_level_domains(), rng);
    url += '/';
    url += rng.bernoulli(0.7) ? pick(phish_path_words(), rng)
                              : pick(benign_path_words(), rng);
    if (rng.bernoulli(0.4)) {
        url += '/';
        url += pick(phish_path_words(), rng);
    }
    uint64_t pairs = rng.below(4);
    if (pairs > 0) {
        url += '?';
        url += make_query(rng, pairs);
    }
    return url;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) raise(ErrorCode::io, "cannot open \"" + path.string() + "\" for writing");
    out << text;
    if (!out) raise(ErrorCode::io, "failed writing \"" + path.string() + "\"");
}

std::vector<std::string> dataset_urls(const Dataset& data) {
    std::vector<std::string> urls;
    urls.reserve(data.records.size());
    for (const UrlRecord& record : data.records) urls.push_back(record.url);
    return urls;
}

double best_valid_auroc(const TrainLog& log) {
    double best = 0.0;
    for (const EpochRecord& epoch : log.epochs)
        if (std::isfinite(epoch.valid_auroc)) best = std::max(best, epoch.valid_auroc);
    return best;
}

}  // namespace

Dataset make_demo_corpus(const DemoCorpusOptions& options) {
    if (options.num_records == 0)
        raise(ErrorCode::invalid_argument, "demo corpus must not be empty");
    if (!(options.phish_fraction > 0.0 && options.phish_fraction < 1.0))
        raise(ErrorCode::invalid_argument,
              "phish_fraction must lie strictly between 0 and 1");
    Rng rng(options.seed);
    Dataset out;
    out.records.reserve(options.num_records);
    for (size_t i = 0; i < options.num_records; ++i) {
        UrlRecord record;
        bool phish = rng.uniform() < options.phish_fraction;
        record.url = phish ? make_phish_url(rng) : make_benign_url(rng);
        record.label = phish ? Label::phish : Label::benign;
        record.origin = Origin::original;
        out.records.push_back(std::move(record));
    }
    return out;
}

HomoglyphTable builtin_homoglyph_table() {
    HomoglyphTable table;
    auto add = [&table](char32_t from, std::initializer_list<char32_t> to) {
        table.entries.emplace(from, std::vector<char32_t>(to));
    };
    // Lowercase Latin → Cyrillic look-alikes.
    add(U'a', {0x0430});          // а
    add(U'c', {0x0441});          // с
    add(U'd', {0x0501});          // ԁ
    add(U'e', {0x0435});          // е
    add(U'h', {0x04BB});          // һ
    add(U'i', {0x0456});          // і
    add(U'j', {0x0458});          // ј
    add(U'k', {0x043A});          // к
    add(U'l', {0x04CF});          // ӏ
    add(U'm', {0x043C});          // м
    add(U'o', {0x043E});          // о
    add(U'p', {0x0440});          // р
    add(U's', {0x0455});          // ѕ
    add(U't', {0x0442});          // т
    add(U'x', {0x0445});          // х
    add(U'y', {0x0443, 0x04AF});  // у ү
    // Uppercase Latin → Cyrillic look-alikes.
    add(U'A', {0x0410});  // А
    add(U'B', {0x0412});  // В
    add(U'C', {0x0421});  // С
    add(U'E', {0x0415});  // Е
    add(U'G', {0x050C});  // Ԍ
    add(U'H', {0x041D});  // Н
    add(U'I', {0x0406});  // І
    add(U'J', {0x0408});  // Ј
    add(U'K', {0x041A});  // К
    add(U'M', {0x041C});  // М
    add(U'O', {0x041E});  // О
    add(U'P', {0x0420});  // Р
    add(U'S', {0x0405});  // Ѕ
    add(U'T', {0x0422});  // Т
    add(U'X', {0x0425});  // Х
    add(U'Y', {0x0423});  // У
    // Digits → Cyrillic letters of similar shape.
    add(U'0', {0x041E});  // О
    add(U'3', {0x0417});  // З
    add(U'6', {0x0431});  // б
    return table;
}

std::vector<std::string> builtin_word_list() {
    std::vector<std::string> words;
    for (const std::vector<std::string>& brand : brand_words())
        words.insert(words.end(), brand.begin(), brand.end());
    const std::vector<std::string>& decorations = decoration_words();
    words.insert(words.end(), decorations.begin(), decorations.end());
    const std::vector<std::string>& hosts = benign_host_words();
    words.insert(words.end(), hosts.begin(), hosts.end());
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    return words;
}

DemoReport run_demo(const DemoOptions& options) {
    if (options.out_dir.empty())
        raise(ErrorCode::invalid_argument, "demo needs an output directory");
    if (options.num_records < 50)
        raise(ErrorCode::invalid_argument,
              "demo corpus needs at least 50 records to split and validate");
    if (options.max_len < 8)
        raise(ErrorCode::invalid_argument, "demo max_len must be at least 8");
    if (options.batch_size < 1 || options.pretrain_epochs < 1 ||
        options.finetune_epochs < 1)
        raise(ErrorCode::invalid_argument,
              "demo batch size and epoch counts must be positive");
    if (!(options.pretrain_rate > 0.0) || !(options.finetune_rate > 0.0))
        raise(ErrorCode::invalid_argument, "demo learning rates must be positive");

    std::filesystem::create_directories(options.out_dir);
    auto out_path = [&options](const char* name) {
        return (options.out_dir / name).string();
    };

    // Generate and split the corpus.
    DemoCorpusOptions corpus_options;
    corpus_options.num_records = options.num_records;
    corpus_options.seed = mix_seed(options.seed, kCorpusStage);
    Dataset corpus = make_demo_corpus(corpus_options);
    save_dataset(corpus, out_path("corpus.tsv"));

    SplitFractions fractions{0.7, 0.15, 0.15};
    DatasetSplits splits =
        split_dataset(corpus, fractions, mix_seed(options.seed, kSplitStage));
    save_dataset(splits.train, out_path("train.tsv"));
    save_dataset(splits.valid, out_path("valid.tsv"));
    save_dataset(splits.test, out_path("test.tsv"));

    // Byte-level subword vocabulary from the training URLs only.
    Vocabulary vocab =
        train_bpe(dataset_urls(splits.train), options.vocab_size, VocabKind::byte_bpe);
    save_vocabulary(vocab, out_path("vocab.json"));

    ModelConfig config;  // defaults are the desk shape: 2 layers, hidden 64
    config.vocab_size = static_cast<int32_t>(vocab.pieces.size());
    config.max_positions = options.max_len;

    // Masked-token pre-training.
    PretrainSettings pretrain_settings;
    pretrain_settings.epochs = options.pretrain_epochs;
    pretrain_settings.batch_size = options.batch_size;
    pretrain_settings.max_len = options.max_len;
    pretrain_settings.seed = mix_seed(options.seed, kPretrainStage);
    pretrain_settings.schedule.kind = ScheduleKind::linear;
    pretrain_settings.schedule.peak_rate = options.pretrain_rate;
    pretrain_settings.adam.weight_decay = 0.01;
    TrainResult<float> pretrained =
        pretrain_mlm<float>(config, splits.train, vocab, pretrain_settings);
    write_step_log(pretrained.log, out_path("pretrain_steps.tsv"));
    write_metrics(pretrained.log, out_path("pretrain_metrics.json"));
    save_checkpoint(pretrained.params, out_path("pretrained.json"));

    DemoReport report;
    report.first_mlm_loss = pretrained.log.epochs.front().train_loss;
    report.final_mlm_loss = pretrained.log.epochs.back().train_loss;

    // Classification fine-tuning on the clean training split.
    FinetuneSettings finetune_settings;
    finetune_settings.epochs = options.finetune_epochs;
    finetune_settings.batch_size = options.batch_size;
    finetune_settings.max_len = options.max_len;
    finetune_settings.seed = mix_seed(options.seed, kFinetuneStage);
    finetune_settings.schedule.kind = ScheduleKind::triangular;
    finetune_settings.schedule.peak_rate = options.finetune_rate;
    finetune_settings.adam.weight_decay = 0.01;
    TrainResult<float> clean = finetune<float>(pretrained.params, splits.train,
                                               splits.valid, vocab, finetune_settings);
    write_step_log(clean.log, out_path("finetune_steps.tsv"));
    write_metrics(clean.log, out_path("finetune_metrics.json"));
    save_checkpoint(clean.params, out_path("model.json"));
    report.clean_valid_auroc = best_valid_auroc(clean.log);

    // Held-out evaluation of the clean model.
    std::vector<ScoredPrediction> test_predictions = score_dataset<float>(
        clean.params, vocab, splits.test, options.batch_size, options.max_len);
    save_predictions(test_predictions, out_path("test_predictions.tsv"));
    RocCurve test_curve = roc_curve(test_predictions);
    report.clean_test_auroc = auroc(test_curve);
    write_roc_report(test_curve, {1e-4, 1e-3, 1e-2}, out_path("roc.json"));
    write_text_file(out_path("roc.svg"), render_roc_svg(test_curve));

    // Attack-augmented copies of every split.
    HomoglyphTable table = builtin_homoglyph_table();
    WordDictionary dict = WordDictionary::from_words(builtin_word_list());
    Dataset augmented_train = build_adversarial_dataset(
        splits.train, table, dict, mix_seed(options.seed, kAttackTrainStage));
    Dataset augmented_valid = build_adversarial_dataset(
        splits.valid, table, dict, mix_seed(options.seed, kAttackValidStage));
    Dataset augmented_test = build_adversarial_dataset(
        splits.test, table, dict, mix_seed(options.seed, kAttackTestStage));
    save_dataset(augmented_train, out_path("augmented_train.tsv"));
    save_dataset(augmented_valid, out_path("augmented_valid.tsv"));
    save_dataset(augmented_test, out_path("augmented_test.tsv"));

    // Adversarial fine-tuning from the same pre-trained weights.
    FinetuneSettings adversarial_settings = finetune_settings;
    adversarial_settings.seed = mix_seed(options.seed, kAdversarialStage);
    TrainResult<float> adversarial =
        finetune<float>(pretrained.params, augmented_train, augmented_valid, vocab,
                        adversarial_settings);
    write_step_log(adversarial.log, out_path("adversarial_steps.tsv"));
    write_metrics(adversarial.log, out_path("adversarial_metrics.json"));
    save_checkpoint(adversarial.params, out_path("adversarial_model.json"));

    // Both models face the same augmented test set.
    std::vector<ScoredPrediction> clean_on_augmented = score_dataset<float>(
        clean.params, vocab, augmented_test, options.batch_size, options.max_len);
    std::vector<ScoredPrediction> adversarial_on_augmented = score_dataset<float>(
        adversarial.params, vocab, augmented_test, options.batch_size,
        options.max_len);
    save_predictions(clean_on_augmented, out_path("clean_on_augmented.tsv"));
    save_predictions(adversarial_on_augmented,
                     out_path("adversarial_on_augmented.tsv"));
    report.clean_augmented_auroc = auroc(roc_curve(clean_on_augmented));
    report.adversarial_augmented_auroc = auroc(roc_curve(adversarial_on_augmented));

    json echo;
    echo["augmented_test"]["clean_model_auroc"] = report.clean_augmented_auroc;
    echo["augmented_test"]["adversarial_model_auroc"] =
        report.adversarial_augmented_auroc;
    echo["augmented_test"]["difference"] =
        report.adversarial_augmented_auroc - report.clean_augmented_auroc;
    write_text_file(out_path("echo.json"), echo.dump(2) + "\n");

    json summary;
    summary["format"] = "urltran-demo-report";
    summary["records"] = corpus.records.size();
    summary["split_sizes"]["train"] = splits.train.records.size();
    summary["split_sizes"]["valid"] = splits.valid.records.size();
    summary["split_sizes"]["test"] = splits.test.records.size();
    summary["vocabulary_size"] = vocab.pieces.size();
    summary["pretrain"]["first_epoch_loss"] = report.first_mlm_loss;
    summary["pretrain"]["final_epoch_loss"] = report.final_mlm_loss;
    summary["finetune"]["best_valid_auroc"] = report.clean_valid_auroc;
    summary["finetune"]["test_auroc"] = report.clean_test_auroc;
    summary["augmented_test"]["clean_model_auroc"] = report.clean_augmented_auroc;
    summary["augmented_test"]["adversarial_model_auroc"] =
        report.adversarial_augmented_auroc;
    write_text_file(out_path("report.json"), summary.dump(2) + "\n");

    return report;
}

}  // namespace urltran
