// Command-line front end wiring the library into reproducible pipelines:
// tokenizer training, masked-token pre-training, classification fine-tuning,
// URL attacks, scoring, ROC evaluation, and an end-to-end synthetic demo.
//
// Exit codes: 0 success, 1 internal failure, 2 usage, 3 file I/O,
// 4 malformed/mismatched content, 5 unsatisfiable request.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "urltran/adversary.hpp"
#include "urltran/corpus.hpp"
#include "urltran/encoder.hpp"
#include "urltran/error.hpp"
#include "urltran/eval.hpp"
#include "urltran/pipeline.hpp"
#include "urltran/tokenize.hpp"
#include "urltran/train.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace urltran;

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::io:
            return 3;
        case ErrorCode::parse:
        case ErrorCode::format:
        case ErrorCode::schema_mismatch:
            return 4;
        default:
            return 5;
    }
}

json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::io, "cannot open config \"" + path + "\"");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        raise(ErrorCode::parse, path + ": " + e.what());
    }
    return doc;
}

void require_known_keys(const json& section, const std::vector<std::string>& known,
                        const std::string& where) {
    for (const auto& item : section.items())
        if (std::find(known.begin(), known.end(), item.key()) == known.end())
            raise(ErrorCode::schema_mismatch,
                  where + ": unknown key \"" + item.key() + "\"");
}

// Model-shape keys follow the naming of published transformer configs so
// presets transcribe directly.
void apply_model_section(const json& section, const std::string& where,
                         ModelConfig& config, size_t vocab_pieces) {
    require_known_keys(section,
                       {"num_hidden_layers", "hidden_size", "intermediate_size",
                        "num_attention_heads", "max_position_embeddings",
                        "hidden_dropout_prob", "attention_probs_dropout_prob",
                        "initializer_range", "layer_norm_eps", "hidden_act",
                        "type_vocab_size", "use_pooler", "vocab_size"},
                       where);
    try {
        if (section.contains("num_hidden_layers"))
            config.num_layers = section.at("num_hidden_layers").get<int32_t>();
        if (section.contains("hidden_size"))
            config.hidden_size = section.at("hidden_size").get<int32_t>();
        if (section.contains("intermediate_size"))
            config.ffn_size = section.at("intermediate_size").get<int32_t>();
        if (section.contains("num_attention_heads"))
            config.num_heads = section.at("num_attention_heads").get<int32_t>();
        if (section.contains("max_position_embeddings"))
            config.max_positions = section.at("max_position_embeddings").get<int32_t>();
        if (section.contains("hidden_dropout_prob"))
            config.dropout = section.at("hidden_dropout_prob").get<double>();
        if (section.contains("attention_probs_dropout_prob"))
            config.attention_dropout =
                section.at("attention_probs_dropout_prob").get<double>();
        if (section.contains("initializer_range"))
            config.initializer_range = section.at("initializer_range").get<double>();
        if (section.contains("layer_norm_eps"))
            config.layer_norm_eps = section.at("layer_norm_eps").get<double>();
        if (section.contains("hidden_act") &&
            section.at("hidden_act").get<std::string>() != "gelu")
            raise(ErrorCode::schema_mismatch,
                  where + ": only the gelu activation is supported");
        if (section.contains("type_vocab_size")) {
            int32_t types = section.at("type_vocab_size").get<int32_t>();
            if (types != 0 && types != 2)
                raise(ErrorCode::schema_mismatch,
                      where + ": type_vocab_size must be 0 or 2");
            config.use_type_embeddings = types == 2;
        }
        if (section.contains("use_pooler"))
            config.use_pooler = section.at("use_pooler").get<bool>();
        if (section.contains("vocab_size")) {
            int32_t expected = section.at("vocab_size").get<int32_t>();
            if (expected != static_cast<int32_t>(vocab_pieces))
                raise(ErrorCode::schema_mismatch,
                      where + ": vocab_size " + std::to_string(expected) +
                          " does not match the vocabulary's " +
                          std::to_string(vocab_pieces) + " pieces");
        }
    } catch (const json::exception& e) {
        raise(ErrorCode::schema_mismatch, where + ": " + e.what());
    }
}

ScheduleKind schedule_kind_from_config(std::string name, const std::string& where) {
    if (name == "reduce_on_plateau") name = "plateau";
    try {
        return schedule_kind_from_name(name);
    } catch (const Error&) {
        raise(ErrorCode::schema_mismatch,
              where + ": unknown learning_rate_decay \"" + name + "\"");
    }
}

// Training keys shared by the pretrain and finetune sections; the masking
// policy only exists for pre-training.
void apply_training_section(const json& section, const std::string& where,
                            int32_t& epochs, int32_t& batch_size, int32_t& max_len,
                            Schedule& schedule, AdamConfig& adam,
                            MaskingPolicy* masking) {
    std::vector<std::string> known = {
        "max_epochs",    "batch_size",   "tokens_per_sample", "peak_learning_rate",
        "learning_rate", "learning_rate_decay", "warmup_steps", "warmup_ratio",
        "lr_shrink",     "patience",     "adam_beta1",        "adam_beta2",
        "adam_eps",      "weight_decay", "gradient_clipping"};
    if (masking) known.push_back("masking");
    require_known_keys(section, known, where);
    try {
        if (section.contains("max_epochs"))
            epochs = section.at("max_epochs").get<int32_t>();
        if (section.contains("batch_size"))
            batch_size = section.at("batch_size").get<int32_t>();
        if (section.contains("tokens_per_sample"))
            max_len = section.at("tokens_per_sample").get<int32_t>();
        if (section.contains("peak_learning_rate"))
            schedule.peak_rate = section.at("peak_learning_rate").get<double>();
        if (section.contains("learning_rate"))
            schedule.peak_rate = section.at("learning_rate").get<double>();
        if (section.contains("learning_rate_decay"))
            schedule.kind = schedule_kind_from_config(
                section.at("learning_rate_decay").get<std::string>(), where);
        if (section.contains("warmup_steps"))
            schedule.warmup_steps = section.at("warmup_steps").get<int64_t>();
        if (section.contains("warmup_ratio"))
            schedule.warmup_ratio = section.at("warmup_ratio").get<double>();
        if (section.contains("lr_shrink"))
            schedule.shrink = section.at("lr_shrink").get<double>();
        if (section.contains("patience"))
            schedule.patience = section.at("patience").get<int32_t>();
        if (section.contains("adam_beta1"))
            adam.beta1 = section.at("adam_beta1").get<double>();
        if (section.contains("adam_beta2"))
            adam.beta2 = section.at("adam_beta2").get<double>();
        if (section.contains("adam_eps"))
            adam.epsilon = section.at("adam_eps").get<double>();
        if (section.contains("weight_decay"))
            adam.weight_decay = section.at("weight_decay").get<double>();
        if (section.contains("gradient_clipping"))
            adam.clip_norm = section.at("gradient_clipping").get<double>();
        if (masking && section.contains("masking")) {
            const json& mask = section.at("masking");
            require_known_keys(mask, {"select_rate", "mask", "keep", "random"},
                               where + ".masking");
            if (mask.contains("select_rate"))
                masking->select_rate = mask.at("select_rate").get<double>();
            if (mask.contains("mask")) masking->mask_frac = mask.at("mask").get<double>();
            if (mask.contains("keep")) masking->keep_frac = mask.at("keep").get<double>();
            if (mask.contains("random"))
                masking->random_frac = mask.at("random").get<double>();
        }
    } catch (const json::exception& e) {
        raise(ErrorCode::schema_mismatch, where + ": " + e.what());
    }
}

std::vector<std::string> dataset_urls(const Dataset& data) {
    std::vector<std::string> urls;
    urls.reserve(data.records.size());
    for (const UrlRecord& record : data.records) urls.push_back(record.url);
    return urls;
}

// ---- train-tokenizer ----

struct TrainTokenizerArgs {
    std::string input;
    std::string wordpiece_file;
    std::string output;
    std::string kind = "byte_bpe";
    int32_t vocab_size = 512;
};

void run_train_tokenizer(const TrainTokenizerArgs& args) {
    Vocabulary vocab;
    if (!args.wordpiece_file.empty()) {
        vocab = load_wordpiece_vocab(args.wordpiece_file);
    } else {
        Dataset data = load_dataset(args.input);
        vocab = train_bpe(dataset_urls(data), args.vocab_size,
                          vocab_kind_from_name(args.kind));
    }
    save_vocabulary(vocab, args.output);
    std::printf("%s vocabulary: %d pieces, %zu merges -> %s\n",
                vocab_kind_name(vocab.kind), vocab.size(), vocab.merges.size(),
                args.output.c_str());
}

// ---- pretrain ----

struct PretrainArgs {
    std::string input, vocab, output;
    std::string config_file;
    std::string step_log, metrics;
    uint64_t seed = 0;
    std::optional<int32_t> layers, hidden_size, ffn_size, heads, max_positions;
    std::optional<double> dropout, attention_dropout;
    std::optional<int32_t> epochs, batch_size, max_len;
    std::optional<double> peak_rate, warmup_ratio, weight_decay, clip_norm;
    std::optional<int64_t> warmup_steps;
    std::optional<std::string> schedule_name;
};

void run_pretrain(const PretrainArgs& args) {
    Dataset data = load_dataset(args.input);
    Vocabulary vocab = load_vocabulary(args.vocab);

    ModelConfig config;
    PretrainSettings settings;
    settings.seed = args.seed;
    settings.adam.weight_decay = 0.01;
    if (!args.config_file.empty()) {
        json doc = load_json_file(args.config_file);
        require_known_keys(doc, {"model", "pretrain", "finetune"}, args.config_file);
        if (doc.contains("model"))
            apply_model_section(doc.at("model"), args.config_file + ": model", config,
                                vocab.pieces.size());
        if (doc.contains("pretrain"))
            apply_training_section(doc.at("pretrain"), args.config_file + ": pretrain",
                                   settings.epochs, settings.batch_size,
                                   settings.max_len, settings.schedule, settings.adam,
                                   &settings.masking);
    }
    if (args.layers) config.num_layers = *args.layers;
    if (args.hidden_size) config.hidden_size = *args.hidden_size;
    if (args.ffn_size) config.ffn_size = *args.ffn_size;
    if (args.heads) config.num_heads = *args.heads;
    if (args.max_positions) config.max_positions = *args.max_positions;
    if (args.dropout) config.dropout = *args.dropout;
    if (args.attention_dropout) config.attention_dropout = *args.attention_dropout;
    if (args.epochs) settings.epochs = *args.epochs;
    if (args.batch_size) settings.batch_size = *args.batch_size;
    if (args.max_len) settings.max_len = *args.max_len;
    if (args.peak_rate) settings.schedule.peak_rate = *args.peak_rate;
    if (args.warmup_ratio) settings.schedule.warmup_ratio = *args.warmup_ratio;
    if (args.warmup_steps) settings.schedule.warmup_steps = *args.warmup_steps;
    if (args.weight_decay) settings.adam.weight_decay = *args.weight_decay;
    if (args.clip_norm) settings.adam.clip_norm = *args.clip_norm;
    if (args.schedule_name)
        settings.schedule.kind =
            schedule_kind_from_config(*args.schedule_name, "--schedule");
    config.vocab_size = vocab.size();

    TrainResult<float> result = pretrain_mlm<float>(config, data, vocab, settings);
    for (const EpochRecord& epoch : result.log.epochs)
        std::printf("epoch %d: train loss %.6f\n", epoch.epoch, epoch.train_loss);
    save_checkpoint(result.params, args.output);
    if (!args.step_log.empty()) write_step_log(result.log, args.step_log);
    if (!args.metrics.empty()) write_metrics(result.log, args.metrics);
    std::printf("saved checkpoint -> %s\n", args.output.c_str());
}

// ---- finetune ----

struct FinetuneArgs {
    std::string train_file, valid_file, vocab, init, output;
    std::string config_file;
    std::string step_log, metrics;
    uint64_t seed = 0;
    std::optional<int32_t> epochs, batch_size, max_len;
    std::optional<double> peak_rate, warmup_ratio, weight_decay, clip_norm;
    std::optional<int64_t> warmup_steps;
    std::optional<std::string> schedule_name;
};

void run_finetune(const FinetuneArgs& args) {
    Dataset train_data = load_dataset(args.train_file);
    Dataset valid_data = load_dataset(args.valid_file);
    Vocabulary vocab = load_vocabulary(args.vocab);
    ModelParams<float> init = load_checkpoint<float>(args.init);
    if (init.config.vocab_size != vocab.size())
        raise(ErrorCode::schema_mismatch,
              "checkpoint vocabulary size " + std::to_string(init.config.vocab_size) +
                  " does not match the vocabulary's " + std::to_string(vocab.size()));

    FinetuneSettings settings;
    settings.seed = args.seed;
    settings.schedule.kind = ScheduleKind::triangular;
    settings.adam.weight_decay = 0.01;
    if (!args.config_file.empty()) {
        json doc = load_json_file(args.config_file);
        require_known_keys(doc, {"model", "pretrain", "finetune"}, args.config_file);
        if (doc.contains("finetune"))
            apply_training_section(doc.at("finetune"), args.config_file + ": finetune",
                                   settings.epochs, settings.batch_size,
                                   settings.max_len, settings.schedule, settings.adam,
                                   nullptr);
    }
    if (args.epochs) settings.epochs = *args.epochs;
    if (args.batch_size) settings.batch_size = *args.batch_size;
    if (args.max_len) settings.max_len = *args.max_len;
    if (args.peak_rate) settings.schedule.peak_rate = *args.peak_rate;
    if (args.warmup_ratio) settings.schedule.warmup_ratio = *args.warmup_ratio;
    if (args.warmup_steps) settings.schedule.warmup_steps = *args.warmup_steps;
    if (args.weight_decay) settings.adam.weight_decay = *args.weight_decay;
    if (args.clip_norm) settings.adam.clip_norm = *args.clip_norm;
    if (args.schedule_name)
        settings.schedule.kind =
            schedule_kind_from_config(*args.schedule_name, "--schedule");

    TrainResult<float> result =
        finetune<float>(init, train_data, valid_data, vocab, settings);
    double best_auroc = 0.0;
    for (const EpochRecord& epoch : result.log.epochs) {
        std::printf("epoch %d: train loss %.6f, valid loss %.6f, valid auroc %.6f\n",
                    epoch.epoch, epoch.train_loss, epoch.valid_loss, epoch.valid_auroc);
        if (std::isfinite(epoch.valid_auroc))
            best_auroc = std::max(best_auroc, epoch.valid_auroc);
    }
    save_checkpoint(result.params, args.output);
    if (!args.step_log.empty()) write_step_log(result.log, args.step_log);
    if (!args.metrics.empty()) write_metrics(result.log, args.metrics);
    std::printf("best valid auroc %.6f; saved checkpoint -> %s\n", best_auroc,
                args.output.c_str());
}

// ---- attack ----

struct AttackArgs {
    std::string input, output, homoglyphs, words;
    uint64_t seed = 0;
};

void run_attack(const AttackArgs& args) {
    Dataset data = load_dataset(args.input);
    HomoglyphTable table = HomoglyphTable::load(args.homoglyphs);
    WordDictionary dict = WordDictionary::load(args.words);
    AugmentStats stats;
    Dataset augmented = build_adversarial_dataset(data, table, dict, args.seed, &stats);
    save_dataset(augmented, args.output);
    std::printf("records: %lld, considered: %lld, perturbed: %lld, failed: %lld\n",
                static_cast<long long>(stats.total),
                static_cast<long long>(stats.considered),
                static_cast<long long>(stats.perturbed),
                static_cast<long long>(stats.failed));
    const char* names[3] = {"homoglyph", "compound", "reorder"};
    for (int i = 0; i < 3; ++i)
        std::printf("%s: %lld chosen, %lld succeeded\n", names[i],
                    static_cast<long long>(stats.chosen[i]),
                    static_cast<long long>(stats.succeeded[i]));
    std::printf("wrote %zu records -> %s\n", augmented.records.size(),
                args.output.c_str());
}

// ---- score ----

struct ScoreArgs {
    std::string model, vocab, input, output;
    int32_t batch_size = 32;
    int32_t max_len = 0;
};

void run_score(const ScoreArgs& args) {
    ModelParams<float> params = load_checkpoint<float>(args.model);
    Vocabulary vocab = load_vocabulary(args.vocab);
    Dataset data = load_dataset(args.input);
    std::vector<ScoredPrediction> predictions =
        score_dataset<float>(params, vocab, data, args.batch_size, args.max_len);
    save_predictions(predictions, args.output);
    std::printf("scored %zu records -> %s\n", predictions.size(), args.output.c_str());
}

// ---- evaluate ----

struct EvaluateArgs {
    std::string predictions;
    std::vector<double> fpr_targets;
    double threshold = 0.5;
    std::string report, svg;
};

// Threshold realizing the operating point that tpr_at_fpr picks; the curve
// anchor at fpr 0 carries an infinite threshold, clamped to 1 for reporting.
double threshold_at_fpr(const RocCurve& curve, double target) {
    double threshold = std::numeric_limits<double>::infinity();
    for (const RocPoint& point : curve.points)
        if (point.fpr <= target) threshold = point.threshold;
    return std::min(threshold, 1.0);
}

void print_threshold_metrics(const std::vector<ScoredPrediction>& predictions,
                             double threshold, const std::string& label) {
    ThresholdMetrics m = threshold_metrics(predictions, threshold);
    std::printf(
        "metrics at %s: accuracy %.6f, precision %.6f%s, recall %.6f%s, f1 %.6f%s "
        "(tp %lld, fp %lld, tn %lld, fn %lld)\n",
        label.c_str(), m.accuracy, m.precision, m.precision_defined ? "" : " (undefined)",
        m.recall, m.recall_defined ? "" : " (undefined)", m.f1,
        m.f1_defined ? "" : " (undefined)", static_cast<long long>(m.tp),
        static_cast<long long>(m.fp), static_cast<long long>(m.tn),
        static_cast<long long>(m.fn));
}

void run_evaluate(const EvaluateArgs& args) {
    std::vector<ScoredPrediction> predictions = load_predictions(args.predictions);
    RocCurve curve = roc_curve(predictions);
    std::printf("predictions: %zu (%lld phish, %lld benign)\n", predictions.size(),
                static_cast<long long>(curve.positives),
                static_cast<long long>(curve.negatives));
    std::printf("auroc: %.6f\n", auroc(curve));
    std::vector<double> targets = args.fpr_targets;
    if (targets.empty()) targets.push_back(1e-4);
    for (double target : targets)
        std::printf("tpr at fpr %g: %.6f\n", target, tpr_at_fpr(curve, target));
    print_threshold_metrics(predictions, args.threshold,
                            "threshold " + std::to_string(args.threshold));
    for (double target : targets) {
        double threshold = threshold_at_fpr(curve, target);
        char label[64];
        std::snprintf(label, sizeof(label), "fpr-%g threshold %.6f", target, threshold);
        print_threshold_metrics(predictions, threshold, label);
    }
    if (!args.report.empty()) write_roc_report(curve, targets, args.report);
    if (!args.svg.empty()) {
        std::ofstream out(args.svg, std::ios::binary);
        if (!out) raise(ErrorCode::io, "cannot open \"" + args.svg + "\" for writing");
        out << render_roc_svg(curve);
    }
}

// ---- demo ----

void run_demo_command(const DemoOptions& options) {
    DemoReport report = run_demo(options);
    std::printf("mlm epoch loss: first %.6f, final %.6f\n", report.first_mlm_loss,
                report.final_mlm_loss);
    std::printf("clean model: best valid auroc %.6f, test auroc %.6f\n",
                report.clean_valid_auroc, report.clean_test_auroc);
    std::printf("augmented test: clean model auroc %.6f, adversarial model auroc %.6f\n",
                report.clean_augmented_auroc, report.adversarial_augmented_auroc);
    std::printf("artifacts -> %s\n", options.out_dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Phishing URL detection with subword tokenizers and a transformer "
                 "encoder trained from scratch"};
    app.require_subcommand(1);

    auto tokenizer_args = std::make_shared<TrainTokenizerArgs>();
    CLI::App* tokenizer_cmd = app.add_subcommand(
        "train-tokenizer", "Learn a BPE vocabulary from dataset URLs");
    CLI::Option* tokenizer_input =
        tokenizer_cmd->add_option("--input", tokenizer_args->input, "training TSV");
    CLI::Option* tokenizer_from_wordpiece = tokenizer_cmd->add_option(
        "--from-wordpiece", tokenizer_args->wordpiece_file,
        "convert a one-piece-per-line wordpiece file instead of training");
    tokenizer_input->excludes(tokenizer_from_wordpiece);
    tokenizer_from_wordpiece->excludes(tokenizer_input);
    tokenizer_cmd->add_option("--output", tokenizer_args->output, "vocabulary JSON")
        ->required();
    tokenizer_cmd->add_option("--kind", tokenizer_args->kind,
                              "byte_bpe or char_bpe (default byte_bpe)");
    tokenizer_cmd->add_option("--vocab-size", tokenizer_args->vocab_size,
                              "total piece budget (default 512)");
    tokenizer_cmd->callback([tokenizer_args] {
        if (tokenizer_args->input.empty() && tokenizer_args->wordpiece_file.empty())
            raise(ErrorCode::invalid_argument,
                  "train-tokenizer needs --input or --from-wordpiece");
        run_train_tokenizer(*tokenizer_args);
    });

    auto pretrain_args = std::make_shared<PretrainArgs>();
    CLI::App* pretrain_cmd =
        app.add_subcommand("pretrain", "Masked-token pre-training from random init");
    pretrain_cmd->add_option("--input", pretrain_args->input, "training TSV")
        ->required();
    pretrain_cmd->add_option("--vocab", pretrain_args->vocab, "vocabulary JSON")
        ->required();
    pretrain_cmd->add_option("--output", pretrain_args->output, "checkpoint path")
        ->required();
    pretrain_cmd->add_option("--seed", pretrain_args->seed, "training seed")
        ->required();
    pretrain_cmd->add_option("--config", pretrain_args->config_file,
                             "JSON config with model/pretrain sections");
    pretrain_cmd->add_option("--step-log", pretrain_args->step_log,
                             "write per-step TSV log here");
    pretrain_cmd->add_option("--metrics", pretrain_args->metrics,
                             "write per-epoch JSON metrics here");
    pretrain_cmd->add_option("--layers", pretrain_args->layers, "encoder layers");
    pretrain_cmd->add_option("--hidden-size", pretrain_args->hidden_size, "hidden size");
    pretrain_cmd->add_option("--ffn-size", pretrain_args->ffn_size, "FFN inner size");
    pretrain_cmd->add_option("--heads", pretrain_args->heads, "attention heads");
    pretrain_cmd->add_option("--max-positions", pretrain_args->max_positions,
                             "position embedding rows");
    pretrain_cmd->add_option("--dropout", pretrain_args->dropout, "hidden dropout");
    pretrain_cmd->add_option("--attention-dropout", pretrain_args->attention_dropout,
                             "attention dropout");
    pretrain_cmd->add_option("--epochs", pretrain_args->epochs, "training epochs");
    pretrain_cmd->add_option("--batch-size", pretrain_args->batch_size, "batch size");
    pretrain_cmd->add_option("--max-len", pretrain_args->max_len,
                             "tokens per sample (0: model max)");
    pretrain_cmd->add_option("--peak-lr", pretrain_args->peak_rate,
                             "peak learning rate");
    pretrain_cmd->add_option("--schedule", pretrain_args->schedule_name,
                             "linear, triangular, or plateau");
    pretrain_cmd->add_option("--warmup-ratio", pretrain_args->warmup_ratio,
                             "warmup fraction of total steps");
    pretrain_cmd->add_option("--warmup-steps", pretrain_args->warmup_steps,
                             "warmup steps (overrides ratio when >= 0)");
    pretrain_cmd->add_option("--weight-decay", pretrain_args->weight_decay,
                             "decoupled weight decay");
    pretrain_cmd->add_option("--clip-norm", pretrain_args->clip_norm,
                             "global gradient norm ceiling (0: off)");
    pretrain_cmd->callback([pretrain_args] { run_pretrain(*pretrain_args); });

    auto finetune_args = std::make_shared<FinetuneArgs>();
    CLI::App* finetune_cmd = app.add_subcommand(
        "finetune", "Classification fine-tuning from a pre-trained checkpoint");
    finetune_cmd->add_option("--train", finetune_args->train_file, "training TSV")
        ->required();
    finetune_cmd->add_option("--valid", finetune_args->valid_file, "validation TSV")
        ->required();
    finetune_cmd->add_option("--vocab", finetune_args->vocab, "vocabulary JSON")
        ->required();
    finetune_cmd->add_option("--init", finetune_args->init, "initial checkpoint")
        ->required();
    finetune_cmd->add_option("--output", finetune_args->output,
                             "best-checkpoint path")
        ->required();
    finetune_cmd->add_option("--seed", finetune_args->seed, "training seed")
        ->required();
    finetune_cmd->add_option("--config", finetune_args->config_file,
                             "JSON config with a finetune section");
    finetune_cmd->add_option("--step-log", finetune_args->step_log,
                             "write per-step TSV log here");
    finetune_cmd->add_option("--metrics", finetune_args->metrics,
                             "write per-epoch JSON metrics here");
    finetune_cmd->add_option("--epochs", finetune_args->epochs, "training epochs");
    finetune_cmd->add_option("--batch-size", finetune_args->batch_size, "batch size");
    finetune_cmd->add_option("--max-len", finetune_args->max_len,
                             "tokens per sample (0: model max)");
    finetune_cmd->add_option("--peak-lr", finetune_args->peak_rate,
                             "peak learning rate");
    finetune_cmd->add_option("--schedule", finetune_args->schedule_name,
                             "linear, triangular, or plateau");
    finetune_cmd->add_option("--warmup-ratio", finetune_args->warmup_ratio,
                             "warmup fraction of total steps");
    finetune_cmd->add_option("--warmup-steps", finetune_args->warmup_steps,
                             "warmup steps (overrides ratio when >= 0)");
    finetune_cmd->add_option("--weight-decay", finetune_args->weight_decay,
                             "decoupled weight decay");
    finetune_cmd->add_option("--clip-norm", finetune_args->clip_norm,
                             "global gradient norm ceiling (0: off)");
    finetune_cmd->callback([finetune_args] { run_finetune(*finetune_args); });

    auto attack_args = std::make_shared<AttackArgs>();
    CLI::App* attack_cmd = app.add_subcommand(
        "attack", "Augment a dataset with homoglyph/compound/reorder attacks");
    attack_cmd->add_option("--input", attack_args->input, "dataset TSV")->required();
    attack_cmd->add_option("--output", attack_args->output, "augmented TSV")
        ->required();
    attack_cmd->add_option("--homoglyphs", attack_args->homoglyphs,
                           "confusable table JSON")
        ->required();
    attack_cmd->add_option("--words", attack_args->words, "dictionary word list")
        ->required();
    attack_cmd->add_option("--seed", attack_args->seed, "augmentation seed")
        ->required();
    attack_cmd->callback([attack_args] { run_attack(*attack_args); });

    auto score_args = std::make_shared<ScoreArgs>();
    CLI::App* score_cmd =
        app.add_subcommand("score", "Score a dataset with a fine-tuned checkpoint");
    score_cmd->add_option("--model", score_args->model, "checkpoint path")->required();
    score_cmd->add_option("--vocab", score_args->vocab, "vocabulary JSON")->required();
    score_cmd->add_option("--input", score_args->input, "dataset TSV")->required();
    score_cmd->add_option("--output", score_args->output, "predictions TSV")
        ->required();
    score_cmd->add_option("--batch-size", score_args->batch_size,
                          "scoring batch size (default 32)");
    score_cmd->add_option("--max-len", score_args->max_len,
                          "tokens per sample (0: model max)");
    score_cmd->callback([score_args] { run_score(*score_args); });

    auto evaluate_args = std::make_shared<EvaluateArgs>();
    CLI::App* evaluate_cmd =
        app.add_subcommand("evaluate", "ROC metrics over a predictions file");
    evaluate_cmd
        ->add_option("--predictions", evaluate_args->predictions, "predictions TSV")
        ->required();
    evaluate_cmd->add_option("--fpr", evaluate_args->fpr_targets,
                             "fpr ceilings for tpr reporting (default 1e-4)");
    evaluate_cmd->add_option("--threshold", evaluate_args->threshold,
                             "decision threshold for the metrics block");
    evaluate_cmd->add_option("--report", evaluate_args->report,
                             "write the JSON ROC report here");
    evaluate_cmd->add_option("--svg", evaluate_args->svg,
                             "write a log-x ROC plot here");
    evaluate_cmd->callback([evaluate_args] { run_evaluate(*evaluate_args); });

    auto demo_options = std::make_shared<DemoOptions>();
    CLI::App* demo_cmd = app.add_subcommand(
        "demo", "Synthetic end-to-end run: generate, train, attack, compare");
    demo_cmd->add_option("--out", demo_options->out_dir, "artifact directory")
        ->required();
    demo_cmd->add_option("--seed", demo_options->seed, "seed for every stage")
        ->required();
    demo_cmd->add_option("--records", demo_options->num_records, "corpus size");
    demo_cmd->add_option("--vocab-size", demo_options->vocab_size,
                         "tokenizer piece budget");
    demo_cmd->add_option("--max-len", demo_options->max_len, "tokens per sample");
    demo_cmd->add_option("--batch-size", demo_options->batch_size, "batch size");
    demo_cmd->add_option("--pretrain-epochs", demo_options->pretrain_epochs,
                         "pre-training epochs");
    demo_cmd->add_option("--finetune-epochs", demo_options->finetune_epochs,
                         "fine-tuning epochs");
    demo_cmd->add_option("--pretrain-lr", demo_options->pretrain_rate,
                         "pre-training peak learning rate");
    demo_cmd->add_option("--finetune-lr", demo_options->finetune_rate,
                         "fine-tuning peak learning rate");
    demo_cmd->callback([demo_options] { run_demo_command(*demo_options); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        return 2;
    } catch (const urltran::Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", error_code_name(e.code()), e.what());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 1;
    }
    return 0;
}
