#include "urltran/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "urltran/error.hpp"
#include "urltran/eval.hpp"
#include "urltran/rng.hpp"

namespace urltran {

namespace {

using json = nlohmann::ordered_json;

// Independent seed streams per purpose, so adding draws to one never shifts
// another.
constexpr uint64_t kInitStream = 0;
constexpr uint64_t kShuffleStream = 1;
constexpr uint64_t kDropoutStream = 2;
constexpr uint64_t kMaskingStream = 3;

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

std::vector<TokenSequence> encode_all(const Dataset& data, const Vocabulary& vocab,
                                      int32_t max_len) {
    std::vector<TokenSequence> out;
    out.reserve(data.records.size());
    for (const UrlRecord& record : data.records)
        out.push_back(encode(vocab, record.url, max_len));
    return out;
}

int32_t resolve_max_len(const ModelConfig& config, int32_t max_len) {
    if (max_len == 0) return config.max_positions;
    if (max_len < 3 || max_len > config.max_positions)
        raise(ErrorCode::invalid_argument,
              "max_len " + std::to_string(max_len) + " outside [3, " +
                  std::to_string(config.max_positions) + "]");
    return max_len;
}

void check_vocab(const ModelConfig& config, const Vocabulary& vocab) {
    if (vocab.size() != config.vocab_size)
        raise(ErrorCode::schema_mismatch,
              "vocabulary has " + std::to_string(vocab.size()) +
                  " pieces but the model expects " + std::to_string(config.vocab_size));
}

void check_common(int32_t epochs, int32_t batch_size, const Dataset& data,
                  const char* what) {
    if (epochs < 1) raise(ErrorCode::invalid_argument, "epochs must be positive");
    if (batch_size < 1) raise(ErrorCode::invalid_argument, "batch_size must be positive");
    if (data.records.empty())
        raise(ErrorCode::empty_dataset, std::string(what) + ": no records");
}

}  // namespace

void MaskingPolicy::validate() const {
    if (!(select_rate >= 0.0 && select_rate <= 1.0))
        raise(ErrorCode::invalid_argument, "select_rate must be in [0, 1]");
    for (double f : {mask_frac, keep_frac, random_frac})
        if (!(f >= 0.0 && f <= 1.0))
            raise(ErrorCode::invalid_argument, "masking fractions must be in [0, 1]");
    if (std::abs(mask_frac + keep_frac + random_frac - 1.0) > 1e-9)
        raise(ErrorCode::invalid_argument, "masking fractions must sum to 1");
}

TokenSequence mask_tokens(const TokenSequence& seq, const MaskingPolicy& policy,
                          const Vocabulary& vocab, uint64_t seed) {
    policy.validate();
    if (seq.ids.size() != seq.attention_mask.size())
        raise(ErrorCode::invalid_argument, "sequence ids and attention mask differ in length");

    TokenSequence out = seq;
    out.mlm_labels.assign(seq.ids.size(), kMlmIgnore);
    Rng rng(seed);
    const int32_t non_specials = vocab.size() - Vocabulary::kNumSpecials;
    for (size_t t = 0; t < seq.ids.size(); ++t) {
        if (!seq.attention_mask[t]) continue;
        if (vocab.is_special(seq.ids[t])) continue;  // never CLS, SEP, or pads
        if (rng.uniform() >= policy.select_rate) continue;

        out.mlm_labels[t] = seq.ids[t];
        double action = rng.uniform();
        if (action < policy.mask_frac) {
            out.ids[t] = Vocabulary::kMask;
        } else if (action < policy.mask_frac + policy.keep_frac) {
            // token stays as is
        } else {
            if (non_specials <= 0)
                raise(ErrorCode::invalid_argument,
                      "vocabulary has no non-special pieces to sample from");
            out.ids[t] = Vocabulary::kNumSpecials +
                         static_cast<int32_t>(rng.below(static_cast<uint64_t>(non_specials)));
        }
    }
    return out;
}

const char* schedule_kind_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::triangular: return "triangular";
        case ScheduleKind::plateau: return "plateau";
    }
    return "linear";
}

ScheduleKind schedule_kind_from_name(std::string_view name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "triangular") return ScheduleKind::triangular;
    if (name == "plateau") return ScheduleKind::plateau;
    raise(ErrorCode::parse, "unknown schedule \"" + std::string(name) + "\"");
}

void Schedule::validate() const {
    if (!(peak_rate >= 0.0))
        raise(ErrorCode::invalid_argument, "peak_rate must be non-negative");
    if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0))
        raise(ErrorCode::invalid_argument, "warmup_ratio must be in [0, 1]");
    if (!(shrink > 0.0 && shrink <= 1.0))
        raise(ErrorCode::invalid_argument, "shrink must be in (0, 1]");
    if (patience < 1) raise(ErrorCode::invalid_argument, "patience must be positive");
}

double schedule_rate(const Schedule& schedule, int64_t step, int64_t total_steps,
                     const std::vector<double>& loss_history) {
    schedule.validate();
    if (total_steps < 1) raise(ErrorCode::invalid_argument, "total_steps must be positive");
    if (step < 0 || step >= total_steps)
        raise(ErrorCode::invalid_argument, "step outside [0, total_steps)");

    switch (schedule.kind) {
        case ScheduleKind::linear: {
            int64_t warmup = schedule.warmup_steps >= 0
                                 ? schedule.warmup_steps
                                 : std::llround(schedule.warmup_ratio *
                                                static_cast<double>(total_steps));
            warmup = std::min(warmup, total_steps);
            if (step < warmup)
                return schedule.peak_rate * static_cast<double>(step) /
                       static_cast<double>(warmup);
            int64_t decay_span = std::max<int64_t>(total_steps - warmup, 1);
            return schedule.peak_rate * static_cast<double>(total_steps - step) /
                   static_cast<double>(decay_span);
        }
        case ScheduleKind::triangular: {
            // Rise over the first half (peak exactly at the midpoint step),
            // fall over the second.
            int64_t mid = (total_steps + 1) / 2;
            if (step < mid)
                return schedule.peak_rate * static_cast<double>(step + 1) /
                       static_cast<double>(mid);
            return schedule.peak_rate * static_cast<double>(total_steps - step) /
                   static_cast<double>(total_steps - mid + 1);
        }
        case ScheduleKind::plateau: {
            int32_t events = 0;
            int32_t streak = 0;
            double best = std::numeric_limits<double>::infinity();
            for (double loss : loss_history) {
                if (loss < best) {
                    best = loss;
                    streak = 0;
                } else if (++streak >= schedule.patience) {
                    ++events;
                    streak = 0;
                }
            }
            return schedule.peak_rate * std::pow(schedule.shrink, events);
        }
    }
    return schedule.peak_rate;
}

void AdamConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0))
        raise(ErrorCode::invalid_argument, "beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0))
        raise(ErrorCode::invalid_argument, "beta2 must be in [0, 1)");
    if (!(epsilon > 0.0)) raise(ErrorCode::invalid_argument, "epsilon must be positive");
    if (!(weight_decay >= 0.0))
        raise(ErrorCode::invalid_argument, "weight_decay must be non-negative");
    if (!(clip_norm >= 0.0))
        raise(ErrorCode::invalid_argument, "clip_norm must be non-negative");
}

template <typename S>
Optimizer<S>::Optimizer(const ModelParams<S>& params, const AdamConfig& config)
    : config_(config), m_(zeros_like(params)), v_(zeros_like(params)) {
    config.validate();
}

template <typename S>
double Optimizer<S>::step(ModelParams<S>& params, Gradients<S>& grads, double rate) {
    if (!(rate >= 0.0)) raise(ErrorCode::invalid_argument, "learning rate must be non-negative");
    auto param_entries = params.tensor_entries();
    auto grad_entries = grads.tensor_entries();
    auto m_entries = m_.tensor_entries();
    auto v_entries = v_.tensor_entries();
    if (grad_entries.size() != param_entries.size() ||
        m_entries.size() != param_entries.size())
        raise(ErrorCode::invalid_argument, "gradients do not match parameter layout");

    double norm_sq = 0.0;
    for (auto& [name, g] : grad_entries)
        for (S value : g->v) norm_sq += static_cast<double>(value) * static_cast<double>(value);
    double norm = std::sqrt(norm_sq);
    if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
        S scale = static_cast<S>(config_.clip_norm / norm);
        for (auto& [name, g] : grad_entries)
            for (S& value : g->v) value *= scale;
    }

    ++step_count_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < param_entries.size(); ++i) {
        Tensor<S>& p = *param_entries[i].second;
        Tensor<S>& g = *grad_entries[i].second;
        Tensor<S>& m = *m_entries[i].second;
        Tensor<S>& v = *v_entries[i].second;
        if (g.v.size() != p.v.size())
            raise(ErrorCode::invalid_argument,
                  "gradient shape mismatch for " + param_entries[i].first);
        for (size_t k = 0; k < p.v.size(); ++k) {
            double gk = static_cast<double>(g.v[k]);
            double mk = config_.beta1 * static_cast<double>(m.v[k]) + (1.0 - config_.beta1) * gk;
            double vk = config_.beta2 * static_cast<double>(v.v[k]) + (1.0 - config_.beta2) * gk * gk;
            m.v[k] = static_cast<S>(mk);
            v.v[k] = static_cast<S>(vk);
            double update = (mk / bc1) / (std::sqrt(vk / bc2) + config_.epsilon);
            double decay = config_.weight_decay * static_cast<double>(p.v[k]);
            p.v[k] = static_cast<S>(static_cast<double>(p.v[k]) - rate * (update + decay));
        }
    }
    return norm;
}

void write_step_log(const TrainLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write step log \"" + path + "\"");
    out << "step\tlr\tloss\n";
    for (const StepRecord& s : log.steps)
        out << s.step << '\t' << format_double(s.rate) << '\t' << format_double(s.loss)
            << '\n';
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

void write_metrics(const TrainLog& log, const std::string& path) {
    json doc;
    doc["total_steps"] = log.steps.size();
    json epochs = json::array();
    for (const EpochRecord& e : log.epochs) {
        json entry;
        entry["epoch"] = e.epoch;
        entry["train_loss"] = e.train_loss;
        if (std::isfinite(e.valid_loss)) entry["valid_loss"] = e.valid_loss;
        if (std::isfinite(e.valid_auroc)) entry["valid_auroc"] = e.valid_auroc;
        entry["saw_empty_mask"] = e.saw_empty_mask;
        epochs.push_back(std::move(entry));
    }
    doc["epochs"] = std::move(epochs);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::io, "cannot write metrics \"" + path + "\"");
    out << doc.dump(2) << '\n';
    if (!out) raise(ErrorCode::io, "write failed for \"" + path + "\"");
}

namespace {

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int32_t epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(mix_seed(seed, kShuffleStream), static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

template <typename S>
void check_finite_after_step(const ModelParams<S>& params, int64_t step) {
    if (!params.all_finite())
        raise(ErrorCode::format,
              "training diverged: non-finite parameters after step " + std::to_string(step));
}

}  // namespace

template <typename S>
TrainResult<S> pretrain_mlm(const ModelConfig& config, const Dataset& data,
                            const Vocabulary& vocab, const PretrainSettings& settings) {
    check_common(settings.epochs, settings.batch_size, data, "pretrain");
    check_vocab(config, vocab);
    settings.schedule.validate();
    settings.adam.validate();
    settings.masking.validate();
    const int32_t max_len = resolve_max_len(config, settings.max_len);

    std::vector<TokenSequence> encoded = encode_all(data, vocab, max_len);
    const size_t n = encoded.size();
    const int64_t steps_per_epoch =
        static_cast<int64_t>((n + settings.batch_size - 1) / settings.batch_size);
    const int64_t total_steps = steps_per_epoch * settings.epochs;

    TrainResult<S> result;
    result.params = init_params<S>(config, mix_seed(settings.seed, kInitStream));
    Optimizer<S> optimizer(result.params, settings.adam);

    std::vector<double> loss_history;
    int64_t global_step = 0;
    for (int32_t epoch = 0; epoch < settings.epochs; ++epoch) {
        std::vector<size_t> order = epoch_order(n, settings.seed, epoch);
        double epoch_loss = 0.0;
        bool saw_empty = false;
        for (size_t begin = 0; begin < n; begin += settings.batch_size) {
            size_t end = std::min(n, begin + settings.batch_size);
            std::vector<TokenSequence> batch;
            batch.reserve(end - begin);
            for (size_t i = begin; i < end; ++i) {
                size_t idx = order[i];
                uint64_t mask_seed =
                    mix_seed(mix_seed(settings.seed, kMaskingStream),
                             static_cast<uint64_t>(epoch) * n + idx);
                batch.push_back(mask_tokens(encoded[idx], settings.masking, vocab, mask_seed));
            }

            double rate = schedule_rate(settings.schedule, global_step, total_steps,
                                        loss_history);
            ForwardOptions options;
            options.mode = RunMode::train;
            options.seed = mix_seed(mix_seed(settings.seed, kDropoutStream),
                                    static_cast<uint64_t>(global_step));
            options.want_mlm = true;
            BackwardResult<S> back =
                backward(result.params, batch, {}, LossKind::mlm, options);
            saw_empty |= back.loss.empty_mask;
            optimizer.step(result.params, back.grads, rate);
            ++global_step;
            check_finite_after_step(result.params, global_step);
            result.log.steps.push_back({global_step, rate, back.loss.value});
            epoch_loss += back.loss.value;
        }
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
        record.saw_empty_mask = saw_empty;
        result.log.epochs.push_back(record);
        loss_history.push_back(record.train_loss);
    }
    return result;
}

template <typename S>
TrainResult<S> finetune(const ModelParams<S>& init, const Dataset& train_data,
                        const Dataset& valid_data, const Vocabulary& vocab,
                        const FinetuneSettings& settings) {
    if (settings.epochs < 0)
        raise(ErrorCode::invalid_argument, "epochs must be non-negative");
    if (settings.batch_size < 1)
        raise(ErrorCode::invalid_argument, "batch_size must be positive");
    if (train_data.records.empty())
        raise(ErrorCode::empty_dataset, "finetune: no records");
    if (valid_data.records.empty())
        raise(ErrorCode::empty_dataset, "finetune: empty validation split");
    check_vocab(init.config, vocab);
    settings.schedule.validate();
    settings.adam.validate();
    const int32_t max_len = resolve_max_len(init.config, settings.max_len);

    if (settings.epochs == 0) {
        TrainResult<S> unchanged;
        unchanged.params = init;
        return unchanged;
    }

    std::vector<TokenSequence> encoded = encode_all(train_data, vocab, max_len);
    std::vector<Label> labels;
    labels.reserve(train_data.records.size());
    for (const UrlRecord& r : train_data.records) labels.push_back(r.label);

    const size_t n = encoded.size();
    const int64_t steps_per_epoch =
        static_cast<int64_t>((n + settings.batch_size - 1) / settings.batch_size);
    const int64_t total_steps = steps_per_epoch * settings.epochs;

    TrainResult<S> result;
    result.params = init;
    Optimizer<S> optimizer(result.params, settings.adam);

    ModelParams<S> best_params = result.params;
    double best_auroc = -1.0;

    std::vector<double> loss_history;
    int64_t global_step = 0;
    for (int32_t epoch = 0; epoch < settings.epochs; ++epoch) {
        std::vector<size_t> order = epoch_order(n, settings.seed, epoch);
        double epoch_loss = 0.0;
        for (size_t begin = 0; begin < n; begin += settings.batch_size) {
            size_t end = std::min(n, begin + settings.batch_size);
            std::vector<TokenSequence> batch;
            std::vector<Label> batch_labels;
            batch.reserve(end - begin);
            for (size_t i = begin; i < end; ++i) {
                batch.push_back(encoded[order[i]]);
                batch_labels.push_back(labels[order[i]]);
            }

            double rate = schedule_rate(settings.schedule, global_step, total_steps,
                                        loss_history);
            ForwardOptions options;
            options.mode = RunMode::train;
            options.seed = mix_seed(mix_seed(settings.seed, kDropoutStream),
                                    static_cast<uint64_t>(global_step));
            options.want_mlm = false;
            BackwardResult<S> back = backward(result.params, batch, batch_labels,
                                              LossKind::classification, options);
            optimizer.step(result.params, back.grads, rate);
            ++global_step;
            check_finite_after_step(result.params, global_step);
            result.log.steps.push_back({global_step, rate, back.loss.value});
            epoch_loss += back.loss.value;
        }

        // Validation pass: mean loss plus ranking quality.
        double valid_loss_sum = 0.0;
        int64_t valid_count = 0;
        std::vector<ScoredPrediction> predictions;
        predictions.reserve(valid_data.records.size());
        for (size_t begin = 0; begin < valid_data.records.size();
             begin += settings.batch_size) {
            size_t end = std::min(valid_data.records.size(), begin + settings.batch_size);
            std::vector<TokenSequence> batch;
            std::vector<Label> batch_labels;
            for (size_t i = begin; i < end; ++i) {
                batch.push_back(encode(vocab, valid_data.records[i].url, max_len));
                batch_labels.push_back(valid_data.records[i].label);
            }
            ForwardOptions options;
            options.want_mlm = false;
            BatchOutput<S> out = forward(result.params, batch, options);
            valid_loss_sum += classification_loss(out, batch_labels).value *
                              static_cast<double>(end - begin);
            valid_count += static_cast<int64_t>(end - begin);
            for (size_t i = begin; i < end; ++i) {
                double l0 = static_cast<double>(out.logits[(i - begin) * 2]);
                double l1 = static_cast<double>(out.logits[(i - begin) * 2 + 1]);
                predictions.push_back({valid_data.records[i].url,
                                       valid_data.records[i].label,
                                       1.0 / (1.0 + std::exp(l0 - l1))});
            }
        }
        double valid_loss = valid_loss_sum / static_cast<double>(valid_count);
        double valid_auroc = auroc(roc_curve(predictions));

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
        record.valid_loss = valid_loss;
        record.valid_auroc = valid_auroc;
        result.log.epochs.push_back(record);
        loss_history.push_back(valid_loss);

        if (valid_auroc > best_auroc) {
            best_auroc = valid_auroc;
            best_params = result.params;
        }
    }
    result.params = std::move(best_params);
    return result;
}

template class Optimizer<float>;
template class Optimizer<double>;
template TrainResult<float> pretrain_mlm(const ModelConfig&, const Dataset&,
                                         const Vocabulary&, const PretrainSettings&);
template TrainResult<double> pretrain_mlm(const ModelConfig&, const Dataset&,
                                          const Vocabulary&, const PretrainSettings&);
template TrainResult<float> finetune(const ModelParams<float>&, const Dataset&,
                                     const Dataset&, const Vocabulary&,
                                     const FinetuneSettings&);
template TrainResult<double> finetune(const ModelParams<double>&, const Dataset&,
                                      const Dataset&, const Vocabulary&,
                                      const FinetuneSettings&);

}  // namespace urltran
