#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "urltran/corpus.hpp"
#include "urltran/encoder.hpp"
#include "urltran/tokenize.hpp"

namespace urltran {

// Dynamic masking policy: select_rate of the eligible (attended, non-special)
// positions join the masked-token objective; of those, mask_frac become
// [MASK], keep_frac keep their token, random_frac get a random non-special
// token. The three fractions must sum to 1.
struct MaskingPolicy {
    double select_rate = 0.15;
    double mask_frac = 0.8;
    double keep_frac = 0.1;
    double random_frac = 0.1;

    void validate() const;
};

// Fresh draw every call — call once per epoch per sequence for dynamic
// masking. Labels hold the original token at selected positions and
// kMlmIgnore everywhere else.
TokenSequence mask_tokens(const TokenSequence& seq, const MaskingPolicy& policy,
                          const Vocabulary& vocab, uint64_t seed);

enum class ScheduleKind : int32_t { linear, triangular, plateau };

const char* schedule_kind_name(ScheduleKind kind);
ScheduleKind schedule_kind_from_name(std::string_view name);

struct Schedule {
    ScheduleKind kind = ScheduleKind::linear;
    double peak_rate = 1e-4;
    // linear: warmup_steps wins when >= 0, else round(warmup_ratio * total).
    int64_t warmup_steps = -1;
    double warmup_ratio = 0.06;
    // plateau: rate = peak * shrink^events, an event being `patience`
    // consecutive epochs without a new best validation loss.
    double shrink = 0.5;
    int32_t patience = 1;

    void validate() const;
};

// Learning rate for the given 0-based step. loss_history holds one entry per
// completed epoch and only matters for the plateau kind.
double schedule_rate(const Schedule& schedule, int64_t step, int64_t total_steps,
                     const std::vector<double>& loss_history);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-6;
    double weight_decay = 0.0;  // decoupled from the adaptive update
    double clip_norm = 0.0;     // 0 disables gradient clipping

    void validate() const;
};

// Adam with bias correction and decoupled weight decay. With zero gradients
// from a fresh state the update moves parameters only by the decay term, so a
// zero decay makes it the exact identity.
template <typename S>
class Optimizer {
public:
    Optimizer(const ModelParams<S>& params, const AdamConfig& config);

    // Clips grads in place against config.clip_norm, applies one update, and
    // returns the pre-clip global gradient norm.
    double step(ModelParams<S>& params, Gradients<S>& grads, double rate);

    int64_t step_count() const { return step_count_; }

private:
    AdamConfig config_;
    int64_t step_count_ = 0;
    Gradients<S> m_;
    Gradients<S> v_;
};

struct StepRecord {
    int64_t step = 0;  // 1-based
    double rate = 0.0;
    double loss = 0.0;
};

struct EpochRecord {
    int32_t epoch = 0;  // 0-based
    double train_loss = 0.0;
    double valid_loss = std::numeric_limits<double>::quiet_NaN();
    double valid_auroc = std::numeric_limits<double>::quiet_NaN();
    bool saw_empty_mask = false;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

// step<TAB>lr<TAB>loss rows under a header line.
void write_step_log(const TrainLog& log, const std::string& path);
// Per-epoch metrics as JSON.
void write_metrics(const TrainLog& log, const std::string& path);

template <typename S>
struct TrainResult {
    ModelParams<S> params;
    TrainLog log;
};

struct PretrainSettings {
    int32_t epochs = 5;
    int32_t batch_size = 32;
    int32_t max_len = 0;  // 0 means the model's max_positions
    uint64_t seed = 0;
    Schedule schedule;
    AdamConfig adam;
    MaskingPolicy masking;
};

// Masked-token pre-training from random init. The plateau schedule, if
// chosen, tracks the epoch mean training loss (there is no validation split
// at this stage).
template <typename S>
TrainResult<S> pretrain_mlm(const ModelConfig& config, const Dataset& data,
                            const Vocabulary& vocab, const PretrainSettings& settings);

struct FinetuneSettings {
    int32_t epochs = 10;
    int32_t batch_size = 32;
    int32_t max_len = 0;
    uint64_t seed = 0;
    Schedule schedule;
    AdamConfig adam;
};

// Classification fine-tuning. Validation loss/AUROC are measured after every
// epoch; the returned parameters are the epoch checkpoint with the best
// validation AUROC (earliest wins ties). Zero epochs returns the initial
// parameters unchanged.
template <typename S>
TrainResult<S> finetune(const ModelParams<S>& init, const Dataset& train_data,
                        const Dataset& valid_data, const Vocabulary& vocab,
                        const FinetuneSettings& settings);

}  // namespace urltran
