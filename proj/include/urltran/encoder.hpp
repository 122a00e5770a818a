#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "urltran/corpus.hpp"
#include "urltran/tokenize.hpp"

namespace urltran {

struct ModelConfig {
    int32_t num_layers = 2;
    int32_t hidden_size = 64;
    int32_t ffn_size = 256;
    int32_t num_heads = 4;
    int32_t max_positions = 64;
    int32_t vocab_size = 0;  // set from the vocabulary before init
    double dropout = 0.1;
    double attention_dropout = 0.1;
    double initializer_range = 0.02;
    double layer_norm_eps = 1e-12;
    bool use_pooler = true;
    bool use_type_embeddings = false;

    int32_t head_size() const { return hidden_size / num_heads; }
    void validate() const;  // raises invalid_argument on any bad field
};

// Dense row-major tensor: vectors are [n], matrices [rows, cols].
template <typename S>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<S> v;

    static Tensor zeros(std::vector<int64_t> shape);
    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    S* data() { return v.data(); }
    const S* data() const { return v.data(); }
};

template <typename S>
struct LayerParams {
    Tensor<S> query_w, query_b;
    Tensor<S> key_w, key_b;
    Tensor<S> value_w, value_b;
    Tensor<S> output_w, output_b;
    Tensor<S> ln1_scale, ln1_offset;
    Tensor<S> ffn1_w, ffn1_b;
    Tensor<S> ffn2_w, ffn2_b;
    Tensor<S> ln2_scale, ln2_offset;
};

// Full parameter set. Also used as the gradient container (same shapes, same
// iteration order).
template <typename S>
struct ModelParams {
    ModelConfig config;
    Tensor<S> token_embedding;     // [vocab, hidden]
    Tensor<S> position_embedding;  // [max_positions, hidden]
    Tensor<S> type_embedding;      // [2, hidden], only when use_type_embeddings
    Tensor<S> embedding_ln_scale, embedding_ln_offset;
    std::vector<LayerParams<S>> layers;
    Tensor<S> pooler_w, pooler_b;     // only when use_pooler
    Tensor<S> classifier_w, classifier_b;  // [2, hidden], [2]
    Tensor<S> mlm_w, mlm_b;           // [vocab, hidden], [vocab]

    // Name/tensor pairs in a fixed, stable order; drives init draws, the
    // optimizer, and checkpoint layout.
    std::vector<std::pair<std::string, Tensor<S>*>> tensor_entries();
    std::vector<std::pair<std::string, const Tensor<S>*>> tensor_entries() const;

    bool all_finite() const;
};

template <typename S>
using Gradients = ModelParams<S>;

// Parameters with matching shapes, every element zero. Used for gradient and
// optimizer-moment containers.
template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& params);

template <typename S>
ModelParams<S> init_params(const ModelConfig& config, uint64_t seed);

enum class RunMode { train, eval };

struct ForwardOptions {
    RunMode mode = RunMode::eval;
    uint64_t seed = 0;     // drives dropout in train mode
    bool want_mlm = true;  // skip the vocabulary-sized head when false
};

template <typename S>
struct BatchOutput {
    int64_t batch = 0;
    int32_t max_len = 0;
    int32_t vocab_size = 0;
    std::vector<S> logits;      // [batch, 2]
    std::vector<S> mlm_logits;  // [batch, max_len, vocab], empty if skipped
};

template <typename S>
BatchOutput<S> forward(const ModelParams<S>& params,
                       const std::vector<TokenSequence>& batch,
                       const ForwardOptions& options = {});

struct LossResult {
    double value = 0.0;
    bool empty_mask = false;  // mlm loss only: no position contributed
};

// Mean cross-entropy of the 2-class logits against labels.
template <typename S>
LossResult classification_loss(const BatchOutput<S>& out, const std::vector<Label>& labels);

// Mean cross-entropy of the masked-position logits against batch[i].mlm_labels.
template <typename S>
LossResult mlm_loss(const BatchOutput<S>& out, const std::vector<TokenSequence>& batch);

enum class LossKind { mlm, classification };

template <typename S>
struct BackwardResult {
    Gradients<S> grads;
    LossResult loss;
    BatchOutput<S> output;
};

// Forward plus exact gradients of the selected loss with respect to every
// parameter. labels is only read for the classification loss. Dropout draws
// are identical to a forward call with the same options.
template <typename S>
BackwardResult<S> backward(const ModelParams<S>& params,
                           const std::vector<TokenSequence>& batch,
                           const std::vector<Label>& labels, LossKind kind,
                           const ForwardOptions& options = {});

// Checkpoints: a JSON manifest at `path` (config plus tensor names, shapes,
// byte offsets) and a raw little-endian float32 blob next to it.
template <typename S>
void save_checkpoint(const ModelParams<S>& params, const std::string& path);

template <typename S>
ModelParams<S> load_checkpoint(const std::string& path);

}  // namespace urltran
