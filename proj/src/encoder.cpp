#include "urltran/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "urltran/error.hpp"
#include "urltran/rng.hpp"

namespace urltran {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename S>
S gelu(S x) {
    return static_cast<S>(0.5 * static_cast<double>(x) *
                          (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
}

template <typename S>
S gelu_grad(S x) {
    double xd = static_cast<double>(x);
    double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
    double pdf = std::exp(-0.5 * xd * xd) * kInvSqrt2Pi;
    return static_cast<S>(cdf + xd * pdf);
}

// y[M,N] = x[M,K] * w[N,K]^T + b. w is transposed once so the inner loop is a
// contiguous multiply-accumulate the compiler can vectorize.
template <typename S>
void linear_forward(const S* x, int64_t m_rows, int64_t k_in, const S* w, const S* b,
                    int64_t n_out, S* y, std::vector<S>& scratch) {
    scratch.resize(static_cast<size_t>(k_in * n_out));
    for (int64_t n = 0; n < n_out; ++n)
        for (int64_t k = 0; k < k_in; ++k) scratch[k * n_out + n] = w[n * k_in + k];
    for (int64_t m = 0; m < m_rows; ++m) {
        S* ym = y + m * n_out;
        if (b) {
            std::memcpy(ym, b, sizeof(S) * n_out);
        } else {
            std::fill(ym, ym + n_out, S(0));
        }
        const S* xm = x + m * k_in;
        for (int64_t k = 0; k < k_in; ++k) {
            S c = xm[k];
            const S* wt = scratch.data() + k * n_out;
            for (int64_t n = 0; n < n_out; ++n) ym[n] += c * wt[n];
        }
    }
}

// dx[M,K] += dy[M,N] * w[N,K]
template <typename S>
void linear_dx(const S* dy, int64_t m_rows, int64_t n_out, const S* w, int64_t k_in,
               S* dx) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const S* dym = dy + m * n_out;
        S* dxm = dx + m * k_in;
        for (int64_t n = 0; n < n_out; ++n) {
            S c = dym[n];
            const S* wn = w + n * k_in;
            for (int64_t k = 0; k < k_in; ++k) dxm[k] += c * wn[k];
        }
    }
}

// dw[N,K] += dy[M,N]^T * x[M,K]; db[N] += column sums of dy
template <typename S>
void linear_dw_db(const S* dy, const S* x, int64_t m_rows, int64_t n_out, int64_t k_in,
                  S* dw, S* db) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const S* dym = dy + m * n_out;
        const S* xm = x + m * k_in;
        for (int64_t n = 0; n < n_out; ++n) {
            S c = dym[n];
            if (db) db[n] += c;
            S* dwn = dw + n * k_in;
            for (int64_t k = 0; k < k_in; ++k) dwn[k] += c * xm[k];
        }
    }
}

template <typename S>
void layer_norm_forward(const S* x, int64_t m_rows, int64_t h, const S* scale,
                        const S* offset, double eps, S* y, S* x_hat, S* rstd) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const S* xm = x + m * h;
        double mean = 0.0;
        for (int64_t i = 0; i < h; ++i) mean += static_cast<double>(xm[i]);
        mean /= static_cast<double>(h);
        double var = 0.0;
        for (int64_t i = 0; i < h; ++i) {
            double d = static_cast<double>(xm[i]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(h);
        double r = 1.0 / std::sqrt(var + eps);
        rstd[m] = static_cast<S>(r);
        for (int64_t i = 0; i < h; ++i) {
            S xh = static_cast<S>((static_cast<double>(xm[i]) - mean) * r);
            x_hat[m * h + i] = xh;
            y[m * h + i] = scale[i] * xh + offset[i];
        }
    }
}

template <typename S>
void layer_norm_backward(const S* dy, const S* x_hat, const S* rstd, const S* scale,
                         int64_t m_rows, int64_t h, S* dx, S* dscale, S* doffset) {
    for (int64_t m = 0; m < m_rows; ++m) {
        const S* dym = dy + m * h;
        const S* xhm = x_hat + m * h;
        double sum1 = 0.0, sum2 = 0.0;
        for (int64_t i = 0; i < h; ++i) {
            double dyw = static_cast<double>(dym[i]) * static_cast<double>(scale[i]);
            sum1 += dyw;
            sum2 += dyw * static_cast<double>(xhm[i]);
        }
        double m1 = sum1 / static_cast<double>(h);
        double m2 = sum2 / static_cast<double>(h);
        double r = static_cast<double>(rstd[m]);
        for (int64_t i = 0; i < h; ++i) {
            double dyw = static_cast<double>(dym[i]) * static_cast<double>(scale[i]);
            dx[m * h + i] =
                static_cast<S>((dyw - m1 - static_cast<double>(xhm[i]) * m2) * r);
            dscale[i] += dym[i] * xhm[i];
            doffset[i] += dym[i];
        }
    }
}

// Inverted dropout in place; returns the keep mask so backward can replay it.
template <typename S>
std::vector<uint8_t> apply_dropout(S* data, int64_t n, double rate, uint64_t seed) {
    std::vector<uint8_t> mask(static_cast<size_t>(n));
    Rng rng(seed);
    S scale = static_cast<S>(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < n; ++i) {
        if (rng.uniform() < rate) {
            mask[i] = 0;
            data[i] = S(0);
        } else {
            mask[i] = 1;
            data[i] *= scale;
        }
    }
    return mask;
}

template <typename S>
void dropout_backward(S* grad, const std::vector<uint8_t>& mask, double rate) {
    if (mask.empty()) return;
    S scale = static_cast<S>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < mask.size(); ++i) grad[i] = mask[i] ? grad[i] * scale : S(0);
}

template <typename S>
struct LayerCache {
    std::vector<S> x_in;   // [B*T*H] layer input
    std::vector<S> q, k, v;
    std::vector<S> probs;  // [B*A*T*T] softmax output, before dropout
    std::vector<uint8_t> probs_keep;
    std::vector<S> ctx;    // [B*T*H] heads concatenated
    std::vector<uint8_t> attn_keep;
    std::vector<S> y1_hat, rstd1;
    std::vector<S> y1;     // [B*T*H] after first layer norm
    std::vector<S> f1;     // [B*T*F] before gelu
    std::vector<S> g;      // [B*T*F] after gelu
    std::vector<uint8_t> ffn_keep;
    std::vector<S> y2_hat, rstd2;
};

template <typename S>
struct Cache {
    int64_t B = 0;
    int64_t T = 0, H = 0, A = 0, D = 0, F = 0, V = 0;
    std::vector<int32_t> ids;     // [B*T]
    std::vector<uint8_t> att;     // [B*T]
    std::vector<S> x_hat0, rstd0;
    std::vector<uint8_t> emb_keep;
    std::vector<LayerCache<S>> layers;
    std::vector<S> hidden;  // [B*T*H] final encoder output
    std::vector<S> pooled;  // [B*H] tanh output (or CLS state when no pooler)
};

// Dropout stream ids: each site gets its own derived seed so draws never
// depend on which other sites ran.
constexpr uint64_t kEmbeddingDropoutSite = 0;
uint64_t probs_site(int64_t layer) { return 1 + 3 * static_cast<uint64_t>(layer); }
uint64_t attn_site(int64_t layer) { return 2 + 3 * static_cast<uint64_t>(layer); }
uint64_t ffn_site(int64_t layer) { return 3 + 3 * static_cast<uint64_t>(layer); }

template <typename S>
BatchOutput<S> run_model(const ModelParams<S>& params,
                         const std::vector<TokenSequence>& batch,
                         const ForwardOptions& options, Cache<S>& cache) {
    const ModelConfig& cfg = params.config;
    cfg.validate();
    if (batch.empty()) raise(ErrorCode::invalid_argument, "forward: empty batch");

    const int64_t B = static_cast<int64_t>(batch.size());
    const int64_t T = static_cast<int64_t>(batch[0].ids.size());
    const int64_t H = cfg.hidden_size;
    const int64_t A = cfg.num_heads;
    const int64_t D = cfg.head_size();
    const int64_t F = cfg.ffn_size;
    const int64_t V = cfg.vocab_size;
    if (T < 1 || T > cfg.max_positions)
        raise(ErrorCode::invalid_argument,
              "sequence length " + std::to_string(T) + " outside [1, " +
                  std::to_string(cfg.max_positions) + "]");

    cache.B = B;
    cache.T = T;
    cache.H = H;
    cache.A = A;
    cache.D = D;
    cache.F = F;
    cache.V = V;
    cache.ids.resize(B * T);
    cache.att.resize(B * T);
    for (int64_t b = 0; b < B; ++b) {
        const TokenSequence& seq = batch[b];
        if (static_cast<int64_t>(seq.ids.size()) != T ||
            static_cast<int64_t>(seq.attention_mask.size()) != T)
            raise(ErrorCode::invalid_argument, "ragged batch: all sequences must share max_len");
        int32_t attended = 0;
        for (int64_t t = 0; t < T; ++t) {
            int32_t id = seq.ids[t];
            if (id < 0 || id >= V)
                raise(ErrorCode::invalid_argument,
                      "token id " + std::to_string(id) + " outside vocabulary");
            uint8_t m = seq.attention_mask[t];
            if (m > 1) raise(ErrorCode::invalid_argument, "attention mask values must be 0 or 1");
            cache.ids[b * T + t] = id;
            cache.att[b * T + t] = m;
            attended += m;
        }
        if (attended == 0)
            raise(ErrorCode::invalid_argument, "sequence with no attended positions");
    }

    const bool train = options.mode == RunMode::train;
    const int64_t M = B * T;
    std::vector<S> scratch;

    // Embeddings + layer norm (+ dropout in train mode).
    std::vector<S> x(M * H);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < T; ++t) {
            const S* tok = params.token_embedding.data() + static_cast<int64_t>(cache.ids[b * T + t]) * H;
            const S* pos = params.position_embedding.data() + t * H;
            S* row = x.data() + (b * T + t) * H;
            for (int64_t h = 0; h < H; ++h) row[h] = tok[h] + pos[h];
            if (cfg.use_type_embeddings) {
                const S* type = params.type_embedding.data();  // single segment: row 0
                for (int64_t h = 0; h < H; ++h) row[h] += type[h];
            }
        }
    }
    cache.x_hat0.resize(M * H);
    cache.rstd0.resize(M);
    {
        std::vector<S> normed(M * H);
        layer_norm_forward(x.data(), M, H, params.embedding_ln_scale.data(),
                           params.embedding_ln_offset.data(), cfg.layer_norm_eps,
                           normed.data(), cache.x_hat0.data(), cache.rstd0.data());
        x.swap(normed);
    }
    cache.emb_keep.clear();
    if (train && cfg.dropout > 0.0)
        cache.emb_keep = apply_dropout(x.data(), M * H, cfg.dropout,
                                       mix_seed(options.seed, kEmbeddingDropoutSite));

    cache.layers.assign(cfg.num_layers, LayerCache<S>{});
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    for (int64_t l = 0; l < cfg.num_layers; ++l) {
        LayerCache<S>& C = cache.layers[l];
        const LayerParams<S>& P = params.layers[l];
        C.x_in = x;

        C.q.resize(M * H);
        C.k.resize(M * H);
        C.v.resize(M * H);
        linear_forward(C.x_in.data(), M, H, P.query_w.data(), P.query_b.data(), H,
                       C.q.data(), scratch);
        linear_forward(C.x_in.data(), M, H, P.key_w.data(), P.key_b.data(), H,
                       C.k.data(), scratch);
        linear_forward(C.x_in.data(), M, H, P.value_w.data(), P.value_b.data(), H,
                       C.v.data(), scratch);

        // Scaled dot-product attention; padding gets exactly zero probability.
        C.probs.assign(B * A * T * T, S(0));
        std::vector<double> row(T);
        for (int64_t b = 0; b < B; ++b) {
            const uint8_t* att = cache.att.data() + b * T;
            for (int64_t a = 0; a < A; ++a) {
                for (int64_t i = 0; i < T; ++i) {
                    const S* qi = C.q.data() + (b * T + i) * H + a * D;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int64_t j = 0; j < T; ++j) {
                        if (!att[j]) continue;
                        const S* kj = C.k.data() + (b * T + j) * H + a * D;
                        double dot = 0.0;
                        for (int64_t d = 0; d < D; ++d)
                            dot += static_cast<double>(qi[d]) * static_cast<double>(kj[d]);
                        row[j] = dot * inv_sqrt_d;
                        mx = std::max(mx, row[j]);
                    }
                    double sum = 0.0;
                    for (int64_t j = 0; j < T; ++j) {
                        if (!att[j]) continue;
                        row[j] = std::exp(row[j] - mx);
                        sum += row[j];
                    }
                    S* prow = C.probs.data() + ((b * A + a) * T + i) * T;
                    for (int64_t j = 0; j < T; ++j)
                        if (att[j]) prow[j] = static_cast<S>(row[j] / sum);
                }
            }
        }

        // Context: ctx[b,i,a,:] = sum_j dropped_probs[i,j] * v[b,j,a,:]
        std::vector<S> dropped = C.probs;
        C.probs_keep.clear();
        if (train && cfg.attention_dropout > 0.0)
            C.probs_keep = apply_dropout(dropped.data(), B * A * T * T,
                                         cfg.attention_dropout,
                                         mix_seed(options.seed, probs_site(l)));
        C.ctx.assign(M * H, S(0));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t a = 0; a < A; ++a) {
                const S* pblk = dropped.data() + (b * A + a) * T * T;
                for (int64_t i = 0; i < T; ++i) {
                    S* out = C.ctx.data() + (b * T + i) * H + a * D;
                    for (int64_t j = 0; j < T; ++j) {
                        S c = pblk[i * T + j];
                        if (c == S(0)) continue;
                        const S* vj = C.v.data() + (b * T + j) * H + a * D;
                        for (int64_t d = 0; d < D; ++d) out[d] += c * vj[d];
                    }
                }
            }
        }

        // Output projection, dropout, residual, layer norm.
        std::vector<S> attn_out(M * H);
        linear_forward(C.ctx.data(), M, H, P.output_w.data(), P.output_b.data(), H,
                       attn_out.data(), scratch);
        C.attn_keep.clear();
        if (train && cfg.dropout > 0.0)
            C.attn_keep = apply_dropout(attn_out.data(), M * H, cfg.dropout,
                                        mix_seed(options.seed, attn_site(l)));
        for (int64_t i = 0; i < M * H; ++i) attn_out[i] += C.x_in[i];
        C.y1_hat.resize(M * H);
        C.rstd1.resize(M);
        C.y1.resize(M * H);
        layer_norm_forward(attn_out.data(), M, H, P.ln1_scale.data(), P.ln1_offset.data(),
                           cfg.layer_norm_eps, C.y1.data(), C.y1_hat.data(),
                           C.rstd1.data());

        // Feed-forward, dropout, residual, layer norm.
        C.f1.resize(M * F);
        linear_forward(C.y1.data(), M, H, P.ffn1_w.data(), P.ffn1_b.data(), F,
                       C.f1.data(), scratch);
        C.g.resize(M * F);
        for (int64_t i = 0; i < M * F; ++i) C.g[i] = gelu(C.f1[i]);
        std::vector<S> f2(M * H);
        linear_forward(C.g.data(), M, F, P.ffn2_w.data(), P.ffn2_b.data(), H, f2.data(),
                       scratch);
        C.ffn_keep.clear();
        if (train && cfg.dropout > 0.0)
            C.ffn_keep = apply_dropout(f2.data(), M * H, cfg.dropout,
                                       mix_seed(options.seed, ffn_site(l)));
        for (int64_t i = 0; i < M * H; ++i) f2[i] += C.y1[i];
        C.y2_hat.resize(M * H);
        C.rstd2.resize(M);
        x.resize(M * H);
        layer_norm_forward(f2.data(), M, H, P.ln2_scale.data(), P.ln2_offset.data(),
                           cfg.layer_norm_eps, x.data(), C.y2_hat.data(),
                           C.rstd2.data());
    }

    cache.hidden = std::move(x);

    BatchOutput<S> out;
    out.batch = B;
    out.max_len = static_cast<int32_t>(T);
    out.vocab_size = static_cast<int32_t>(V);

    // Classifier head over the first position (through the pooler if present).
    std::vector<S> h0(B * H);
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(h0.data() + b * H, cache.hidden.data() + b * T * H, sizeof(S) * H);
    if (cfg.use_pooler) {
        cache.pooled.resize(B * H);
        linear_forward(h0.data(), B, H, params.pooler_w.data(), params.pooler_b.data(),
                       H, cache.pooled.data(), scratch);
        for (S& p : cache.pooled) p = static_cast<S>(std::tanh(static_cast<double>(p)));
    } else {
        cache.pooled = std::move(h0);
    }
    out.logits.resize(B * 2);
    linear_forward(cache.pooled.data(), B, H, params.classifier_w.data(),
                   params.classifier_b.data(), 2, out.logits.data(), scratch);

    if (options.want_mlm) {
        out.mlm_logits.resize(M * V);
        linear_forward(cache.hidden.data(), M, H, params.mlm_w.data(),
                       params.mlm_b.data(), V, out.mlm_logits.data(), scratch);
    }
    return out;
}

template <typename S>
int64_t count_mlm_positions(const std::vector<TokenSequence>& batch, int64_t T, int64_t V) {
    int64_t n = 0;
    for (const TokenSequence& seq : batch) {
        if (seq.mlm_labels.empty()) continue;
        if (static_cast<int64_t>(seq.mlm_labels.size()) != T)
            raise(ErrorCode::invalid_argument, "mlm_labels length differs from sequence length");
        for (int32_t lab : seq.mlm_labels) {
            if (lab == kMlmIgnore) continue;
            if (lab < 0 || lab >= V)
                raise(ErrorCode::invalid_argument, "mlm label outside vocabulary");
            ++n;
        }
    }
    return n;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) {
        raise(ErrorCode::invalid_argument, "model config: " + what);
    };
    if (num_layers < 0) fail("num_layers must be non-negative");
    if (hidden_size < 1) fail("hidden_size must be positive");
    if (num_heads < 1) fail("num_heads must be positive");
    if (hidden_size % num_heads != 0) fail("hidden_size must divide evenly into heads");
    if (ffn_size < 1) fail("ffn_size must be positive");
    if (max_positions < 1) fail("max_positions must be positive");
    if (vocab_size < Vocabulary::kNumSpecials)
        fail("vocab_size must cover the special tokens");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (!(attention_dropout >= 0.0 && attention_dropout < 1.0))
        fail("attention_dropout must be in [0, 1)");
    if (!(initializer_range > 0.0)) fail("initializer_range must be positive");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

template <typename S>
Tensor<S> Tensor<S>::zeros(std::vector<int64_t> shape) {
    Tensor<S> t;
    t.shape = std::move(shape);
    int64_t n = 1;
    for (int64_t d : t.shape) n *= d;
    t.v.assign(t.shape.empty() ? 0 : static_cast<size_t>(n), S(0));
    return t;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> ModelParams<S>::tensor_entries() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("position_embedding", &position_embedding);
    if (config.use_type_embeddings) out.emplace_back("type_embedding", &type_embedding);
    out.emplace_back("embedding_ln_scale", &embedding_ln_scale);
    out.emplace_back("embedding_ln_offset", &embedding_ln_offset);
    for (size_t l = 0; l < layers.size(); ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        LayerParams<S>& layer = layers[l];
        out.emplace_back(p + "query_w", &layer.query_w);
        out.emplace_back(p + "query_b", &layer.query_b);
        out.emplace_back(p + "key_w", &layer.key_w);
        out.emplace_back(p + "key_b", &layer.key_b);
        out.emplace_back(p + "value_w", &layer.value_w);
        out.emplace_back(p + "value_b", &layer.value_b);
        out.emplace_back(p + "output_w", &layer.output_w);
        out.emplace_back(p + "output_b", &layer.output_b);
        out.emplace_back(p + "ln1_scale", &layer.ln1_scale);
        out.emplace_back(p + "ln1_offset", &layer.ln1_offset);
        out.emplace_back(p + "ffn1_w", &layer.ffn1_w);
        out.emplace_back(p + "ffn1_b", &layer.ffn1_b);
        out.emplace_back(p + "ffn2_w", &layer.ffn2_w);
        out.emplace_back(p + "ffn2_b", &layer.ffn2_b);
        out.emplace_back(p + "ln2_scale", &layer.ln2_scale);
        out.emplace_back(p + "ln2_offset", &layer.ln2_offset);
    }
    if (config.use_pooler) {
        out.emplace_back("pooler_w", &pooler_w);
        out.emplace_back("pooler_b", &pooler_b);
    }
    out.emplace_back("classifier_w", &classifier_w);
    out.emplace_back("classifier_b", &classifier_b);
    out.emplace_back("mlm_w", &mlm_w);
    out.emplace_back("mlm_b", &mlm_b);
    return out;
}

template <typename S>
std::vector<std::pair<std::string, const Tensor<S>*>> ModelParams<S>::tensor_entries() const {
    auto mutable_entries = const_cast<ModelParams<S>*>(this)->tensor_entries();
    std::vector<std::pair<std::string, const Tensor<S>*>> out;
    out.reserve(mutable_entries.size());
    for (auto& [name, tensor] : mutable_entries) out.emplace_back(name, tensor);
    return out;
}

template <typename S>
bool ModelParams<S>::all_finite() const {
    for (const auto& [name, tensor] : tensor_entries())
        for (S value : tensor->v)
            if (!std::isfinite(static_cast<double>(value))) return false;
    return true;
}

namespace {

template <typename S>
ModelParams<S> alloc_params(const ModelConfig& config) {
    config.validate();
    const int64_t H = config.hidden_size;
    const int64_t F = config.ffn_size;
    const int64_t V = config.vocab_size;
    ModelParams<S> p;
    p.config = config;
    p.token_embedding = Tensor<S>::zeros({V, H});
    p.position_embedding = Tensor<S>::zeros({config.max_positions, H});
    if (config.use_type_embeddings) p.type_embedding = Tensor<S>::zeros({2, H});
    p.embedding_ln_scale = Tensor<S>::zeros({H});
    p.embedding_ln_offset = Tensor<S>::zeros({H});
    p.layers.resize(config.num_layers);
    for (auto& layer : p.layers) {
        layer.query_w = Tensor<S>::zeros({H, H});
        layer.query_b = Tensor<S>::zeros({H});
        layer.key_w = Tensor<S>::zeros({H, H});
        layer.key_b = Tensor<S>::zeros({H});
        layer.value_w = Tensor<S>::zeros({H, H});
        layer.value_b = Tensor<S>::zeros({H});
        layer.output_w = Tensor<S>::zeros({H, H});
        layer.output_b = Tensor<S>::zeros({H});
        layer.ln1_scale = Tensor<S>::zeros({H});
        layer.ln1_offset = Tensor<S>::zeros({H});
        layer.ffn1_w = Tensor<S>::zeros({F, H});
        layer.ffn1_b = Tensor<S>::zeros({F});
        layer.ffn2_w = Tensor<S>::zeros({H, F});
        layer.ffn2_b = Tensor<S>::zeros({H});
        layer.ln2_scale = Tensor<S>::zeros({H});
        layer.ln2_offset = Tensor<S>::zeros({H});
    }
    if (config.use_pooler) {
        p.pooler_w = Tensor<S>::zeros({H, H});
        p.pooler_b = Tensor<S>::zeros({H});
    }
    p.classifier_w = Tensor<S>::zeros({2, H});
    p.classifier_b = Tensor<S>::zeros({2});
    p.mlm_w = Tensor<S>::zeros({V, H});
    p.mlm_b = Tensor<S>::zeros({V});
    return p;
}

bool ends_with(const std::string& s, const char* suffix) {
    size_t n = std::strlen(suffix);
    return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

}  // namespace

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& params) {
    return alloc_params<S>(params.config);
}

template <typename S>
ModelParams<S> init_params(const ModelConfig& config, uint64_t seed) {
    ModelParams<S> p = alloc_params<S>(config);
    Rng rng(seed);
    for (auto& [name, tensor] : p.tensor_entries()) {
        if (ends_with(name, "_scale")) {
            std::fill(tensor->v.begin(), tensor->v.end(), S(1));
        } else if (ends_with(name, "_offset") || ends_with(name, "_b")) {
            // stays zero
        } else {
            for (S& value : tensor->v)
                value = static_cast<S>(rng.gaussian(0.0, config.initializer_range));
        }
    }
    return p;
}

template <typename S>
BatchOutput<S> forward(const ModelParams<S>& params,
                       const std::vector<TokenSequence>& batch,
                       const ForwardOptions& options) {
    Cache<S> cache;
    return run_model(params, batch, options, cache);
}

template <typename S>
LossResult classification_loss(const BatchOutput<S>& out, const std::vector<Label>& labels) {
    if (static_cast<int64_t>(labels.size()) != out.batch)
        raise(ErrorCode::invalid_argument, "labels do not match batch size");
    if (out.batch == 0) raise(ErrorCode::invalid_argument, "empty batch");
    double total = 0.0;
    for (int64_t b = 0; b < out.batch; ++b) {
        double l0 = static_cast<double>(out.logits[b * 2]);
        double l1 = static_cast<double>(out.logits[b * 2 + 1]);
        double mx = std::max(l0, l1);
        double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
        double picked = labels[b] == Label::phish ? l1 : l0;
        total += lse - picked;
    }
    return LossResult{total / static_cast<double>(out.batch), false};
}

template <typename S>
LossResult mlm_loss(const BatchOutput<S>& out, const std::vector<TokenSequence>& batch) {
    if (static_cast<int64_t>(batch.size()) != out.batch)
        raise(ErrorCode::invalid_argument, "batch does not match forward output");
    if (out.mlm_logits.empty())
        raise(ErrorCode::invalid_argument, "forward ran without mlm logits");
    const int64_t T = out.max_len;
    const int64_t V = out.vocab_size;
    int64_t n = count_mlm_positions<S>(batch, T, V);
    if (n == 0) return LossResult{0.0, true};

    double total = 0.0;
    for (int64_t b = 0; b < out.batch; ++b) {
        if (batch[b].mlm_labels.empty()) continue;
        for (int64_t t = 0; t < T; ++t) {
            int32_t lab = batch[b].mlm_labels[t];
            if (lab == kMlmIgnore) continue;
            const S* row = out.mlm_logits.data() + (b * T + t) * V;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
            double sum = 0.0;
            for (int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
            total += mx + std::log(sum) - static_cast<double>(row[lab]);
        }
    }
    return LossResult{total / static_cast<double>(n), false};
}

template <typename S>
BackwardResult<S> backward(const ModelParams<S>& params,
                           const std::vector<TokenSequence>& batch,
                           const std::vector<Label>& labels, LossKind kind,
                           const ForwardOptions& options) {
    if (kind == LossKind::mlm && !options.want_mlm)
        raise(ErrorCode::invalid_argument, "mlm loss requires mlm logits");

    Cache<S> cache;
    BackwardResult<S> result;
    result.output = run_model(params, batch, options, cache);
    result.grads = zeros_like(params);

    const ModelConfig& cfg = params.config;
    const int64_t B = cache.B, T = cache.T, H = cache.H, A = cache.A, D = cache.D,
                  F = cache.F, V = cache.V;
    const int64_t M = B * T;
    Gradients<S>& G = result.grads;
    std::vector<S> dh(M * H, S(0));

    if (kind == LossKind::mlm) {
        result.loss = mlm_loss(result.output, batch);
        if (!result.loss.empty_mask) {
            const int64_t n = count_mlm_positions<S>(batch, T, V);
            std::vector<double> drow(V);
            for (int64_t b = 0; b < B; ++b) {
                if (batch[b].mlm_labels.empty()) continue;
                for (int64_t t = 0; t < T; ++t) {
                    int32_t lab = batch[b].mlm_labels[t];
                    if (lab == kMlmIgnore) continue;
                    const int64_t pos = b * T + t;
                    const S* row = result.output.mlm_logits.data() + pos * V;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int64_t v = 0; v < V; ++v)
                        mx = std::max(mx, static_cast<double>(row[v]));
                    double sum = 0.0;
                    for (int64_t v = 0; v < V; ++v) {
                        drow[v] = std::exp(static_cast<double>(row[v]) - mx);
                        sum += drow[v];
                    }
                    const S* hrow = cache.hidden.data() + pos * H;
                    S* dhrow = dh.data() + pos * H;
                    for (int64_t v = 0; v < V; ++v) {
                        double g = (drow[v] / sum - (v == lab ? 1.0 : 0.0)) /
                                   static_cast<double>(n);
                        if (g == 0.0) continue;
                        S gs = static_cast<S>(g);
                        G.mlm_b.v[v] += gs;
                        S* dwrow = G.mlm_w.v.data() + v * H;
                        const S* wrow = params.mlm_w.data() + v * H;
                        for (int64_t h = 0; h < H; ++h) {
                            dwrow[h] += gs * hrow[h];
                            dhrow[h] += gs * wrow[h];
                        }
                    }
                }
            }
        }
    } else {
        result.loss = classification_loss(result.output, labels);
        std::vector<S> dlogits(B * 2);
        for (int64_t b = 0; b < B; ++b) {
            double l0 = static_cast<double>(result.output.logits[b * 2]);
            double l1 = static_cast<double>(result.output.logits[b * 2 + 1]);
            double mx = std::max(l0, l1);
            double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
            double p1 = e1 / (e0 + e1);
            double y1 = labels[b] == Label::phish ? 1.0 : 0.0;
            dlogits[b * 2] = static_cast<S>(((1.0 - p1) - (1.0 - y1)) / static_cast<double>(B));
            dlogits[b * 2 + 1] = static_cast<S>((p1 - y1) / static_cast<double>(B));
        }
        std::vector<S> dpooled(B * H, S(0));
        linear_dx(dlogits.data(), B, 2, params.classifier_w.data(), H, dpooled.data());
        linear_dw_db(dlogits.data(), cache.pooled.data(), B, 2, H,
                     G.classifier_w.v.data(), G.classifier_b.v.data());
        if (cfg.use_pooler) {
            std::vector<S> dpre(B * H);
            for (int64_t i = 0; i < B * H; ++i) {
                S p = cache.pooled[i];
                dpre[i] = dpooled[i] * (S(1) - p * p);
            }
            std::vector<S> h0(B * H);
            for (int64_t b = 0; b < B; ++b)
                std::memcpy(h0.data() + b * H, cache.hidden.data() + b * T * H,
                            sizeof(S) * H);
            std::vector<S> dh0(B * H, S(0));
            linear_dx(dpre.data(), B, H, params.pooler_w.data(), H, dh0.data());
            linear_dw_db(dpre.data(), h0.data(), B, H, H, G.pooler_w.v.data(),
                         G.pooler_b.v.data());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < H; ++h) dh[b * T * H + h] += dh0[b * H + h];
        } else {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < H; ++h) dh[b * T * H + h] += dpooled[b * H + h];
        }
    }

    // Walk the layers in reverse.
    std::vector<S> dy = std::move(dh);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
    for (int64_t l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerCache<S>& C = cache.layers[l];
        const LayerParams<S>& P = params.layers[l];
        LayerParams<S>& LG = G.layers[l];

        // Second layer norm (after FFN residual).
        std::vector<S> dr2(M * H);
        layer_norm_backward(dy.data(), C.y2_hat.data(), C.rstd2.data(),
                            P.ln2_scale.data(), M, H, dr2.data(),
                            LG.ln2_scale.v.data(), LG.ln2_offset.v.data());

        std::vector<S> df2 = dr2;  // residual also flows to y1 below
        dropout_backward(df2.data(), C.ffn_keep, cfg.dropout);

        std::vector<S> dg(M * F, S(0));
        linear_dx(df2.data(), M, H, P.ffn2_w.data(), F, dg.data());
        linear_dw_db(df2.data(), C.g.data(), M, H, F, LG.ffn2_w.v.data(),
                     LG.ffn2_b.v.data());

        std::vector<S> df1(M * F);
        for (int64_t i = 0; i < M * F; ++i) df1[i] = dg[i] * gelu_grad(C.f1[i]);

        std::vector<S> dy1 = dr2;  // residual path
        linear_dx(df1.data(), M, F, P.ffn1_w.data(), H, dy1.data());
        linear_dw_db(df1.data(), C.y1.data(), M, F, H, LG.ffn1_w.v.data(),
                     LG.ffn1_b.v.data());

        // First layer norm (after attention residual).
        std::vector<S> dr1(M * H);
        layer_norm_backward(dy1.data(), C.y1_hat.data(), C.rstd1.data(),
                            P.ln1_scale.data(), M, H, dr1.data(),
                            LG.ln1_scale.v.data(), LG.ln1_offset.v.data());

        std::vector<S> dx_in = dr1;  // residual path
        std::vector<S> da = dr1;
        dropout_backward(da.data(), C.attn_keep, cfg.dropout);

        std::vector<S> dctx(M * H, S(0));
        linear_dx(da.data(), M, H, P.output_w.data(), H, dctx.data());
        linear_dw_db(da.data(), C.ctx.data(), M, H, H, LG.output_w.v.data(),
                     LG.output_b.v.data());

        // Attention core.
        std::vector<S> dq(M * H, S(0)), dk(M * H, S(0)), dv(M * H, S(0));
        const double keep_scale =
            cfg.attention_dropout > 0.0 ? 1.0 / (1.0 - cfg.attention_dropout) : 1.0;
        std::vector<double> dp(T), ds(T);
        for (int64_t b = 0; b < B; ++b) {
            const uint8_t* att = cache.att.data() + b * T;
            for (int64_t a = 0; a < A; ++a) {
                const S* pblk = C.probs.data() + (b * A + a) * T * T;
                const uint8_t* keep =
                    C.probs_keep.empty() ? nullptr
                                         : C.probs_keep.data() + (b * A + a) * T * T;
                for (int64_t i = 0; i < T; ++i) {
                    const S* prow = pblk + i * T;
                    const S* dctxi = dctx.data() + (b * T + i) * H + a * D;
                    // dpd -> dp (undo dropout), dv accumulation
                    double rowdot = 0.0;
                    for (int64_t j = 0; j < T; ++j) {
                        if (!att[j]) {
                            dp[j] = 0.0;
                            continue;
                        }
                        double pd = static_cast<double>(prow[j]);
                        double keep_factor =
                            keep ? (keep[i * T + j] ? keep_scale : 0.0) : 1.0;
                        double dpd = 0.0;
                        const S* vrow = C.v.data() + (b * T + j) * H + a * D;
                        for (int64_t d = 0; d < D; ++d)
                            dpd += static_cast<double>(dctxi[d]) *
                                   static_cast<double>(vrow[d]);
                        // ctx used dropped probs: pd * keep_factor
                        if (keep_factor != 0.0 && pd != 0.0) {
                            S* dvrow = dv.data() + (b * T + j) * H + a * D;
                            S coeff = static_cast<S>(pd * keep_factor);
                            for (int64_t d = 0; d < D; ++d)
                                dvrow[d] += coeff * dctxi[d];
                        }
                        dp[j] = dpd * keep_factor;
                        rowdot += dp[j] * pd;
                    }
                    // softmax jacobian, then dq/dk
                    const S* qi = C.q.data() + (b * T + i) * H + a * D;
                    S* dqi = dq.data() + (b * T + i) * H + a * D;
                    for (int64_t j = 0; j < T; ++j) {
                        if (!att[j]) continue;
                        double pj = static_cast<double>(prow[j]);
                        ds[j] = pj * (dp[j] - rowdot);
                        if (ds[j] == 0.0) continue;
                        double coeff = ds[j] * inv_sqrt_d;
                        const S* kj = C.k.data() + (b * T + j) * H + a * D;
                        S* dkj = dk.data() + (b * T + j) * H + a * D;
                        for (int64_t d = 0; d < D; ++d) {
                            dqi[d] += static_cast<S>(coeff * static_cast<double>(kj[d]));
                            dkj[d] += static_cast<S>(coeff * static_cast<double>(qi[d]));
                        }
                    }
                }
            }
        }

        linear_dx(dq.data(), M, H, P.query_w.data(), H, dx_in.data());
        linear_dw_db(dq.data(), C.x_in.data(), M, H, H, LG.query_w.v.data(),
                     LG.query_b.v.data());
        linear_dx(dk.data(), M, H, P.key_w.data(), H, dx_in.data());
        linear_dw_db(dk.data(), C.x_in.data(), M, H, H, LG.key_w.v.data(),
                     LG.key_b.v.data());
        linear_dx(dv.data(), M, H, P.value_w.data(), H, dx_in.data());
        linear_dw_db(dv.data(), C.x_in.data(), M, H, H, LG.value_w.v.data(),
                     LG.value_b.v.data());

        dy = std::move(dx_in);
    }

    // Embedding dropout, layer norm, then scatter into the embedding tables.
    dropout_backward(dy.data(), cache.emb_keep, cfg.dropout);
    std::vector<S> demb(M * H);
    layer_norm_backward(dy.data(), cache.x_hat0.data(), cache.rstd0.data(),
                        params.embedding_ln_scale.data(), M, H, demb.data(),
                        G.embedding_ln_scale.v.data(), G.embedding_ln_offset.v.data());
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < T; ++t) {
            const S* row = demb.data() + (b * T + t) * H;
            S* tok = G.token_embedding.v.data() +
                     static_cast<int64_t>(cache.ids[b * T + t]) * H;
            S* pos = G.position_embedding.v.data() + t * H;
            for (int64_t h = 0; h < H; ++h) {
                tok[h] += row[h];
                pos[h] += row[h];
            }
            if (cfg.use_type_embeddings) {
                S* type = G.type_embedding.v.data();
                for (int64_t h = 0; h < H; ++h) type[h] += row[h];
            }
        }
    }
    return result;
}

namespace {

void append_le_f32(std::string& blob, float value) {
    uint32_t bits = std::bit_cast<uint32_t>(value);
    blob.push_back(static_cast<char>(bits & 0xFF));
    blob.push_back(static_cast<char>((bits >> 8) & 0xFF));
    blob.push_back(static_cast<char>((bits >> 16) & 0xFF));
    blob.push_back(static_cast<char>((bits >> 24) & 0xFF));
}

float read_le_f32(const char* p) {
    uint32_t bits = static_cast<uint32_t>(static_cast<unsigned char>(p[0])) |
                    static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8 |
                    static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16 |
                    static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24;
    return std::bit_cast<float>(bits);
}

json config_to_json(const ModelConfig& c) {
    json j;
    j["num_layers"] = c.num_layers;
    j["hidden_size"] = c.hidden_size;
    j["ffn_size"] = c.ffn_size;
    j["num_heads"] = c.num_heads;
    j["max_positions"] = c.max_positions;
    j["vocab_size"] = c.vocab_size;
    j["dropout"] = c.dropout;
    j["attention_dropout"] = c.attention_dropout;
    j["initializer_range"] = c.initializer_range;
    j["layer_norm_eps"] = c.layer_norm_eps;
    j["use_pooler"] = c.use_pooler;
    j["use_type_embeddings"] = c.use_type_embeddings;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int32_t>();
    c.hidden_size = j.at("hidden_size").get<int32_t>();
    c.ffn_size = j.at("ffn_size").get<int32_t>();
    c.num_heads = j.at("num_heads").get<int32_t>();
    c.max_positions = j.at("max_positions").get<int32_t>();
    c.vocab_size = j.at("vocab_size").get<int32_t>();
    c.dropout = j.at("dropout").get<double>();
    c.attention_dropout = j.at("attention_dropout").get<double>();
    c.initializer_range = j.at("initializer_range").get<double>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.use_pooler = j.at("use_pooler").get<bool>();
    c.use_type_embeddings = j.at("use_type_embeddings").get<bool>();
    return c;
}

fs::path blob_path_for(const fs::path& manifest_path) {
    fs::path blob = manifest_path;
    blob.replace_extension(".bin");
    return blob;
}

}  // namespace

template <typename S>
void save_checkpoint(const ModelParams<S>& params, const std::string& path) {
    params.config.validate();
    fs::path manifest_path(path);
    fs::path blob_path = blob_path_for(manifest_path);

    json manifest;
    manifest["format"] = "urltran-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = config_to_json(params.config);
    manifest["blob"] = blob_path.filename().string();

    std::string blob;
    json tensors = json::array();
    int64_t offset = 0;
    for (const auto& [name, tensor] : params.tensor_entries()) {
        json entry;
        entry["name"] = name;
        entry["shape"] = tensor->shape;
        entry["dtype"] = "f32";
        entry["offset"] = offset;
        tensors.push_back(std::move(entry));
        for (S value : tensor->v) append_le_f32(blob, static_cast<float>(value));
        offset += tensor->numel() * 4;
    }
    manifest["tensors"] = std::move(tensors);

    std::ofstream mout(manifest_path, std::ios::binary | std::ios::trunc);
    if (!mout) raise(ErrorCode::io, "cannot write checkpoint \"" + path + "\"");
    mout << manifest.dump(2) << '\n';
    std::ofstream bout(blob_path, std::ios::binary | std::ios::trunc);
    if (!bout) raise(ErrorCode::io, "cannot write checkpoint blob \"" + blob_path.string() + "\"");
    bout.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!mout || !bout) raise(ErrorCode::io, "checkpoint write failed for \"" + path + "\"");
}

template <typename S>
ModelParams<S> load_checkpoint(const std::string& path) {
    std::ifstream min(path, std::ios::binary);
    if (!min) raise(ErrorCode::io, "cannot open checkpoint \"" + path + "\"");
    json manifest;
    try {
        min >> manifest;
    } catch (const json::exception& e) {
        raise(ErrorCode::parse, path + ": " + e.what());
    }

    ModelParams<S> params;
    std::string blob_name;
    try {
        if (manifest.at("format").get<std::string>() != "urltran-checkpoint")
            raise(ErrorCode::schema_mismatch, path + ": not a checkpoint manifest");
        if (manifest.at("version").get<int>() != 1)
            raise(ErrorCode::schema_mismatch, path + ": unsupported checkpoint version");
        params = alloc_params<S>(config_from_json(manifest.at("config")));
        blob_name = manifest.at("blob").get<std::string>();
    } catch (const json::exception& e) {
        raise(ErrorCode::schema_mismatch, path + ": " + e.what());
    }

    fs::path blob_path = fs::path(path).parent_path() / blob_name;
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) raise(ErrorCode::io, "cannot open checkpoint blob \"" + blob_path.string() + "\"");
    std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    auto entries = params.tensor_entries();
    const json& tensors = manifest.at("tensors");
    if (tensors.size() != entries.size())
        raise(ErrorCode::schema_mismatch,
              path + ": expected " + std::to_string(entries.size()) + " tensors, found " +
                  std::to_string(tensors.size()));
    int64_t offset = 0;
    for (size_t i = 0; i < entries.size(); ++i) {
        auto& [name, tensor] = entries[i];
        const json& entry = tensors[i];
        try {
            if (entry.at("name").get<std::string>() != name)
                raise(ErrorCode::schema_mismatch,
                      path + ": tensor " + std::to_string(i) + " is \"" +
                          entry.at("name").get<std::string>() + "\", expected \"" + name +
                          "\"");
            if (entry.at("shape").get<std::vector<int64_t>>() != tensor->shape)
                raise(ErrorCode::schema_mismatch, path + ": shape mismatch for " + name);
            if (entry.at("dtype").get<std::string>() != "f32")
                raise(ErrorCode::schema_mismatch, path + ": unsupported dtype for " + name);
            if (entry.at("offset").get<int64_t>() != offset)
                raise(ErrorCode::schema_mismatch, path + ": offset mismatch for " + name);
        } catch (const json::exception& e) {
            raise(ErrorCode::schema_mismatch, path + ": " + e.what());
        }
        int64_t bytes = tensor->numel() * 4;
        if (offset + bytes > static_cast<int64_t>(blob.size()))
            raise(ErrorCode::schema_mismatch, path + ": blob too small for " + name);
        for (int64_t k = 0; k < tensor->numel(); ++k)
            tensor->v[k] = static_cast<S>(read_le_f32(blob.data() + offset + k * 4));
        offset += bytes;
    }
    if (offset != static_cast<int64_t>(blob.size()))
        raise(ErrorCode::schema_mismatch, path + ": blob has trailing bytes");
    return params;
}

template struct Tensor<float>;
template struct Tensor<double>;
template struct ModelParams<float>;
template struct ModelParams<double>;

template ModelParams<float> zeros_like(const ModelParams<float>&);
template ModelParams<double> zeros_like(const ModelParams<double>&);
template ModelParams<float> init_params(const ModelConfig&, uint64_t);
template ModelParams<double> init_params(const ModelConfig&, uint64_t);
template BatchOutput<float> forward(const ModelParams<float>&,
                                    const std::vector<TokenSequence>&,
                                    const ForwardOptions&);
template BatchOutput<double> forward(const ModelParams<double>&,
                                     const std::vector<TokenSequence>&,
                                     const ForwardOptions&);
template LossResult classification_loss(const BatchOutput<float>&, const std::vector<Label>&);
template LossResult classification_loss(const BatchOutput<double>&, const std::vector<Label>&);
template LossResult mlm_loss(const BatchOutput<float>&, const std::vector<TokenSequence>&);
template LossResult mlm_loss(const BatchOutput<double>&, const std::vector<TokenSequence>&);
template BackwardResult<float> backward(const ModelParams<float>&,
                                        const std::vector<TokenSequence>&,
                                        const std::vector<Label>&, LossKind,
                                        const ForwardOptions&);
template BackwardResult<double> backward(const ModelParams<double>&,
                                         const std::vector<TokenSequence>&,
                                         const std::vector<Label>&, LossKind,
                                         const ForwardOptions&);
template void save_checkpoint(const ModelParams<float>&, const std::string&);
template void save_checkpoint(const ModelParams<double>&, const std::string&);
template ModelParams<float> load_checkpoint(const std::string&);
template ModelParams<double> load_checkpoint(const std::string&);

}  // namespace urltran
