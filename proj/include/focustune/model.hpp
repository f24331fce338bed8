#pragma once

// Decoder-only transformer with causal / sliding-window attention, LoRA
// adapters on the attention projections and a learnable contrastive
// temperature. Forward and backward passes are written out by hand in double
// precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/rng.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

enum class Proj : int { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::array<const char*, 4> kProjNames = {"q", "k", "v", "o"};

struct LoraConfig {
    int rank = 4;
    double alpha = 8.0;
    std::array<bool, 4> targets{true, true, true, true};

    double scale() const noexcept { return alpha / static_cast<double>(rank); }
};

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int max_len = 512;
    int ffn_mult = 4;
    std::optional<int> window; // sliding-window width; nullopt = full causal
    std::optional<LoraConfig> lora;
    double tau0 = 0.07;
    double init_std = 0.02;
    TokenId eos_id = -1;
    std::uint64_t seed = 0;

    int head_dim() const noexcept { return d_model / n_heads; }
    int ffn_dim() const noexcept { return ffn_mult * d_model; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_len < 1 || ffn_mult < 1) {
            throw UsageError("model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw UsageError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                             std::to_string(n_heads) + ")");
        }
        if (window && (*window < 1 || *window > max_len)) {
            throw UsageError("window must lie in [1, max_len]");
        }
        if (lora && lora->rank < 1) {
            throw UsageError("LoRA rank must be at least 1");
        }
        if (!(tau0 > 0.0)) {
            throw UsageError("tau0 must be positive");
        }
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json j{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"max_len", c.max_len},   {"ffn_mult", c.ffn_mult},
                     {"tau0", c.tau0},             {"init_std", c.init_std}, {"eos_id", c.eos_id},
                     {"seed", c.seed}};
    j["window"] = c.window ? nlohmann::json(*c.window) : nlohmann::json(nullptr);
    if (c.lora) {
        j["lora"] = {{"rank", c.lora->rank}, {"alpha", c.lora->alpha}, {"targets", c.lora->targets}};
    } else {
        j["lora"] = nullptr;
    }
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.max_len = j.at("max_len").get<int>();
        c.ffn_mult = j.at("ffn_mult").get<int>();
        c.tau0 = j.at("tau0").get<double>();
        c.init_std = j.at("init_std").get<double>();
        c.eos_id = j.at("eos_id").get<TokenId>();
        c.seed = j.at("seed").get<std::uint64_t>();
        if (!j.at("window").is_null()) {
            c.window = j["window"].get<int>();
        }
        if (!j.at("lora").is_null()) {
            LoraConfig l;
            l.rank = j["lora"].at("rank").get<int>();
            l.alpha = j["lora"].at("alpha").get<double>();
            l.targets = j["lora"].at("targets").get<std::array<bool, 4>>();
            c.lora = l;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ----------------------------------------------------------------------------
// Parameters

struct LoraPair {
    Mat a; // rank x d_in
    Mat b; // d_out x rank, zero at init
};

struct LayerParams {
    Mat ln1_g, ln1_b;
    Mat wq, wk, wv, wo; // d_out x d_in, applied as x * W^T
    std::array<std::optional<LoraPair>, 4> lora;
    Mat ln2_g, ln2_b;
    Mat w1, b1; // ffn x d, 1 x ffn
    Mat w2, b2; // d x ffn, 1 x d

    const Mat& proj(Proj p) const {
        switch (p) {
        case Proj::q: return wq;
        case Proj::k: return wk;
        case Proj::v: return wv;
        case Proj::o: return wo;
        }
        return wq;
    }
    Mat& proj(Proj p) { return const_cast<Mat&>(static_cast<const LayerParams&>(*this).proj(p)); }
};

struct ModelParams {
    ModelConfig config;
    Mat tok_emb; // vocab x d
    Mat pos_emb; // max_len x d
    std::vector<LayerParams> layers;
    Mat lnf_g, lnf_b;
    Mat head;        // vocab x d
    Mat log_inv_tau; // 1 x 1, contrastive logit scale log(1/tau)
};

/// Which tensors a parameter belongs to; decides trainability under LoRA.
enum class ParamGroup { embedding, norm, attention, lora, ffn, head, temperature };

template <class Params>
struct ParamRefT {
    using MatPtr = std::conditional_t<std::is_const_v<Params>, const Mat*, Mat*>;
    std::string name;
    MatPtr value;
    ParamGroup group;
};

using ParamRef = ParamRefT<ModelParams>;
using ConstParamRef = ParamRefT<const ModelParams>;

/// Every tensor with a stable name, in a fixed order.
template <class Params>
std::vector<ParamRefT<Params>> parameter_refs(Params& p) {
    std::vector<ParamRefT<Params>> refs;
    refs.push_back({"tok_emb", &p.tok_emb, ParamGroup::embedding});
    refs.push_back({"pos_emb", &p.pos_emb, ParamGroup::embedding});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& layer = p.layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        refs.push_back({prefix + "ln1.g", &layer.ln1_g, ParamGroup::norm});
        refs.push_back({prefix + "ln1.b", &layer.ln1_b, ParamGroup::norm});
        refs.push_back({prefix + "attn.wq", &layer.wq, ParamGroup::attention});
        refs.push_back({prefix + "attn.wk", &layer.wk, ParamGroup::attention});
        refs.push_back({prefix + "attn.wv", &layer.wv, ParamGroup::attention});
        refs.push_back({prefix + "attn.wo", &layer.wo, ParamGroup::attention});
        for (std::size_t t = 0; t < 4; ++t) {
            if (layer.lora[t]) {
                const std::string lp = prefix + "attn." + kProjNames[t] + ".lora_";
                refs.push_back({lp + "a", &layer.lora[t]->a, ParamGroup::lora});
                refs.push_back({lp + "b", &layer.lora[t]->b, ParamGroup::lora});
            }
        }
        refs.push_back({prefix + "ln2.g", &layer.ln2_g, ParamGroup::norm});
        refs.push_back({prefix + "ln2.b", &layer.ln2_b, ParamGroup::norm});
        refs.push_back({prefix + "ffn.w1", &layer.w1, ParamGroup::ffn});
        refs.push_back({prefix + "ffn.b1", &layer.b1, ParamGroup::ffn});
        refs.push_back({prefix + "ffn.w2", &layer.w2, ParamGroup::ffn});
        refs.push_back({prefix + "ffn.b2", &layer.b2, ParamGroup::ffn});
    }
    refs.push_back({"lnf.g", &p.lnf_g, ParamGroup::norm});
    refs.push_back({"lnf.b", &p.lnf_b, ParamGroup::norm});
    refs.push_back({"head", &p.head, ParamGroup::head});
    refs.push_back({"log_inv_tau", &p.log_inv_tau, ParamGroup::temperature});
    return refs;
}

/// With LoRA enabled only adapters, embeddings, norms and the temperature train.
inline bool is_trainable(ParamGroup group, bool lora_enabled) noexcept {
    if (!lora_enabled) {
        return true;
    }
    return group == ParamGroup::lora || group == ParamGroup::embedding || group == ParamGroup::norm ||
           group == ParamGroup::temperature;
}

inline std::vector<bool> trainable_mask(const ModelParams& p) {
    std::vector<bool> mask;
    for (const auto& r : parameter_refs(p)) {
        mask.push_back(is_trainable(r.group, p.config.lora.has_value()));
    }
    return mask;
}

inline std::size_t parameter_count(const ModelParams& p) {
    std::size_t n = 0;
    for (const auto& r : parameter_refs(p)) {
        n += static_cast<std::size_t>(r.value->size());
    }
    return n;
}

inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    for (auto& r : parameter_refs(z)) {
        r.value->setZero();
    }
    return z;
}

/// Temperature bounds; the stored log(1/tau) is clamped to keep tau inside.
inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 10.0;

inline double tau_of(const ModelParams& p) { return std::exp(-p.log_inv_tau(0, 0)); }

inline void clamp_temperature(ModelParams& p) {
    const double lo = std::log(1.0 / kTauMax);
    const double hi = std::log(1.0 / kTauMin);
    p.log_inv_tau(0, 0) = std::clamp(p.log_inv_tau(0, 0), lo, hi);
}

namespace detail {

inline Mat random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.normal(0.0, stddev);
    }
    return m;
}

} // namespace detail

/// Seeded initialization. Base tensors are drawn before any LoRA tensor, so a
/// config with and without LoRA yields identical base weights; LoRA B is zero.
inline ModelParams init_params(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    const Eigen::Index d = config.d_model;
    const Eigen::Index f = config.ffn_dim();
    const double std = config.init_std;
    const double resid_std = std / std::sqrt(2.0 * config.n_layers);

    ModelParams p;
    p.config = config;
    p.tok_emb = detail::random_matrix(rng, config.vocab_size, d, std);
    p.pos_emb = detail::random_matrix(rng, config.max_len, d, std);
    p.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& layer : p.layers) {
        layer.ln1_g = Mat::Ones(1, d);
        layer.ln1_b = Mat::Zero(1, d);
        layer.wq = detail::random_matrix(rng, d, d, std);
        layer.wk = detail::random_matrix(rng, d, d, std);
        layer.wv = detail::random_matrix(rng, d, d, std);
        layer.wo = detail::random_matrix(rng, d, d, resid_std);
        layer.ln2_g = Mat::Ones(1, d);
        layer.ln2_b = Mat::Zero(1, d);
        layer.w1 = detail::random_matrix(rng, f, d, std);
        layer.b1 = Mat::Zero(1, f);
        layer.w2 = detail::random_matrix(rng, d, f, resid_std);
        layer.b2 = Mat::Zero(1, d);
    }
    p.lnf_g = Mat::Ones(1, d);
    p.lnf_b = Mat::Zero(1, d);
    p.head = detail::random_matrix(rng, config.vocab_size, d, std);
    p.log_inv_tau = Mat::Constant(1, 1, std::log(1.0 / config.tau0));
    if (config.lora) {
        const Eigen::Index r = config.lora->rank;
        for (auto& layer : p.layers) {
            for (std::size_t t = 0; t < 4; ++t) {
                if (config.lora->targets[t]) {
                    layer.lora[t] = LoraPair{detail::random_matrix(rng, r, d, 1.0 / std::sqrt(double(d))),
                                             Mat::Zero(d, r)};
                }
            }
        }
    }
    return p;
}

/// W + (alpha / r) * B * A
inline Mat effective_weight(const Mat& w, const LoraPair& lora, double alpha, int rank) {
    if (lora.b.rows() != w.rows() || lora.a.cols() != w.cols() || lora.b.cols() != lora.a.rows() ||
        lora.a.rows() != rank) {
        throw UsageError("LoRA shapes do not conform to the base weight");
    }
    return w + (alpha / static_cast<double>(rank)) * (lora.b * lora.a);
}

// ----------------------------------------------------------------------------
// Forward / backward

inline constexpr double kLayerNormEps = 1e-5;

inline bool attention_allowed(std::size_t i, std::size_t j, std::optional<int> window) noexcept {
    if (j > i) {
        return false;
    }
    return !window || i - j < static_cast<std::size_t>(*window);
}

/// True iff position j can influence position i (i >= j) through n_layers
/// windowed attention hops; without a window every earlier position is reachable.
inline bool reachability(int window, int n_layers, std::size_t length, std::size_t i, std::size_t j) {
    if (i < j || i >= length) {
        throw UsageError("reachability requires j <= i < length");
    }
    const auto span = static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(window - 1) + 1;
    return i - j < span;
}

struct ForwardOptions {
    bool want_attn = false;
    bool merge_lora = false; // fold adapters into the base weights instead of the adapter path
};

struct ForwardOutput {
    Mat logits; // L x V
    Mat hidden; // L x d, after the final layer norm
    std::vector<std::vector<Mat>> attention; // [layer][head] L x L, when requested
    std::optional<std::size_t> eos_index;
};

struct LayerCache {
    Mat x_in;
    Mat a, a_xhat;
    Vec a_rstd;
    Mat q, k, v;
    std::array<Mat, 4> lora_u; // input * A^T per adapted projection
    std::vector<Mat> probs;    // per head
    Mat ctx;
    Mat x_mid;
    Mat b, b_xhat;
    Vec b_rstd;
    Mat z, g;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Mat x_final;
    Mat y_xhat;
    Vec y_rstd;
    Mat hidden;
    Mat logits;
};

namespace detail {

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, Mat& xhat, Vec& rstd) {
    const Eigen::Index n = x.rows();
    const double inv_d = 1.0 / static_cast<double>(x.cols());
    xhat.resize(x.rows(), x.cols());
    rstd.resize(n);
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).sum() * inv_d;
        const auto centered = (x.row(r).array() - mean).matrix();
        const double var = centered.squaredNorm() * inv_d;
        rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(r) = centered * rstd(r);
        y.row(r) = xhat.row(r).cwiseProduct(g) + b;
    }
    return y;
}

inline Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const Mat& g, Mat& dg, Mat& db) {
    dg += dy.cwiseProduct(xhat).colwise().sum();
    db += dy.colwise().sum();
    const double inv_d = 1.0 / static_cast<double>(dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(g);
        const double mean_dxhat = dxhat.sum() * inv_d;
        const double mean_dxhat_xhat = dxhat.dot(xhat.row(r)) * inv_d;
        dx.row(r) = rstd(r) * (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

inline Mat project(const Mat& x, const Mat& w, const std::optional<LoraPair>& lora, double scale, Mat& u) {
    Mat y = x * w.transpose();
    if (lora) {
        u = x * lora->a.transpose();
        y.noalias() += scale * (u * lora->b.transpose());
    }
    return y;
}

inline Mat project_backward(const Mat& dy, const Mat& x, const Mat& w, const std::optional<LoraPair>& lora,
                            double scale, const Mat& u, Mat& dw, std::optional<LoraPair>& dlora) {
    dw.noalias() += dy.transpose() * x;
    Mat dx = dy * w;
    if (lora) {
        dlora->b.noalias() += scale * (dy.transpose() * u);
        const Mat du = scale * (dy * lora->b);
        dlora->a.noalias() += du.transpose() * x;
        dx.noalias() += du * lora->a;
    }
    return dx;
}

inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double z) noexcept {
    return 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
}

inline double gelu_grad(double z) noexcept {
    const double t = std::tanh(kGeluC * (z + kGeluA * z * z * z));
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
}

} // namespace detail

/// Forward pass that keeps every intermediate needed by backward().
inline void forward_cached(const ModelParams& p, const TokenSeq& tokens, ForwardCache& cache,
                           const ForwardOptions& options = {}) {
    const auto& cfg = p.config;
    const auto len = static_cast<Eigen::Index>(tokens.size());
    if (len == 0) {
        throw UsageError("forward on an empty sequence");
    }
    if (len > cfg.max_len) {
        throw UsageError("input length " + std::to_string(len) + " exceeds max_len " + std::to_string(cfg.max_len));
    }
    const Eigen::Index d = cfg.d_model;
    const int heads = cfg.n_heads;
    const Eigen::Index dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double lora_scale = cfg.lora ? cfg.lora->scale() : 0.0;

    Mat x(len, d);
    for (Eigen::Index t = 0; t < len; ++t) {
        const auto id = tokens.ids[static_cast<std::size_t>(t)];
        if (id < 0 || id >= cfg.vocab_size) {
            throw UsageError("token id " + std::to_string(id) + " outside vocabulary");
        }
        x.row(t) = p.tok_emb.row(id) + p.pos_emb.row(t);
    }

    cache.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        auto& c = cache.layers[l];
        c.x_in = x;
        c.a = detail::layer_norm(x, layer.ln1_g, layer.ln1_b, c.a_xhat, c.a_rstd);

        std::array<Mat, 4> merged;
        std::array<std::optional<LoraPair>, 4> none;
        const auto& adapters = options.merge_lora ? none : layer.lora;
        auto weight = [&](Proj pr) -> const Mat& {
            const auto t = static_cast<std::size_t>(pr);
            if (options.merge_lora && layer.lora[t]) {
                merged[t] = effective_weight(layer.proj(pr), *layer.lora[t], cfg.lora->alpha, cfg.lora->rank);
                return merged[t];
            }
            return layer.proj(pr);
        };
        c.q = detail::project(c.a, weight(Proj::q), adapters[0], lora_scale, c.lora_u[0]);
        c.k = detail::project(c.a, weight(Proj::k), adapters[1], lora_scale, c.lora_u[1]);
        c.v = detail::project(c.a, weight(Proj::v), adapters[2], lora_scale, c.lora_u[2]);

        c.probs.resize(static_cast<std::size_t>(heads));
        c.ctx.resize(len, d);
        for (int h = 0; h < heads; ++h) {
            const auto qh = c.q.middleCols(h * dh, dh);
            const auto kh = c.k.middleCols(h * dh, dh);
            Mat s = (qh * kh.transpose()) * att_scale;
            Mat& prob = c.probs[static_cast<std::size_t>(h)];
            prob = Mat::Zero(len, len);
            for (Eigen::Index i = 0; i < len; ++i) {
                const Eigen::Index lo = cfg.window ? std::max<Eigen::Index>(0, i - *cfg.window + 1) : 0;
                const double mx = s.row(i).segment(lo, i - lo + 1).maxCoeff();
                double sum = 0.0;
                for (Eigen::Index j = lo; j <= i; ++j) {
                    const double e = std::exp(s(i, j) - mx);
                    prob(i, j) = e;
                    sum += e;
                }
                prob.row(i).segment(lo, i - lo + 1) /= sum;
            }
            c.ctx.middleCols(h * dh, dh).noalias() = prob * c.v.middleCols(h * dh, dh);
        }
        const Mat attn_out = detail::project(c.ctx, weight(Proj::o), adapters[3], lora_scale, c.lora_u[3]);
        c.x_mid = c.x_in + attn_out;

        c.b = detail::layer_norm(c.x_mid, layer.ln2_g, layer.ln2_b, c.b_xhat, c.b_rstd);
        c.z = c.b * layer.w1.transpose();
        c.z.rowwise() += layer.b1.row(0);
        c.g = c.z.unaryExpr([](double v) { return detail::gelu(v); });
        Mat ffn = c.g * layer.w2.transpose();
        ffn.rowwise() += layer.b2.row(0);
        x = c.x_mid + ffn;
    }
    cache.x_final = x;
    cache.hidden = detail::layer_norm(x, p.lnf_g, p.lnf_b, cache.y_xhat, cache.y_rstd);
    cache.logits = cache.hidden * p.head.transpose();
}

inline std::optional<std::size_t> find_eos(const TokenSeq& tokens, TokenId eos_id) {
    if (eos_id < 0) {
        return std::nullopt;
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens.ids[t] == eos_id) {
            return t;
        }
    }
    return std::nullopt;
}

inline ForwardOutput forward(const ModelParams& p, const TokenSeq& tokens, bool want_attn = false,
                             const ForwardOptions& extra = {}) {
    ForwardCache cache;
    ForwardOptions options = extra;
    options.want_attn = want_attn;
    forward_cached(p, tokens, cache, options);
    ForwardOutput out;
    out.logits = std::move(cache.logits);
    out.hidden = std::move(cache.hidden);
    out.eos_index = find_eos(tokens, p.config.eos_id);
    if (want_attn) {
        for (auto& layer : cache.layers) {
            out.attention.push_back(std::move(layer.probs));
        }
    }
    return out;
}

/// Final-layer (post layer-norm) hidden state at the first EOS.
inline Eigen::RowVectorXd eos_representation(const ForwardOutput& out) {
    if (!out.eos_index) {
        throw DataError("sequence has no EOS token");
    }
    return out.hidden.row(static_cast<Eigen::Index>(*out.eos_index));
}

/// Accumulate parameter gradients into `grads` given dL/dlogits and an
/// optional extra dL/dhidden (the contrastive term at the EOS row).
inline void backward(const ModelParams& p, const TokenSeq& tokens, const ForwardCache& cache, const Mat& dlogits,
                     const Mat* dhidden, ModelParams& grads) {
    const auto& cfg = p.config;
    const Eigen::Index len = cache.logits.rows();
    const Eigen::Index d = cfg.d_model;
    const int heads = cfg.n_heads;
    const Eigen::Index dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double lora_scale = cfg.lora ? cfg.lora->scale() : 0.0;

    grads.head.noalias() += dlogits.transpose() * cache.hidden;
    Mat dy = dlogits * p.head;
    if (dhidden != nullptr) {
        dy += *dhidden;
    }
    Mat dx = detail::layer_norm_backward(dy, cache.y_xhat, cache.y_rstd, p.lnf_g, grads.lnf_g, grads.lnf_b);

    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const auto& layer = p.layers[li];
        auto& gl = grads.layers[li];
        const auto& c = cache.layers[li];

        // feed-forward block
        gl.b2 += dx.colwise().sum();
        gl.w2.noalias() += dx.transpose() * c.g;
        Mat dz = dx * layer.w2;
        for (Eigen::Index i = 0; i < dz.size(); ++i) {
            dz.data()[i] *= detail::gelu_grad(c.z.data()[i]);
        }
        gl.b1 += dz.colwise().sum();
        gl.w1.noalias() += dz.transpose() * c.b;
        const Mat db_in = dz * layer.w1;
        Mat dx_mid = dx + detail::layer_norm_backward(db_in, c.b_xhat, c.b_rstd, layer.ln2_g, gl.ln2_g, gl.ln2_b);

        // attention block
        const Mat dctx =
            detail::project_backward(dx_mid, c.ctx, layer.wo, layer.lora[3], lora_scale, c.lora_u[3], gl.wo, gl.lora[3]);
        Mat dq = Mat::Zero(len, d);
        Mat dk = Mat::Zero(len, d);
        Mat dv = Mat::Zero(len, d);
        for (int h = 0; h < heads; ++h) {
            const Mat& prob = c.probs[static_cast<std::size_t>(h)];
            const auto dctx_h = dctx.middleCols(h * dh, dh);
            Mat dprob = dctx_h * c.v.middleCols(h * dh, dh).transpose();
            dv.middleCols(h * dh, dh).noalias() += prob.transpose() * dctx_h;
            const Vec row_dot = prob.cwiseProduct(dprob).rowwise().sum();
            Mat ds = prob.cwiseProduct(dprob.colwise() - row_dot);
            ds *= att_scale;
            dq.middleCols(h * dh, dh).noalias() += ds * c.k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh).noalias() += ds.transpose() * c.q.middleCols(h * dh, dh);
        }
        Mat da = detail::project_backward(dq, c.a, layer.wq, layer.lora[0], lora_scale, c.lora_u[0], gl.wq, gl.lora[0]);
        da += detail::project_backward(dk, c.a, layer.wk, layer.lora[1], lora_scale, c.lora_u[1], gl.wk, gl.lora[1]);
        da += detail::project_backward(dv, c.a, layer.wv, layer.lora[2], lora_scale, c.lora_u[2], gl.wv, gl.lora[2]);
        dx = dx_mid + detail::layer_norm_backward(da, c.a_xhat, c.a_rstd, layer.ln1_g, gl.ln1_g, gl.ln1_b);
    }

    for (Eigen::Index t = 0; t < len; ++t) {
        grads.tok_emb.row(tokens.ids[static_cast<std::size_t>(t)]) += dx.row(t);
        grads.pos_emb.row(t) += dx.row(t);
    }
}

} // namespace focustune
