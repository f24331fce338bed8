#pragma once

// CLM and contrastive objectives, AdamW with linear warmup, the training loop
// and finite-difference gradient verification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/model.hpp"
#include "focustune/rng.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

/// One token sequence with its loss mask (1 for scored target tokens, 0 for padding).
struct Sequence {
    TokenSeq tokens;
    std::vector<double> loss_mask;
    std::optional<std::size_t> eos_index;
};

inline Sequence make_sequence(TokenSeq tokens, TokenId eos_id, std::optional<TokenId> pad_id = std::nullopt) {
    Sequence s;
    s.loss_mask.assign(tokens.size(), 1.0);
    if (pad_id) {
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            if (tokens.ids[t] == *pad_id) {
                s.loss_mask[t] = 0.0;
            }
        }
    }
    s.eos_index = find_eos(tokens, eos_id);
    s.tokens = std::move(tokens);
    return s;
}

/// N originals and their N augmentations; augmented[i] pairs with originals[i].
struct PairedBatch {
    std::vector<Sequence> originals;
    std::vector<Sequence> augmented;
};

struct Ablation {
    bool use_da = true;
    bool use_contra = true;
    bool use_masking = true;

    void validate() const {
        if (use_contra && !use_da) {
            throw UsageError("contrastive loss needs data augmentation (no pairs to contrast)");
        }
    }

    static Ablation vanilla() { return Ablation{false, false, true}; }

    /// Apply removals such as "-contra", "-da", "-masking" or "vanilla".
    static Ablation parse(const std::vector<std::string>& removals) {
        Ablation a;
        for (const auto& r : removals) {
            if (r == "-contra") {
                a.use_contra = false;
            } else if (r == "-da") {
                a.use_da = false;
            } else if (r == "-masking") {
                a.use_masking = false;
            } else if (r == "vanilla") {
                a.use_da = false;
                a.use_contra = false;
            } else if (r != "full" && !r.empty()) {
                throw UsageError("unknown ablation '" + r + "' (expected -contra, -da, -masking, vanilla)");
            }
        }
        a.validate();
        return a;
    }

    std::string label() const {
        if (!use_da && !use_contra) return "vanilla";
        std::string s = "full";
        if (!use_contra) s += "-contra";
        if (!use_masking) s += "-masking";
        return s;
    }
};

/// Sum is the reference form; mean divides each CLM branch by its scored-token
/// count and the contrastive term by N.
enum class Reduction { sum, mean };

struct LossBreakdown {
    double clm_original = 0.0;
    double clm_augmented = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    double tau = 0.0;
};

// ----------------------------------------------------------------------------
// Objectives

/// Next-token negative log-likelihood summed over scored targets. Writes
/// dL/dlogits (scaled by `grad_scale`) when `dlogits` is non-null.
inline double sequence_nll(const Mat& logits, const Sequence& seq, Mat* dlogits, double grad_scale = 1.0) {
    const auto len = static_cast<Eigen::Index>(seq.tokens.size());
    if (dlogits != nullptr) {
        dlogits->setZero(logits.rows(), logits.cols());
    }
    double loss = 0.0;
    for (Eigen::Index t = 0; t + 1 < len; ++t) {
        const double w = seq.loss_mask[static_cast<std::size_t>(t + 1)];
        if (w == 0.0) {
            continue;
        }
        const auto target = seq.tokens.ids[static_cast<std::size_t>(t + 1)];
        const auto row = logits.row(t);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        loss += w * (lse - row(target));
        if (dlogits != nullptr) {
            auto drow = dlogits->row(t);
            drow = (row.array() - lse).exp().matrix() * (w * grad_scale);
            drow(target) -= w * grad_scale;
        }
    }
    return loss;
}

inline double scored_tokens(const Sequence& seq) {
    double n = 0.0;
    for (std::size_t t = 1; t < seq.loss_mask.size(); ++t) {
        n += seq.loss_mask[t];
    }
    return n;
}

/// CLM loss over both branches of a batch (originals, then augmentations).
inline double clm_loss(const ModelParams& params, const PairedBatch& batch) {
    double loss = 0.0;
    for (const auto* branch : {&batch.originals, &batch.augmented}) {
        for (const auto& seq : *branch) {
            if (seq.tokens.empty()) {
                throw UsageError("clm_loss on an empty sequence");
            }
            loss += sequence_nll(forward(params, seq.tokens).logits, seq, nullptr);
        }
    }
    return loss;
}

struct ContrastiveResult {
    double loss = 0.0;
    Mat grad_h;      // N x d
    Mat grad_h_aug;  // N x d
    double grad_log_inv_tau = 0.0;
};

/// Symmetric in-batch InfoNCE over cosine similarities scaled by 1/tau, with
/// tau = exp(-log_inv_tau). Row i of `h` is positive with row i of `h_aug`.
inline ContrastiveResult contrastive_loss(const Mat& h, const Mat& h_aug, double log_inv_tau) {
    const Eigen::Index n = h.rows();
    if (n < 1 || h_aug.rows() != n || h.cols() != h_aug.cols()) {
        throw UsageError("contrastive_loss needs two N x d matrices with N >= 1");
    }
    const Vec norm_h = h.rowwise().norm();
    const Vec norm_a = h_aug.rowwise().norm();
    if (norm_h.minCoeff() == 0.0 || norm_a.minCoeff() == 0.0) {
        throw NumericError("contrastive_loss on a zero-norm representation");
    }
    const Mat unit_h = norm_h.cwiseInverse().asDiagonal() * h;
    const Mat unit_a = norm_a.cwiseInverse().asDiagonal() * h_aug;
    const Mat sim = unit_h * unit_a.transpose(); // sim(h_i, h'_j)
    const double scale = std::exp(log_inv_tau);
    const Mat logits = scale * sim;

    ContrastiveResult r;
    Mat dlogits = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        // original i against all augmentations
        const auto row = logits.row(i);
        const double mr = row.maxCoeff();
        const double lse_r = mr + std::log((row.array() - mr).exp().sum());
        r.loss += lse_r - logits(i, i);
        dlogits.row(i) += (row.array() - lse_r).exp().matrix();
        dlogits(i, i) -= 1.0;
        // augmentation i against all originals: sim(h'_i, h_j) = sim(h_j, h'_i)
        const auto col = logits.col(i);
        const double mc = col.maxCoeff();
        const double lse_c = mc + std::log((col.array() - mc).exp().sum());
        r.loss += lse_c - logits(i, i);
        dlogits.col(i) += (col.array() - lse_c).exp().matrix();
        dlogits(i, i) -= 1.0;
    }
    r.grad_log_inv_tau = scale * dlogits.cwiseProduct(sim).sum();
    const Mat dsim = scale * dlogits;
    // d cos(a, b) / da = (b_hat - cos * a_hat) / |a|
    const Mat d_unit_h = dsim * unit_a;
    const Mat d_unit_a = dsim.transpose() * unit_h;
    r.grad_h.resize(n, h.cols());
    r.grad_h_aug.resize(n, h.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        r.grad_h.row(i) = (d_unit_h.row(i) - d_unit_h.row(i).dot(unit_h.row(i)) * unit_h.row(i)) / norm_h(i);
        r.grad_h_aug.row(i) =
            (d_unit_a.row(i) - d_unit_a.row(i).dot(unit_a.row(i)) * unit_a.row(i)) / norm_a(i);
    }
    return r;
}

struct LossOptions {
    Reduction reduction = Reduction::sum;
    bool compute_grads = true;
};

struct LossEvaluation {
    LossBreakdown breakdown;
    std::optional<ModelParams> grads;
};

/// L = L_CLM(original) + L_CLM(augmented) + L_Contra, with ablation switches:
/// no DA drops the augmented branch, no Contra drops the contrastive term.
/// Masking is a property of how the augmented sequences were built.
inline LossEvaluation total_loss(const ModelParams& params, const PairedBatch& batch, const Ablation& ablation,
                                 const LossOptions& options = {}) {
    ablation.validate();
    const std::size_t n = batch.originals.size();
    if (n == 0) {
        throw UsageError("empty batch");
    }
    if (ablation.use_da && batch.augmented.size() != n) {
        throw UsageError("batch has " + std::to_string(n) + " originals but " +
                         std::to_string(batch.augmented.size()) + " augmentations");
    }
    const bool mean = options.reduction == Reduction::mean;

    LossEvaluation eval;
    auto& br = eval.breakdown;
    br.tau = tau_of(params);

    const std::size_t n_branches = ablation.use_da ? 2 : 1;
    std::vector<ForwardCache> caches(n * n_branches);
    std::vector<Mat> dlogits(n * n_branches);
    for (std::size_t b = 0; b < n_branches; ++b) {
        const auto& seqs = b == 0 ? batch.originals : batch.augmented;
        double tokens = 0.0;
        if (mean) {
            for (const auto& s : seqs) {
                tokens += scored_tokens(s);
            }
        }
        const double scale = mean ? 1.0 / std::max(tokens, 1.0) : 1.0;
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto& cache = caches[b * n + i];
            forward_cached(params, seqs[i].tokens, cache);
            loss += sequence_nll(cache.logits, seqs[i], options.compute_grads ? &dlogits[b * n + i] : nullptr, scale);
        }
        (b == 0 ? br.clm_original : br.clm_augmented) = loss * scale;
    }

    std::vector<Mat> dhidden(n * n_branches);
    double dlog_inv_tau = 0.0;
    if (ablation.use_contra) {
        const Eigen::Index d = params.config.d_model;
        Mat h(static_cast<Eigen::Index>(n), d);
        Mat h_aug(static_cast<Eigen::Index>(n), d);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& eo = batch.originals[i].eos_index;
            const auto& ea = batch.augmented[i].eos_index;
            if (!eo || !ea) {
                throw DataError("contrastive loss needs an EOS token in every sequence");
            }
            h.row(static_cast<Eigen::Index>(i)) = caches[i].hidden.row(static_cast<Eigen::Index>(*eo));
            h_aug.row(static_cast<Eigen::Index>(i)) = caches[n + i].hidden.row(static_cast<Eigen::Index>(*ea));
        }
        const auto contra = contrastive_loss(h, h_aug, params.log_inv_tau(0, 0));
        const double scale = mean ? 1.0 / static_cast<double>(n) : 1.0;
        br.contrastive = contra.loss * scale;
        if (options.compute_grads) {
            dlog_inv_tau = contra.grad_log_inv_tau * scale;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t b = 0; b < 2; ++b) {
                    auto& dh = dhidden[b * n + i];
                    const auto& seq = b == 0 ? batch.originals[i] : batch.augmented[i];
                    dh = Mat::Zero(static_cast<Eigen::Index>(seq.tokens.size()), d);
                    const auto& g = b == 0 ? contra.grad_h : contra.grad_h_aug;
                    dh.row(static_cast<Eigen::Index>(*seq.eos_index)) = g.row(static_cast<Eigen::Index>(i)) * scale;
                }
            }
        }
    }
    br.total = br.clm_original + br.clm_augmented + br.contrastive;

    if (options.compute_grads) {
        ModelParams grads = zeros_like(params);
        for (std::size_t b = 0; b < n_branches; ++b) {
            const auto& seqs = b == 0 ? batch.originals : batch.augmented;
            for (std::size_t i = 0; i < n; ++i) {
                const auto k = b * n + i;
                backward(params, seqs[i].tokens, caches[k], dlogits[k], dhidden[k].size() > 0 ? &dhidden[k] : nullptr,
                         grads);
            }
        }
        grads.log_inv_tau(0, 0) += dlog_inv_tau;
        eval.grads = std::move(grads);
    }
    return eval;
}

// ----------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct OptimState {
    AdamWConfig hp;
    std::vector<Mat> m;
    std::vector<Mat> v;
    std::int64_t step = 0;
};

inline OptimState make_optim_state(const ModelParams& params, const AdamWConfig& hp) {
    OptimState s;
    s.hp = hp;
    for (const auto& r : parameter_refs(params)) {
        s.m.push_back(Mat::Zero(r.value->rows(), r.value->cols()));
        s.v.push_back(Mat::Zero(r.value->rows(), r.value->cols()));
    }
    return s;
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Non-finite gradients reject the whole step before anything is modified.
inline void adamw_step(OptimState& state, ModelParams& params, const ModelParams& grads, double lr,
                       const std::vector<bool>& trainable) {
    auto prefs = parameter_refs(params);
    const auto grefs = parameter_refs(grads);
    if (prefs.size() != grefs.size() || prefs.size() != state.m.size() || trainable.size() != prefs.size()) {
        throw UsageError("optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < prefs.size(); ++i) {
        if (prefs[i].value->rows() != grefs[i].value->rows() || prefs[i].value->cols() != grefs[i].value->cols()) {
            throw UsageError("gradient shape mismatch for '" + prefs[i].name + "'");
        }
        if (trainable[i] && !grefs[i].value->allFinite()) {
            throw NumericError("non-finite gradient in '" + prefs[i].name + "'; step rejected");
        }
    }
    const auto& hp = state.hp;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < prefs.size(); ++i) {
        if (!trainable[i]) {
            continue;
        }
        Mat& p = *prefs[i].value;
        const Mat& g = *grefs[i].value;
        Mat& m = state.m[i];
        Mat& v = state.v[i];
        for (Eigen::Index k = 0; k < p.size(); ++k) {
            const double gk = g.data()[k];
            double& mk = m.data()[k];
            double& vk = v.data()[k];
            mk = hp.beta1 * mk + (1.0 - hp.beta1) * gk;
            vk = hp.beta2 * vk + (1.0 - hp.beta2) * gk * gk;
            const double m_hat = mk / bc1;
            const double v_hat = vk / bc2;
            double& pk = p.data()[k];
            pk -= lr * hp.weight_decay * pk;
            pk -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
        }
    }
}

/// Linear warmup from 0 over ceil(warmup_frac * total_steps) steps, then constant.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr, double warmup_frac = 0.05) {
    if (total_steps < 1) {
        throw UsageError("total_steps must be at least 1");
    }
    const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
    if (step >= warmup) {
        return base_lr;
    }
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
}

/// Scale trainable gradients to global L2 norm <= max_norm. Returns the norm before clipping.
inline double clip_grad_norm(ModelParams& grads, const std::vector<bool>& trainable, double max_norm) {
    auto refs = parameter_refs(grads);
    double sq = 0.0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (trainable[i]) {
            sq += refs[i].value->squaredNorm();
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            if (trainable[i]) {
                *refs[i].value *= s;
            }
        }
    }
    return norm;
}

// ----------------------------------------------------------------------------
// Training loop

struct TrainingPair {
    std::string id;
    TokenSeq original;
    TokenSeq augmented;
};

struct TrainConfig {
    std::int64_t steps = 100;
    std::size_t batch_size = 8;
    AdamWConfig optimizer;
    double warmup_frac = 0.05;
    double clip_norm = 1.0; // <= 0 disables clipping
    std::uint64_t seed = 0;
    Ablation ablation;
    Reduction reduction = Reduction::sum;
};

struct StepLog {
    std::int64_t step = 0;
    double lr = 0.0;
    LossBreakdown loss;
};

inline nlohmann::json to_json(const StepLog& s) {
    return {{"step", s.step},
            {"lr", s.lr},
            {"clm_orig", s.loss.clm_original},
            {"clm_aug", s.loss.clm_augmented},
            {"contra", s.loss.contrastive},
            {"total", s.loss.total},
            {"tau", s.loss.tau}};
}

struct TrainResult {
    ModelParams final_params;
    ModelParams best_params;
    std::int64_t best_step = -1;
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<StepLog> log;
};

inline PairedBatch make_batch(const std::vector<TrainingPair>& data, const std::vector<std::size_t>& indices,
                              TokenId eos_id, bool with_augmented) {
    PairedBatch batch;
    for (const auto i : indices) {
        batch.originals.push_back(make_sequence(data[i].original, eos_id));
        if (with_augmented) {
            batch.augmented.push_back(make_sequence(data[i].augmented, eos_id));
        }
    }
    return batch;
}

/// Train from `initial`. Pairs are drawn in seeded epoch permutations and never
/// separated. `on_step` (optional) observes each logged step.
inline TrainResult train_loop(const TrainConfig& config, ModelParams initial, const std::vector<TrainingPair>& data,
                              const std::function<void(const StepLog&)>& on_step = {}) {
    config.ablation.validate();
    if (data.empty()) {
        throw DataError("training set is empty");
    }
    if (config.steps < 1 || config.batch_size < 1) {
        throw UsageError("steps and batch_size must be positive");
    }
    const TokenId eos_id = initial.config.eos_id;
    const auto trainable = trainable_mask(initial);
    OptimState state = make_optim_state(initial, config.optimizer);
    Rng rng(derive_seed(config.seed, 0x7A11ull));

    TrainResult result{initial, initial, -1, std::numeric_limits<double>::infinity(), {}};
    ModelParams& params = result.final_params;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    for (std::int64_t step = 0; step < config.steps; ++step) {
        std::vector<std::size_t> indices;
        while (indices.size() < std::min(config.batch_size, data.size())) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            indices.push_back(order[cursor++]);
        }
        const auto batch = make_batch(data, indices, eos_id, config.ablation.use_da);
        auto eval = total_loss(params, batch, config.ablation, LossOptions{config.reduction, true});
        if (!std::isfinite(eval.breakdown.total)) {
            throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        ModelParams& grads = *eval.grads;
        if (config.clip_norm > 0.0) {
            clip_grad_norm(grads, trainable, config.clip_norm);
        }
        const double lr = lr_schedule(step, config.steps, config.optimizer.lr, config.warmup_frac);
        StepLog entry{step, lr, eval.breakdown};
        if (eval.breakdown.total < result.best_total) {
            result.best_total = eval.breakdown.total;
            result.best_step = step;
            result.best_params = params;
        }
        adamw_step(state, params, grads, lr, trainable);
        clamp_temperature(params);
        result.log.push_back(entry);
        if (on_step) {
            on_step(entry);
        }
    }
    return result;
}

// ----------------------------------------------------------------------------
// Gradient verification

struct GradCheckEntry {
    std::string tensor;
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    std::string worst_tensor;
    bool passed = true;
};

struct GradCheckOptions {
    std::size_t coordinates = 200;
    double tolerance = 1e-6;
    double step = 1.25e-4;     // smallest finite-difference step
    std::size_t ladder = 8;    // steps tried: step * 2^k, k < ladder
    std::uint64_t seed = 0;
    bool include_temperature = true; // always check log(1/tau) in addition to the sample
    Reduction reduction = Reduction::sum;
};

/// |a - n| / max(|a|, |n|), with both-near-zero pairs compared absolutely
/// against a 1e-10 floor.
inline double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
    return std::abs(analytic - numeric) / denom;
}

/// Compare analytic gradients of total_loss with numeric derivatives on
/// randomly sampled coordinates. Each coordinate evaluates fourth-order
/// central differences on a ladder of doubling steps, Richardson-combines
/// neighbours, and keeps the pair that agrees best. Small steps lose to
/// roundoff on small gradients and large steps to truncation on large ones;
/// the ladder picks per coordinate.
inline GradCheckReport grad_check(const ModelParams& params, const PairedBatch& batch, const Ablation& ablation,
                                  const GradCheckOptions& options = {}) {
    const auto analytic = total_loss(params, batch, ablation, LossOptions{options.reduction, true});
    const auto grefs = parameter_refs(*analytic.grads);

    ModelParams probe = params;
    auto prefs = parameter_refs(probe);
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& r : prefs) {
        offsets.push_back(total);
        total += static_cast<std::size_t>(r.value->size());
    }
    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    Rng rng(derive_seed(options.seed, 0x6C4Eull));
    for (std::size_t c = 0; c < options.coordinates; ++c) {
        const auto flat = static_cast<std::size_t>(rng.uniform_below(total));
        const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
        const auto t = static_cast<std::size_t>(std::distance(offsets.begin(), it) - 1);
        coords.emplace_back(t, static_cast<Eigen::Index>(flat - offsets[t]));
    }
    if (options.include_temperature) {
        coords.emplace_back(prefs.size() - 1, 0);
    }

    auto loss_at = [&]() {
        return total_loss(probe, batch, ablation, LossOptions{options.reduction, false}).breakdown.total;
    };
    const double roundoff = 1.5 * std::numeric_limits<double>::epsilon() * std::abs(analytic.breakdown.total);
    GradCheckReport report;
    for (const auto& [t, idx] : coords) {
        double& x = prefs[t].value->data()[idx];
        const double x0 = x;
        std::vector<double> d;
        for (std::size_t k = 0; k < std::max<std::size_t>(options.ladder, 2); ++k) {
            const double h = options.step * std::ldexp(1.0, static_cast<int>(k));
            x = x0 + h;
            const double f1 = loss_at();
            x = x0 - h;
            const double fm1 = loss_at();
            x = x0 + 2 * h;
            const double f2 = loss_at();
            x = x0 - 2 * h;
            const double fm2 = loss_at();
            d.push_back((8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h));
        }
        x = x0;
        // Error estimate per pair: truncation from the disagreement plus the
        // stencil's roundoff, about 1.5 eps |f| / h.
        double numeric = 0.0;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t k = 1; k < d.size(); ++k) {
            const double h = options.step * std::ldexp(1.0, static_cast<int>(k - 1));
            const double est = std::abs(d[k - 1] - d[k]) / 15.0 + roundoff / h;
            if (est < best) {
                best = est;
                numeric = (16.0 * d[k - 1] - d[k]) / 15.0;
            }
        }
        GradCheckEntry e{prefs[t].name, idx, grefs[t].value->data()[idx], numeric, 0.0};
        e.rel_error = gradient_rel_error(e.analytic, e.numeric);
        if (e.rel_error > report.max_rel_error || report.entries.empty()) {
            report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
            if (e.rel_error >= report.max_rel_error) {
                report.worst_tensor = e.tensor;
            }
        }
        report.entries.push_back(std::move(e));
    }
    report.passed = report.max_rel_error < options.tolerance;
    return report;
}

} // namespace focustune
