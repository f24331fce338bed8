#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance suite.

#include <cmath>
#include <set>

#include "focustune/focustune.hpp"

namespace testutil {

using namespace focustune;

// Extended-precision next-token NLL straight from the logits matrix.
inline long double nll_oracle(const Mat& logits, const Sequence& seq) {
    long double loss = 0.0L;
    for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t) {
        const long double w = seq.loss_mask[t + 1];
        if (w == 0.0L) {
            continue;
        }
        long double z = 0.0L;
        for (Eigen::Index v = 0; v < logits.cols(); ++v) {
            z += std::exp(static_cast<long double>(logits(static_cast<Eigen::Index>(t), v)));
        }
        loss += w * (std::log(z) - logits(static_cast<Eigen::Index>(t), seq.tokens.ids[t + 1]));
    }
    return loss;
}

// Symmetric InfoNCE in long double, written from the definition.
inline long double contrastive_oracle(const Mat& h, const Mat& ha, long double log_inv_tau) {
    const auto n = h.rows();
    auto cosine = [&](Eigen::Index i, Eigen::Index j) {
        long double dot = 0, ni = 0, nj = 0;
        for (Eigen::Index k = 0; k < h.cols(); ++k) {
            dot += static_cast<long double>(h(i, k)) * ha(j, k);
            ni += static_cast<long double>(h(i, k)) * h(i, k);
            nj += static_cast<long double>(ha(j, k)) * ha(j, k);
        }
        return dot / (std::sqrt(ni) * std::sqrt(nj));
    };
    const long double s = std::exp(log_inv_tau);
    long double loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        long double zr = 0, zc = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            zr += std::exp(s * cosine(i, j));
            zc += std::exp(s * cosine(j, i));
        }
        loss += -(s * cosine(i, i) - std::log(zr));
        loss += -(s * cosine(i, i) - std::log(zc));
    }
    return loss;
}

// Breadth-first search over (layer, position) nodes along permitted attention edges.
inline bool bfs_reachable(int window, int layers, std::size_t length, std::size_t i, std::size_t j) {
    std::set<std::size_t> frontier{j};
    for (int l = 0; l < layers; ++l) {
        std::set<std::size_t> next;
        for (const auto src : frontier) {
            for (std::size_t dst = src; dst < length; ++dst) {
                if (attention_allowed(dst, src, window)) {
                    next.insert(dst);
                }
            }
        }
        frontier = std::move(next);
    }
    return frontier.count(i) > 0;
}

} // namespace testutil
