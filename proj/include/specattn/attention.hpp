#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "specattn/tensor.hpp"

namespace specattn {

// One row of normalized attention weights over L cached positions.
using AttnWeights = std::vector<double>;

// selected[i] == true keeps position i.
using MaskVector = std::vector<bool>;

// How a mask is applied to softmax(q k^T / sqrt(d)).
//   eq2:          weights are computed densely and dropped entries are zeroed, mass is not
//                 redistributed (O_hat = W Lambda V).
//   renormalized: softmax is taken over the selected positions only, the semantics of
//                 block-sparse kernels.
enum class AttentionMode { eq2, renormalized };

inline const char* to_string(AttentionMode mode) {
    return mode == AttentionMode::eq2 ? "eq2" : "renormalized";
}

inline AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "eq2") return AttentionMode::eq2;
    if (s == "renormalized") return AttentionMode::renormalized;
    throw Error("unknown attention mode '" + s + "'");
}

inline AttnWeights softmax(std::span<const double> logits) {
    if (logits.empty()) throw Error("empty logits");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : logits) {
        if (!std::isfinite(x)) throw Error("non-finite input");
        mx = std::max(mx, x);
    }
    AttnWeights w(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(logits[i] - mx);
        sum += w[i];
    }
    for (double& x : w) x /= sum;
    return w;
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Single-query attention kernel shared by the dense and masked paths so that a full mask
// performs exactly the same floating-point operations as no mask. `mask == nullptr` means
// every position is selected. Writes the output row into `out` and the weights into `w`.
// Returns false when the renormalized support is empty.
inline bool attend(std::span<const double> q, MatrixView k, MatrixView v, const MaskVector* mask,
                   AttentionMode mode, std::span<double> out, AttnWeights& w) {
    const std::size_t n = k.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
    auto selected = [&](std::size_t i) { return mask == nullptr || (*mask)[i]; };

    w.assign(n, 0.0);
    std::fill(out.begin(), out.end(), 0.0);

    const bool dense_softmax = mode == AttentionMode::eq2 || mask == nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (!dense_softmax && !selected(i)) continue;
        w[i] = dot(q, k.row(i)) * scale;
        mx = std::max(mx, w[i]);
        any = true;
    }
    if (!any) return false;

    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!dense_softmax && !selected(i)) continue;
        w[i] = std::exp(w[i] - mx);
        sum += w[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!dense_softmax && !selected(i)) continue;
        w[i] /= sum;
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!selected(i)) continue;
        const double wi = w[i];
        const auto vi = v.row(i);
        for (std::size_t c = 0; c < out.size(); ++c) out[c] += wi * vi[c];
    }
    return true;
}

inline void check_attention_shapes(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v) {
    if (q.rows() != 1 || q.cols() == 0) throw Error("query must be 1 x d with d > 0");
    if (k.rows() == 0) throw Error("attention needs at least one key");
    if (k.cols() != q.cols()) throw Error("key width does not match query width");
    if (v.rows() != k.rows()) throw Error("value rows do not match key rows");
}

}  // namespace detail

struct AttentionResult {
    Tensor2D out;
    AttnWeights weights;
};

inline AttentionResult dense_attention(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v) {
    detail::check_attention_shapes(q, k, v);
    AttentionResult r{Tensor2D(1, v.cols()), {}};
    detail::attend(q.row(0), k.view(), v.view(), nullptr, AttentionMode::eq2, r.out.row(0), r.weights);
    return r;
}

// renormalize == false is the W Lambda V form; an empty mask then yields the zero vector.
inline Tensor2D sparse_attention_postmask(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v,
                                          const MaskVector& mask, bool renormalize) {
    detail::check_attention_shapes(q, k, v);
    if (mask.size() != k.rows()) throw Error("mask length does not match key count");
    Tensor2D out(1, v.cols());
    AttnWeights w;
    const auto mode = renormalize ? AttentionMode::renormalized : AttentionMode::eq2;
    if (!detail::attend(q.row(0), k.view(), v.view(), &mask, mode, out.row(0), w)) {
        throw Error("empty attention support");
    }
    return out;
}

// Sum over dropped positions of w[i] * ||v_i||, which bounds ||O - O_hat|| for the eq2 form.
inline double masked_error_bound(std::span<const double> w, const MaskVector& mask, MatrixView v) {
    if (w.size() != mask.size() || v.rows != w.size()) throw Error("error bound shape mismatch");
    double bound = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!mask[i]) bound += w[i] * l2_norm(v.row(i));
    }
    return bound;
}

inline double masked_error_bound(const AttnWeights& w, const MaskVector& mask, const Tensor2D& v) {
    return masked_error_bound(std::span<const double>(w), mask, v.view());
}

}  // namespace specattn
