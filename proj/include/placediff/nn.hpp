#pragma once

// Shared network building blocks: space-to-depth maps for strided
// convolutions, sinusoidal embeddings, and single-head attention.

#include <cmath>
#include <vector>

#include "params.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace placediff {

// index map turning [H*W x C] into [(H/f)*(W/f) x f*f*C]
inline std::vector<std::size_t> s2d_map(int H, int W, int C, int f) {
    if (H % f || W % f) throw std::invalid_argument("s2d: extent not divisible by factor");
    std::vector<std::size_t> map(static_cast<std::size_t>(H) * W * C);
    std::size_t o = 0;
    for (int by = 0; by < H / f; ++by) {
        for (int bx = 0; bx < W / f; ++bx) {
            for (int dy = 0; dy < f; ++dy) {
                for (int dx = 0; dx < f; ++dx) {
                    for (int c = 0; c < C; ++c) {
                        const int y = by * f + dy, x = bx * f + dx;
                        map[o++] = (static_cast<std::size_t>(y) * W + x) * C + c;
                    }
                }
            }
        }
    }
    return map;
}

// inverse of s2d_map: [(H/f)*(W/f) x f*f*C] back to [H*W x C]
inline std::vector<std::size_t> d2s_map(int H, int W, int C, int f) {
    const auto fwd = s2d_map(H, W, C, f);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return inv;
}

inline Ref space_to_depth(Tape& tp, Ref x, int H, int W, int C, int f) {
    return tp.reindex(x, {(H / f) * (W / f), f * f * C}, s2d_map(H, W, C, f));
}

inline Ref depth_to_space(Tape& tp, Ref x, int H, int W, int C, int f) {
    return tp.reindex(x, {H * W, C}, d2s_map(H, W, C, f));
}

// [n x d] fixed sinusoidal features over positions 0..n-1
inline Tensor sin_position_embedding(int n, int d) {
    Tensor t = Tensor::matrix(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            const double freq = std::pow(10000.0, -2.0 * (j / 2) / d);
            t.at(i, j) = (j % 2 == 0) ? std::sin(i * freq) : std::cos(i * freq);
        }
    }
    return t;
}

// [1 x d] sinusoidal embedding of a continuous value
inline Tensor sin_scalar_embedding(double v, int d, double base = 10000.0) {
    Tensor t = Tensor::matrix(1, d);
    for (int j = 0; j < d; ++j) {
        const double freq = std::pow(base, -2.0 * (j / 2) / d);
        t.data[j] = (j % 2 == 0) ? std::sin(v * freq) : std::cos(v * freq);
    }
    return t;
}

inline Ref linear(Tape& tp, Binding& bind, Ref x, const std::string& w, const std::string& b) {
    return tp.bcast_row_add(tp.matmul(x, bind(w)), bind(b));
}

inline void add_linear(ParamStore& ps, Rng& rng, const std::string& prefix, int in, int out,
                       bool zero_init = false, bool frozen = false) {
    ps.add(prefix + ".w", zero_init ? Tensor::matrix(in, out, 0.0) : init_linear(rng, in, out), frozen);
    ps.add(prefix + ".b", Tensor::matrix(1, out, 0.0), frozen);
}

inline void add_layer_norm(ParamStore& ps, const std::string& prefix, int d, bool frozen = false) {
    ps.add(prefix + ".g", Tensor::matrix(1, d, 1.0), frozen);
    ps.add(prefix + ".b", Tensor::matrix(1, d, 0.0), frozen);
}

inline Ref layer_norm_p(Tape& tp, Binding& bind, Ref x, const std::string& prefix) {
    return layer_norm(tp, x, bind(prefix + ".g"), bind(prefix + ".b"));
}

// Single-head cross attention: queries from q_in via Wq, keys/values given as
// already-projected refs. Returns the attention output (before any residual).
// If `probs_out` is non-null the attention probability matrix value is stored.
inline Ref attention_core(Tape& tp, Ref q, Ref k, Ref v, double inv_sqrt_d, Tensor* probs_out = nullptr) {
    Ref scores = tp.matmul_nt(q, k);
    Ref probs = tp.softmax_rows(scores, inv_sqrt_d);
    if (probs_out) *probs_out = tp.val(probs);
    return tp.matmul(probs, v);
}

}  // namespace placediff
