#pragma once

// Place-ID controller: a projector lifting the recognizer embedding to a
// short token sequence, a perceiver stack refining those tokens against
// masked-reference attribute features, and a SoftCLIP alignment loss.
// Also hosts the frozen attribute encoder (a fixed random-convolution
// stack) used both as the perceiver context and as the eval feature space.

#include <cstdio>
#include <string>
#include <vector>

#include "nn.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"
#include "toyworld.hpp"

namespace placediff {

// ---- frozen attribute encoder ----

struct AttributeEncoderConfig {
    int image = 32;
    int d_attr = 32;

    int tokens() const { return (image / 8) * (image / 8); }
};

class AttributeEncoder {
public:
    AttributeEncoderConfig cfg;

    // weights are random, frozen at creation, and never trained
    void init(ParamStore& ps, Rng& rng) const {
        add_linear(ps, rng, "attr.c1", 12, 16, false, true);
        add_linear(ps, rng, "attr.c2", 64, 24, false, true);
        add_linear(ps, rng, "attr.c3", 96, cfg.d_attr, false, true);
    }

    // img [image*image x 3] -> token grid [tokens x d_attr]
    Ref tokens_graph(Tape& tp, Binding& bind, Ref img) const {
        const int n = cfg.image;
        Ref h = space_to_depth(tp, img, n, n, 3, 2);
        h = tp.tanh_(linear(tp, bind, h, "attr.c1.w", "attr.c1.b"));
        h = space_to_depth(tp, h, n / 2, n / 2, 16, 2);
        h = tp.tanh_(linear(tp, bind, h, "attr.c2.w", "attr.c2.b"));
        h = space_to_depth(tp, h, n / 4, n / 4, 24, 2);
        return tp.tanh_(linear(tp, bind, h, "attr.c3.w", "attr.c3.b"));
    }

    Tensor tokens(const ParamStore& ps, const Tensor& img) const {
        Tape tp;
        Binding bind(tp, const_cast<ParamStore&>(ps));
        return tp.val(tokens_graph(tp, bind, tp.leaf(img)));
    }

    // mean-pooled, L2-normalized [1 x d_attr]; SoftCLIP teacher and eval feature
    Tensor pooled(const ParamStore& ps, const Tensor& img) const {
        const Tensor tok = tokens(ps, img);
        Tensor p = Tensor::matrix(1, cfg.d_attr);
        for (int i = 0; i < tok.rows(); ++i) {
            for (int j = 0; j < cfg.d_attr; ++j) p.data[j] += tok.at(i, j) / tok.rows();
        }
        double nrm = 0.0;
        for (double v : p.data) nrm += v * v;
        nrm = std::sqrt(std::max(nrm, 1e-24));
        for (double& v : p.data) v /= nrm;
        return p;
    }
};

// ---- reference masking ----

// Zeroes pixels inside any box rectangle and in the top sky_rows rows;
// everything else is preserved bitwise. Out-of-bounds rects are clamped.
inline Tensor mask_reference(const Tensor& img, const std::vector<ViewRect>& rects, int sky_rows) {
    const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(img.rows()))));
    if (n * n != img.rows() || img.cols() != 3) {
        throw std::invalid_argument("mask_reference: image must be square [n*n x 3]");
    }
    Tensor out = img;
    for (int y = 0; y < std::min(sky_rows, n); ++y) {
        for (int x = 0; x < n; ++x) {
            for (int c = 0; c < 3; ++c) out.data[(static_cast<std::size_t>(y) * n + x) * 3 + c] = 0.0;
        }
    }
    for (const auto& r : rects) {
        if (r.w <= 0 || r.h <= 0) continue;
        int x0 = r.x0, y0 = r.y0, x1 = r.x0 + r.w, y1 = r.y0 + r.h;
        if (x0 < 0 || y0 < 0 || x1 > n || y1 > n) {
            std::fprintf(stderr, "mask_reference: clamping out-of-bounds box [%d,%d %dx%d]\n", r.x0,
                         r.y0, r.w, r.h);
            x0 = std::max(x0, 0);
            y0 = std::max(y0, 0);
            x1 = std::min(x1, n);
            y1 = std::min(y1, n);
        }
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                for (int c = 0; c < 3; ++c) out.data[(static_cast<std::size_t>(y) * n + x) * 3 + c] = 0.0;
            }
        }
    }
    return out;
}

// ---- place-ID controller ----

enum class ProjectorMode { two_linear_tanh, pure_linear, cascaded_mlp };

inline const char* projector_mode_name(ProjectorMode m) {
    switch (m) {
        case ProjectorMode::two_linear_tanh: return "two_linear_tanh";
        case ProjectorMode::pure_linear: return "pure_linear";
        case ProjectorMode::cascaded_mlp: return "cascaded_mlp";
    }
    throw std::invalid_argument("unknown projector mode");
}

inline ProjectorMode projector_mode_from(const std::string& s) {
    if (s == "two_linear_tanh") return ProjectorMode::two_linear_tanh;
    if (s == "pure_linear") return ProjectorMode::pure_linear;
    if (s == "cascaded_mlp") return ProjectorMode::cascaded_mlp;
    throw std::invalid_argument("unknown projector mode: " + s);
}

struct ControllerConfig {
    int d_place = 64;
    int d_model = 32;
    int n_tokens = 4;
    int proj_hidden = 128;
    int perceiver_layers = 3;
    int perceiver_inner = 64;
    ProjectorMode mode = ProjectorMode::two_linear_tanh;
    bool perceiver_enabled = true;
    int xattn_sites = 1;   // cross-attention graft sites (one per denoiser block)

    // graft prefix for site b; must match the denoiser's graft_prefix
    std::string graft_prefix(int b) const {
        return b == 0 ? "ctrl.xattn." : "ctrl.xattn.blk" + std::to_string(b) + ".";
    }
};

class PlaceController {
public:
    ControllerConfig cfg;

    void init(ParamStore& ps, Rng& rng) const {
        const int d = cfg.d_model;
        const int out = cfg.n_tokens * d;
        add_linear(ps, rng, "ctrl.proj1", cfg.d_place, cfg.proj_hidden);
        if (cfg.mode == ProjectorMode::cascaded_mlp) {
            add_linear(ps, rng, "ctrl.proj_mid", cfg.proj_hidden, cfg.proj_hidden);
        }
        add_linear(ps, rng, "ctrl.proj2", cfg.proj_hidden, out);
        if (cfg.perceiver_enabled) {
            for (int l = 0; l < cfg.perceiver_layers; ++l) {
                const std::string p = "ctrl.perc" + std::to_string(l);
                add_layer_norm(ps, p + ".ln1", d);
                add_linear(ps, rng, p + ".wq", d, cfg.perceiver_inner);
                add_linear(ps, rng, p + ".wk", d, cfg.perceiver_inner);
                add_linear(ps, rng, p + ".wv", d, cfg.perceiver_inner);
                add_linear(ps, rng, p + ".out", cfg.perceiver_inner, d, /*zero_init=*/true);
                add_layer_norm(ps, p + ".ln2", d);
                add_linear(ps, rng, p + ".ffn1", d, cfg.perceiver_inner);
                add_linear(ps, rng, p + ".ffn2", cfg.perceiver_inner, d, /*zero_init=*/true);
            }
        }
        add_linear(ps, rng, "ctrl.clip", d, d);                 // SoftCLIP projector
        for (int b = 0; b < cfg.xattn_sites; ++b) {
            const std::string g = cfg.graft_prefix(b);
            ps.add(g + "kp", init_linear(rng, d, d));           // decoupled place keys
            ps.add(g + "vp", Tensor::matrix(d, d, 0.0));        // inert values until trained
        }
    }

    // e [1 x d_place] -> Z [n_tokens x d_model]
    Ref project(Tape& tp, Binding& bind, Ref e) const {
        Ref h = linear(tp, bind, e, "ctrl.proj1.w", "ctrl.proj1.b");
        if (cfg.mode != ProjectorMode::pure_linear) h = tp.tanh_(h);
        if (cfg.mode == ProjectorMode::cascaded_mlp) {
            h = tp.tanh_(linear(tp, bind, h, "ctrl.proj_mid.w", "ctrl.proj_mid.b"));
        }
        h = linear(tp, bind, h, "ctrl.proj2.w", "ctrl.proj2.b");
        return tp.reshape(h, {cfg.n_tokens, cfg.d_model});
    }

    // perceiver stack; exact identity on Z while out/ffn2 stay zero
    Ref refine(Tape& tp, Binding& bind, Ref z, Ref c_tokens) const {
        if (!cfg.perceiver_enabled) return z;
        const double inv_sd = 1.0 / std::sqrt(static_cast<double>(cfg.perceiver_inner));
        for (int l = 0; l < cfg.perceiver_layers; ++l) {
            const std::string p = "ctrl.perc" + std::to_string(l);
            Ref x = layer_norm_p(tp, bind, z, p + ".ln1");
            Ref q = linear(tp, bind, x, p + ".wq.w", p + ".wq.b");
            Ref k = linear(tp, bind, c_tokens, p + ".wk.w", p + ".wk.b");
            Ref v = linear(tp, bind, c_tokens, p + ".wv.w", p + ".wv.b");
            Ref att = attention_core(tp, q, k, v, inv_sd);
            z = tp.add(z, linear(tp, bind, att, p + ".out.w", p + ".out.b"));
            Ref f = layer_norm_p(tp, bind, z, p + ".ln2");
            f = tp.tanh_(linear(tp, bind, f, p + ".ffn1.w", p + ".ffn1.b"));
            z = tp.add(z, linear(tp, bind, f, p + ".ffn2.w", p + ".ffn2.b"));
        }
        return z;
    }

    Ref tokens(Tape& tp, Binding& bind, Ref e, Ref c_tokens) const {
        return refine(tp, bind, project(tp, bind, e), c_tokens);
    }

    // mean-pooled tokens -> SoftCLIP projector -> unit norm [1 x d_model]
    Ref softclip_embed(Tape& tp, Binding& bind, Ref z) const {
        Ref pool = tp.leaf(Tensor::matrix(1, cfg.n_tokens, 1.0 / cfg.n_tokens));
        Ref p = linear(tp, bind, tp.matmul(pool, z), "ctrl.clip.w", "ctrl.clip.b");
        return normalize_rows(tp, p);
    }
};

// ---- SoftCLIP ----

// teacher: rows of softmax(t t^T / tau), computed outside the tape
inline Tensor softclip_teacher(const Tensor& t, double tau) {
    const int n = t.rows(), d = t.cols();
    Tensor T = Tensor::matrix(n, n);
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += t.at(i, c) * t.at(j, c);
            T.at(i, j) = dot / tau;
            mx = std::max(mx, T.at(i, j));
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += (T.at(i, j) = std::exp(T.at(i, j) - mx));
        for (int j = 0; j < n; ++j) T.at(i, j) /= z;
    }
    return T;
}

// p: student embeddings on the tape [N x d]; t: teacher embeddings [N x d].
// Both are expected row-normalized. Returns -(1/N) sum_ij T_ij log S_ij.
inline Ref softclip_loss(Tape& tp, Ref p, const Tensor& t, double tau) {
    const int n = t.rows();
    if (n < 2) throw std::invalid_argument("softclip_loss: batch size must be >= 2");
    if (tau <= 0.0) throw std::invalid_argument("softclip_loss: temperature must be positive");
    if (tp.val(p).rows() != n || tp.val(p).cols() != t.cols()) {
        throw std::invalid_argument("softclip_loss: embedding shape mismatch");
    }
    for (int i = 0; i < n; ++i) {
        double nrm = 0.0;
        for (int c = 0; c < t.cols(); ++c) nrm += t.at(i, c) * t.at(i, c);
        if (std::abs(std::sqrt(nrm) - 1.0) > 1e-9) {
            throw std::invalid_argument("softclip_loss: teacher embedding not unit norm");
        }
    }
    const Tensor teacher = softclip_teacher(t, tau);
    Ref s = tp.softmax_rows(tp.matmul_nt(p, tp.leaf(t)), 1.0 / tau);
    Ref cross = tp.sum_all(tp.mul(tp.leaf(teacher), tp.log_(s)));
    return tp.scale(cross, -1.0 / n);
}

inline double softclip_teacher_entropy(const Tensor& t, double tau) {
    const Tensor T = softclip_teacher(t, tau);
    double h = 0.0;
    for (double v : T.data) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h / T.rows();
}

inline Ref total_loss(Tape& tp, Ref base, Ref softclip, double lambda) {
    return tp.add(base, tp.scale(softclip, lambda));
}

}  // namespace placediff
