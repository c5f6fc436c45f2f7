#pragma once

// Conditional multi-view noise predictor: strided-conv downsample, one
// transformer block of [self-attention -> condition cross-attention ->
// cross-view attention -> feed-forward], strided upsample back to pixels.
// Condition cross-attention and cross-view attention carry zero-initialized
// output projections so an untrained graft leaves the network unchanged.

#include <optional>
#include <vector>

#include "conditions.hpp"
#include "nn.hpp"
#include "params.hpp"
#include "tape.hpp"

namespace placediff {

struct DenoiserConfig {
    int image = 32;
    int d_model = 32;
    int c1 = 16;          // channels after the first downsample
    int ffn_hidden = 64;
    int blocks = 1;       // transformer blocks between downsample and upsample
    CondConfig cond;

    int grid() const { return image / 4; }               // token grid side
    int tokens() const { return grid() * grid(); }

    // parameter prefix of block b ("base." for the first, "base.blkN." after)
    std::string block_prefix(int b) const {
        return b == 0 ? "base." : "base.blk" + std::to_string(b) + ".";
    }
    // controller graft prefix for block b's condition cross-attention
    std::string graft_prefix(int b) const {
        return b == 0 ? "ctrl.xattn." : "ctrl.xattn.blk" + std::to_string(b) + ".";
    }
};

struct ViewBundle {
    std::vector<Ref> views;                       // per-view token refs [n x d]
    std::vector<std::pair<int, int>> neighbors;   // (left, right); right < 0 when V == 2
};

inline std::vector<std::pair<int, int>> cyclic_neighbors(int V) {
    if (V < 2) throw std::invalid_argument("cross-view attention: need V >= 2");
    std::vector<std::pair<int, int>> nb(V);
    if (V == 2) {
        nb[0] = {1, -1};
        nb[1] = {0, -1};
        return nb;
    }
    for (int v = 0; v < V; ++v) nb[v] = {(v + V - 1) % V, (v + 1) % V};
    return nb;
}

// per-layer attention probabilities captured during a forward pass
struct AttnCapture {
    // one entry per (block, view), block-major: [tokens x (base_len + place_tokens)]
    std::vector<Tensor> cond_probs;
    int base_len = 0;
    int place_tokens = 0;
    int views = 0;
};

class Denoiser {
public:
    DenoiserConfig cfg;

    void init_base(ParamStore& ps, Rng& rng) const {
        const int d = cfg.d_model;
        add_linear(ps, rng, "base.down1", 12, cfg.c1);
        add_linear(ps, rng, "base.down2", 4 * cfg.c1, d);
        add_linear(ps, rng, "base.temb", d, d);
        add_linear(ps, rng, "base.skipg", d, cfg.c1);
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string p = cfg.block_prefix(b);
            add_layer_norm(ps, p + "ln1", d);
            ps.add(p + "sa.q", init_linear(rng, d, d));
            ps.add(p + "sa.k", init_linear(rng, d, d));
            ps.add(p + "sa.v", init_linear(rng, d, d));
            ps.add(p + "sa.o", init_linear(rng, d, d));
            add_layer_norm(ps, p + "ln2", d);
            ps.add(p + "ca.q", init_linear(rng, d, d));
            ps.add(p + "ca.k", init_linear(rng, d, d));
            ps.add(p + "ca.v", init_linear(rng, d, d));
            ps.add(p + "ca.o", Tensor::matrix(d, d, 0.0));   // zero-init graft junction
            add_layer_norm(ps, p + "ln3", d);
            ps.add(p + "cv.q", init_linear(rng, d, d));
            ps.add(p + "cv.k", init_linear(rng, d, d));
            ps.add(p + "cv.v", init_linear(rng, d, d));
            ps.add(p + "cv.o", Tensor::matrix(d, d, 0.0));   // zero-init: identity at init
            add_layer_norm(ps, p + "ln4", d);
            add_linear(ps, rng, p + "ffn1", d, cfg.ffn_hidden);
            add_linear(ps, rng, p + "ffn2", cfg.ffn_hidden, d);
        }
        add_linear(ps, rng, "base.up1", d, 4 * cfg.c1);
        add_linear(ps, rng, "base.up2", cfg.c1, 12);
        init_condition_encoders(ps, rng, cfg.cond);
    }

    // Standalone cross-view attention over a bundle (Q/K/V/O shared across
    // views); exact identity when the output projection is zero.
    ViewBundle cross_view_attend(Tape& tp, Binding& bind, const ViewBundle& in,
                                 const std::string& prefix = "base.") const {
        const double inv_sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        const int V = static_cast<int>(in.views.size());
        if (V < 2) throw std::invalid_argument("cross_view_attend: need V >= 2");
        std::vector<Ref> q(V), k(V), v(V);
        for (int i = 0; i < V; ++i) {
            Ref x = layer_norm_p(tp, bind, in.views[i], prefix + "ln3");
            q[i] = tp.matmul(x, bind(prefix + "cv.q"));
            k[i] = tp.matmul(x, bind(prefix + "cv.k"));
            v[i] = tp.matmul(x, bind(prefix + "cv.v"));
        }
        ViewBundle out;
        out.neighbors = in.neighbors;
        for (int i = 0; i < V; ++i) {
            Ref acc = in.views[i];
            for (int nb : {in.neighbors[i].first, in.neighbors[i].second}) {
                if (nb < 0) continue;
                Ref att = attention_core(tp, q[i], k[nb], v[nb], inv_sd);
                acc = tp.add(acc, tp.matmul(att, bind(prefix + "cv.o")));
            }
            out.views.push_back(acc);
        }
        return out;
    }

    // x_t per view [image*image x 3] -> predicted noise per view, same shape
    std::vector<Ref> predict(Tape& tp, Binding& bind, const std::vector<Ref>& x_t, int t,
                             const CondTokens& cond, AttnCapture* capture = nullptr) const {
        const int n = cfg.image;
        const int d = cfg.d_model;
        const int V = static_cast<int>(x_t.size());
        if (V != static_cast<int>(cond.base.size())) {
            throw std::invalid_argument("predict: view count mismatch between x_t and conditions");
        }
        const double inv_sd = 1.0 / std::sqrt(static_cast<double>(d));

        Ref temb = linear(tp, bind, tp.leaf(sin_scalar_embedding(t, d)), "base.temb.w", "base.temb.b");
        Ref pos = tp.leaf(sin_position_embedding(cfg.tokens(), d));
        // timestep-dependent gain on the skip branch: the map from the image's
        // high-frequency content to the predicted noise scales like
        // 1/sqrt(1 - abar_t), which an additive embedding cannot express
        Ref skip_gate = tp.add_scalar(linear(tp, bind, temb, "base.skipg.w", "base.skipg.b"), 1.0);

        // downsample each view to the token grid; the half-resolution
        // activations feed a skip into the upsample path so high-frequency
        // content is not squeezed through the token bottleneck
        std::vector<Ref> h(V), skip(V);
        for (int i = 0; i < V; ++i) {
            if (tp.val(x_t[i]).rows() != n * n || tp.val(x_t[i]).cols() != 3) {
                throw std::invalid_argument("predict: view shape mismatch");
            }
            Ref z = space_to_depth(tp, x_t[i], n, n, 3, 2);
            z = tp.tanh_(linear(tp, bind, z, "base.down1.w", "base.down1.b"));
            skip[i] = z;
            z = space_to_depth(tp, z, n / 2, n / 2, cfg.c1, 2);
            z = linear(tp, bind, z, "base.down2.w", "base.down2.b");
            z = tp.add(z, pos);
            z = tp.bcast_row_add(z, temb);
            h[i] = z;
        }

        if (capture) {
            capture->cond_probs.clear();
            capture->base_len = cfg.cond.base_len();
            capture->place_tokens = cond.place_active ? cfg.cond.place_tokens : 0;
            capture->views = V;
        }
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string p = cfg.block_prefix(b);
            const std::string g = cfg.graft_prefix(b);

            // self-attention (weights shared across views)
            for (int i = 0; i < V; ++i) {
                Ref x = layer_norm_p(tp, bind, h[i], p + "ln1");
                Ref att = attention_core(tp, tp.matmul(x, bind(p + "sa.q")),
                                         tp.matmul(x, bind(p + "sa.k")),
                                         tp.matmul(x, bind(p + "sa.v")), inv_sd);
                h[i] = tp.add(h[i], tp.matmul(att, bind(p + "sa.o")));
            }

            // condition cross-attention; place tokens join through the
            // controller's decoupled key/value projections when grafted
            for (int i = 0; i < V; ++i) {
                Ref x = layer_norm_p(tp, bind, h[i], p + "ln2");
                Ref q = tp.matmul(x, bind(p + "ca.q"));
                Ref k = tp.matmul(cond.base[i], bind(p + "ca.k"));
                Ref v = tp.matmul(cond.base[i], bind(p + "ca.v"));
                if (cond.place_active) {
                    k = tp.concat_rows({k, tp.matmul(cond.place, bind(g + "kp"))});
                    v = tp.concat_rows({v, tp.matmul(cond.place, bind(g + "vp"))});
                }
                Tensor probs;
                Ref att = attention_core(tp, q, k, v, inv_sd, capture ? &probs : nullptr);
                if (capture) capture->cond_probs.push_back(std::move(probs));
                h[i] = tp.add(h[i], tp.matmul(att, bind(p + "ca.o")));
            }

            // cross-view attention
            ViewBundle bundle;
            bundle.views = h;
            bundle.neighbors = cyclic_neighbors(V);
            bundle = cross_view_attend(tp, bind, bundle, p);
            h = bundle.views;

            // feed-forward
            for (int i = 0; i < V; ++i) {
                Ref x = layer_norm_p(tp, bind, h[i], p + "ln4");
                x = tp.tanh_(linear(tp, bind, x, p + "ffn1.w", p + "ffn1.b"));
                h[i] = tp.add(h[i], linear(tp, bind, x, p + "ffn2.w", p + "ffn2.b"));
            }
        }

        // upsample back to pixels
        std::vector<Ref> out(V);
        for (int i = 0; i < V; ++i) {
            Ref z = linear(tp, bind, h[i], "base.up1.w", "base.up1.b");
            z = depth_to_space(tp, z, n / 2, n / 2, cfg.c1, 2);
            z = tp.tanh_(tp.add(z, tp.bcast_row_mul(skip[i], skip_gate)));
            z = linear(tp, bind, z, "base.up2.w", "base.up2.b");
            out[i] = depth_to_space(tp, z, n, n, 3, 2);
        }
        return out;
    }
};

// Attention mass assigned to the place-token columns, one value per spatial
// token, upsampled to a per-pixel grid. Requires a place-grafted forward.
inline Tensor place_attention_mass(const AttnCapture& cap, int view, int image) {
    if (cap.place_tokens == 0) throw std::runtime_error("attention maps: controller disabled");
    if (cap.views <= 0 || view < 0 || view >= cap.views) {
        throw std::out_of_range("attention maps: view index out of range");
    }
    const int blocks = static_cast<int>(cap.cond_probs.size()) / cap.views;
    const int n_tok = cap.cond_probs.at(view).rows();
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_tok))));
    const int f = image / grid;
    Tensor mass = Tensor::matrix(image * image, 1);
    for (int ty = 0; ty < grid; ++ty) {
        for (int tx = 0; tx < grid; ++tx) {
            double m = 0.0;
            for (int b = 0; b < blocks; ++b) {
                const Tensor& probs = cap.cond_probs.at(b * cap.views + view);
                for (int j = 0; j < cap.place_tokens; ++j) {
                    m += probs.at(ty * grid + tx, cap.base_len + j);
                }
            }
            m /= blocks;   // mean over blocks
            for (int dy = 0; dy < f; ++dy) {
                for (int dx = 0; dx < f; ++dx) {
                    mass.data[(ty * f + dy) * image + tx * f + dx] = m;
                }
            }
        }
    }
    return mass;
}

}  // namespace placediff
