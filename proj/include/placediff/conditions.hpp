#pragma once

// Scene condition encoders: map grid, box set, weather code and camera pose
// are embedded into a shared token space and concatenated for condition
// cross-attention. The place-token slot is produced by the controller (or
// zeroed when the controller is disabled).

#include <optional>
#include <vector>

#include "nn.hpp"
#include "params.hpp"
#include "tape.hpp"
#include "toyworld.hpp"

namespace placediff {

struct SceneCondition {
    Tensor map_grid;               // [64 x 1]
    std::vector<SceneBox> boxes;
    Weather weather = Weather::clear;
    double pano_offset = 0.0;
    int views = 3;
    Tensor place_embedding;        // [1 x D_place]; empty when unconditioned

    bool has_place() const { return !place_embedding.data.empty(); }
};

inline SceneCondition condition_of(const RenderedScene& sc, int views, Tensor place_embedding = {}) {
    SceneCondition c;
    c.map_grid = sc.map_grid;
    c.boxes = sc.spec.boxes;
    c.weather = sc.spec.weather;
    c.pano_offset = sc.spec.pano_offset;
    c.views = views;
    c.place_embedding = std::move(place_embedding);
    return c;
}

struct CondConfig {
    int d_model = 32;
    int map_tokens = 4;
    int box_max = 4;
    int place_tokens = 4;
    int image = 32;
    int period = 128;
    int view_stride = 24;

    int base_len() const { return map_tokens + box_max + 2; }
    int full_len() const { return base_len() + place_tokens; }
};

inline void init_condition_encoders(ParamStore& ps, Rng& rng, const CondConfig& cc) {
    add_linear(ps, rng, "base.cond.map", 64, cc.map_tokens * cc.d_model);
    add_linear(ps, rng, "base.cond.box", 3 + 4 * 3, cc.d_model);
    ps.add("base.cond.null", init_linear(rng, 1, cc.d_model));        // learned pad token
    ps.add("base.cond.weather", init_linear(rng, 3, cc.d_model));     // one row per code
    add_linear(ps, rng, "base.cond.cam", cc.d_model, cc.d_model);
}

// Per-view token sequences. `place` carries the controller-produced tokens
// for every view (shared), or zeros when the controller is off.
struct CondTokens {
    std::vector<Ref> base;   // per view: [base_len x d]
    Ref place = -1;          // [place_tokens x d]
    bool place_active = false;
};

// box feature: class one-hot plus per-view rects normalized to [0,1]
inline Tensor box_features(const SceneBox& b, const CondConfig& cc, int views) {
    Tensor f = Tensor::matrix(1, 3 + 4 * 3);
    f.data[static_cast<int>(b.cls)] = 1.0;
    for (int v = 0; v < std::min(views, 3); ++v) {
        const ViewRect r = v < static_cast<int>(b.rects.size()) ? b.rects[v] : ViewRect{};
        f.data[3 + 4 * v + 0] = static_cast<double>(r.x0) / cc.image;
        f.data[3 + 4 * v + 1] = static_cast<double>(r.y0) / cc.image;
        f.data[3 + 4 * v + 2] = static_cast<double>(r.w) / cc.image;
        f.data[3 + 4 * v + 3] = static_cast<double>(r.h) / cc.image;
    }
    return f;
}

// `place_tokens_ref` < 0 means controller disabled: the slot is zeroed.
inline CondTokens encode_conditions(Tape& tp, Binding& bind, const SceneCondition& cond,
                                    const CondConfig& cc, Ref place_tokens_ref = -1) {
    if (static_cast<int>(cond.boxes.size()) > cc.box_max) {
        throw std::invalid_argument("encode_conditions: too many boxes");
    }
    const int wcode = static_cast<int>(cond.weather);
    if (wcode < 0 || wcode > 2) throw std::invalid_argument("encode_conditions: unknown weather code");

    // map tokens
    Ref map_flat = tp.reshape(tp.leaf(cond.map_grid), {1, 64});
    Ref map_tok = tp.reshape(linear(tp, bind, map_flat, "base.cond.map.w", "base.cond.map.b"),
                             {cc.map_tokens, cc.d_model});

    // box tokens, padded with the learned null token
    std::vector<Ref> box_toks;
    for (const auto& b : cond.boxes) {
        Ref f = tp.leaf(box_features(b, cc, cond.views));
        box_toks.push_back(linear(tp, bind, f, "base.cond.box.w", "base.cond.box.b"));
    }
    for (int i = static_cast<int>(cond.boxes.size()); i < cc.box_max; ++i) {
        box_toks.push_back(bind("base.cond.null"));
    }

    // weather token
    Ref wtok = tp.slice_rows(bind("base.cond.weather"), wcode, 1);

    CondTokens out;
    for (int v = 0; v < cond.views; ++v) {
        // camera token: sinusoidal features of this view's panorama angle
        const double angle = 2.0 * 3.14159265358979323846 *
                             (cond.pano_offset + v * cc.view_stride) / cc.period;
        Ref cam = tp.leaf(sin_scalar_embedding(angle, cc.d_model, 100.0));
        Ref cam_tok = linear(tp, bind, cam, "base.cond.cam.w", "base.cond.cam.b");
        std::vector<Ref> parts = {map_tok};
        for (Ref b : box_toks) parts.push_back(b);
        parts.push_back(wtok);
        parts.push_back(cam_tok);
        out.base.push_back(tp.concat_rows(parts));
    }
    if (place_tokens_ref >= 0) {
        out.place = place_tokens_ref;
        out.place_active = true;
    } else {
        out.place = tp.leaf(Tensor::matrix(cc.place_tokens, cc.d_model, 0.0));
        out.place_active = false;
    }
    return out;
}

}  // namespace placediff
