#include <gtest/gtest.h>

#include <cmath>

#include "placediff/conditions.hpp"
#include "placediff/denoiser.hpp"
#include "placediff/gradcheck.hpp"

using namespace placediff;

namespace {

DenoiserConfig micro_cfg(int image, int d) {
    DenoiserConfig cfg;
    cfg.image = image;
    cfg.d_model = d;
    cfg.c1 = d / 2;
    cfg.ffn_hidden = 2 * d;
    cfg.cond.d_model = d;
    cfg.cond.image = image;
    return cfg;
}

SceneCondition micro_cond(int views, double pano = 0.0) {
    SceneCondition c;
    c.map_grid = Tensor::matrix(64, 1);
    for (int i = 0; i < 64; ++i) c.map_grid.data[i] = (i % 5 == 0) ? 1.0 : 0.0;
    c.weather = Weather::clear;
    c.pano_offset = pano;
    c.views = views;
    return c;
}

SceneBox make_box(BoxClass cls, int x0, int y0, int w, int h) {
    SceneBox b;
    b.cls = cls;
    b.u0 = x0;
    b.v0 = y0;
    b.w = w;
    b.h = h;
    b.rects = {{x0, y0, w, h}, {}, {}};
    return b;
}

}  // namespace

TEST(Denoiser, OutputShapeMatchesInputForAnyViewCountAndSize) {
    for (int V : {2, 3}) {
        for (int image : {8, 16, 32}) {
            Denoiser dn{micro_cfg(image, 16)};
            ParamStore ps;
            Rng rng(11);
            dn.init_base(ps, rng);
            Tape tp;
            Binding bind(tp, ps);
            std::vector<Ref> x;
            for (int v = 0; v < V; ++v) x.push_back(tp.leaf(rng.normal_tensor({image * image, 3})));
            CondTokens ct = encode_conditions(tp, bind, micro_cond(V), dn.cfg.cond);
            auto out = dn.predict(tp, bind, x, 3, ct);
            ASSERT_EQ(static_cast<int>(out.size()), V);
            for (int v = 0; v < V; ++v) {
                EXPECT_EQ(tp.val(out[v]).rows(), image * image);
                EXPECT_EQ(tp.val(out[v]).cols(), 3);
            }
        }
    }
}

TEST(CrossView, ZeroOutputProjectionIsExactIdentity) {
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(4);
    dn.init_base(ps, rng);   // base.cv.o starts at zero
    Tape tp;
    Binding bind(tp, ps);
    ViewBundle in;
    for (int v = 0; v < 3; ++v) in.views.push_back(tp.leaf(rng.normal_tensor({5, 16})));
    in.neighbors = cyclic_neighbors(3);
    ViewBundle out = dn.cross_view_attend(tp, bind, in);
    for (int v = 0; v < 3; ++v) {
        EXPECT_EQ(tp.val(out.views[v]).data, tp.val(in.views[v]).data);
    }
}

// single token, identical views, identity projections: softmax over the lone
// key is 1, so each view becomes x + x + x (up to the layer-norm epsilon)
TEST(CrossView, SingleTokenIdentityProjectionsTriplesInput) {
    const int d = 8;
    Denoiser dn{micro_cfg(8, d)};
    ParamStore ps;
    add_layer_norm(ps, "base.ln3", d);
    Tensor eye = Tensor::matrix(d, d);
    for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    ps.add("base.cv.q", eye);
    ps.add("base.cv.k", eye);
    ps.add("base.cv.v", eye);
    ps.add("base.cv.o", eye);

    // a zero-mean, unit-variance row is its own layer norm
    Rng rng(9);
    Tensor x = rng.normal_tensor({1, d});
    double mu = 0.0;
    for (double v : x.data) mu += v / d;
    double var = 0.0;
    for (double& v : x.data) {
        v -= mu;
        var += v * v / d;
    }
    for (double& v : x.data) v /= std::sqrt(var);

    Tape tp;
    Binding bind(tp, ps);
    ViewBundle in;
    Ref xr = tp.leaf(x);
    in.views = {xr, xr, xr};
    in.neighbors = cyclic_neighbors(3);
    ViewBundle out = dn.cross_view_attend(tp, bind, in);
    for (int v = 0; v < 3; ++v) {
        for (int j = 0; j < d; ++j) {
            EXPECT_NEAR(tp.val(out.views[v]).data[j], 3.0 * x.data[j], 1e-4);
        }
    }
}

TEST(CrossView, FewerThanTwoViewsRejected) {
    EXPECT_THROW(cyclic_neighbors(1), std::invalid_argument);
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(4);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    ViewBundle in;
    in.views = {tp.leaf(rng.normal_tensor({4, 16}))};
    EXPECT_THROW(dn.cross_view_attend(tp, bind, in), std::invalid_argument);
}

TEST(Denoiser, EquivariantUnderCyclicViewRotation) {
    const int image = 8;
    Denoiser dn{micro_cfg(image, 16)};
    ParamStore ps;
    Rng rng(21);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    std::vector<Ref> x;
    for (int v = 0; v < 3; ++v) x.push_back(tp.leaf(rng.normal_tensor({image * image, 3})));
    CondTokens ct = encode_conditions(tp, bind, micro_cond(3), dn.cfg.cond);

    auto out = dn.predict(tp, bind, x, 7, ct);

    std::vector<Ref> xr = {x[1], x[2], x[0]};
    CondTokens ctr = ct;
    ctr.base = {ct.base[1], ct.base[2], ct.base[0]};
    auto out_rot = dn.predict(tp, bind, xr, 7, ctr);

    for (int v = 0; v < 3; ++v) {
        EXPECT_EQ(tp.val(out_rot[v]).data, tp.val(out[(v + 1) % 3]).data);
    }
}

TEST(Denoiser, BoxPermutationLeavesOutputUnchanged) {
    const int image = 8;
    Denoiser dn{micro_cfg(image, 16)};
    ParamStore ps;
    Rng rng(31);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    std::vector<Ref> x;
    for (int v = 0; v < 2; ++v) x.push_back(tp.leaf(rng.normal_tensor({image * image, 3})));

    SceneCondition cond = micro_cond(2);
    cond.boxes = {make_box(BoxClass::car, 1, 2, 3, 3), make_box(BoxClass::pedestrian, 4, 4, 2, 3)};
    CondTokens ct = encode_conditions(tp, bind, cond, dn.cfg.cond);
    std::swap(cond.boxes[0], cond.boxes[1]);
    CondTokens ct2 = encode_conditions(tp, bind, cond, dn.cfg.cond);

    auto a = dn.predict(tp, bind, x, 5, ct);
    auto b = dn.predict(tp, bind, x, 5, ct2);
    for (int v = 0; v < 2; ++v) {
        const auto& ta = tp.val(a[v]);
        const auto& tb = tp.val(b[v]);
        for (std::size_t i = 0; i < ta.data.size(); ++i) {
            EXPECT_NEAR(ta.data[i], tb.data[i], 1e-9);
        }
    }
}

TEST(Conditions, ZeroBoxesPadWithNullToken) {
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(2);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    CondTokens ct = encode_conditions(tp, bind, micro_cond(2), dn.cfg.cond);
    const Tensor& null_tok = ps.value("base.cond.null");
    const Tensor& base = tp.val(ct.base[0]);
    const CondConfig& cc = dn.cfg.cond;
    for (int s = 0; s < cc.box_max; ++s) {
        for (int j = 0; j < cc.d_model; ++j) {
            EXPECT_DOUBLE_EQ(base.at(cc.map_tokens + s, j), null_tok.data[j]);
        }
    }
}

TEST(Conditions, TokenSequenceLengths) {
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(2);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    const CondConfig& cc = dn.cfg.cond;
    EXPECT_EQ(cc.base_len(), cc.map_tokens + cc.box_max + 2);
    EXPECT_EQ(cc.full_len(), cc.base_len() + 4);

    CondTokens ct = encode_conditions(tp, bind, micro_cond(3), cc);
    EXPECT_EQ(static_cast<int>(ct.base.size()), 3);
    for (Ref b : ct.base) EXPECT_EQ(tp.val(b).rows(), cc.base_len());
    EXPECT_EQ(tp.val(ct.place).rows(), cc.place_tokens);
    EXPECT_FALSE(ct.place_active);

    Ref place = tp.leaf(rng.normal_tensor({cc.place_tokens, cc.d_model}));
    CondTokens ct2 = encode_conditions(tp, bind, micro_cond(3), cc, place);
    EXPECT_TRUE(ct2.place_active);
    EXPECT_EQ(tp.val(ct2.place).rows(), 4);
}

TEST(Conditions, UnknownWeatherAndTooManyBoxesRejected) {
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(2);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    SceneCondition bad = micro_cond(2);
    bad.weather = static_cast<Weather>(9);
    EXPECT_THROW(encode_conditions(tp, bind, bad, dn.cfg.cond), std::invalid_argument);
    SceneCondition crowded = micro_cond(2);
    for (int i = 0; i < dn.cfg.cond.box_max + 1; ++i) {
        crowded.boxes.push_back(make_box(BoxClass::car, 0, 0, 2, 2));
    }
    EXPECT_THROW(encode_conditions(tp, bind, crowded, dn.cfg.cond), std::invalid_argument);
}

TEST(Attention, CaptureRowsStochasticAndPlaceMassBounded) {
    const int image = 8;
    Denoiser dn{micro_cfg(image, 16)};
    ParamStore ps;
    Rng rng(13);
    dn.init_base(ps, rng);
    ps.add("ctrl.xattn.kp", init_linear(rng, 16, 16));
    ps.add("ctrl.xattn.vp", init_linear(rng, 16, 16));
    Tape tp;
    Binding bind(tp, ps);
    std::vector<Ref> x;
    for (int v = 0; v < 2; ++v) x.push_back(tp.leaf(rng.normal_tensor({image * image, 3})));
    Ref place = tp.leaf(rng.normal_tensor({4, 16}));
    CondTokens ct = encode_conditions(tp, bind, micro_cond(2), dn.cfg.cond, place);

    AttnCapture cap;
    dn.predict(tp, bind, x, 2, ct, &cap);
    ASSERT_EQ(static_cast<int>(cap.cond_probs.size()), 2);
    EXPECT_EQ(cap.place_tokens, 4);
    for (const Tensor& probs : cap.cond_probs) {
        EXPECT_EQ(probs.cols(), dn.cfg.cond.full_len());
        for (int r = 0; r < probs.rows(); ++r) {
            double s = 0.0;
            for (int c = 0; c < probs.cols(); ++c) s += probs.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
    Tensor mass = place_attention_mass(cap, 0, image);
    EXPECT_EQ(mass.rows(), image * image);
    for (double m : mass.data) {
        EXPECT_GE(m, 0.0);
        EXPECT_LE(m, 1.0);
    }

    // controller-disabled forward cannot produce place maps
    AttnCapture cap_off;
    CondTokens off = encode_conditions(tp, bind, micro_cond(2), dn.cfg.cond);
    dn.predict(tp, bind, x, 2, off, &cap_off);
    EXPECT_THROW(place_attention_mass(cap_off, 0, image), std::runtime_error);
}

TEST(Denoiser, ShapeMismatchBetweenViewsRejected) {
    Denoiser dn{micro_cfg(8, 16)};
    ParamStore ps;
    Rng rng(3);
    dn.init_base(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    std::vector<Ref> x = {tp.leaf(rng.normal_tensor({64, 3})), tp.leaf(rng.normal_tensor({16, 3}))};
    CondTokens ct = encode_conditions(tp, bind, micro_cond(2), dn.cfg.cond);
    EXPECT_THROW(dn.predict(tp, bind, x, 1, ct), std::invalid_argument);

    std::vector<Ref> ok = {tp.leaf(rng.normal_tensor({64, 3}))};
    EXPECT_THROW(dn.predict(tp, bind, ok, 1, ct), std::invalid_argument);
}

TEST(Denoiser, FullGradientCheckOnMicroConfig) {
    const int image = 8;
    Denoiser dn{micro_cfg(image, 16)};
    ParamStore ps;
    Rng rng(42);
    dn.init_base(ps, rng);
    ps.add("ctrl.xattn.kp", init_linear(rng, 16, 16));
    ps.add("ctrl.xattn.vp", init_linear(rng, 16, 16));

    const Tensor x0 = rng.normal_tensor({image * image, 3});
    const Tensor x1 = rng.normal_tensor({image * image, 3});
    const Tensor tgt0 = rng.normal_tensor({image * image, 3});
    const Tensor tgt1 = rng.normal_tensor({image * image, 3});
    const Tensor place = rng.normal_tensor({4, 16});
    SceneCondition cond = micro_cond(2, 5.0);
    cond.boxes = {make_box(BoxClass::truck, 1, 1, 3, 4)};

    auto f = [&](ParamStore& p, bool with_grad) {
        Tape tp;
        Binding bind(tp, p);
        CondTokens ct = encode_conditions(tp, bind, cond, dn.cfg.cond, tp.leaf(place));
        auto out = dn.predict(tp, bind, {tp.leaf(x0), tp.leaf(x1)}, 3, ct);
        Ref d0 = tp.sub(out[0], tp.leaf(tgt0));
        Ref d1 = tp.sub(out[1], tp.leaf(tgt1));
        Ref loss = tp.add(tp.mean_all(tp.mul(d0, d0)), tp.mean_all(tp.mul(d1, d1)));
        if (with_grad) {
            tp.backward(loss);
            bind.harvest();
        }
        return tp.val(loss).data[0];
    };
    Rng coord_rng(77);
    auto rep = grad_check(f, ps, 1e-5, 1e-4, coord_rng, 2);
    EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}
