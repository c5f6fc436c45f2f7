#include <gtest/gtest.h>

#include <cmath>

#include "placediff/controller.hpp"
#include "placediff/gradcheck.hpp"

using namespace placediff;

namespace {

ControllerConfig micro_ctrl(int d_place = 8, int d_model = 8) {
    ControllerConfig c;
    c.d_place = d_place;
    c.d_model = d_model;
    c.proj_hidden = 16;
    c.perceiver_inner = 12;
    return c;
}

// independent long-double evaluation of -(1/N) sum_ij T_ij log S_ij
double softclip_oracle(const Tensor& t, const Tensor& p, double tau) {
    const int n = t.rows(), d = t.cols();
    auto row_softmax = [&](const Tensor& a, int i) {
        std::vector<long double> r(n);
        long double mx = -1e300L;
        for (int j = 0; j < n; ++j) {
            long double dot = 0.0L;
            for (int c = 0; c < d; ++c) dot += static_cast<long double>(a.at(i, c)) * t.at(j, c);
            r[j] = dot / tau;
            mx = std::max(mx, r[j]);
        }
        long double z = 0.0L;
        for (int j = 0; j < n; ++j) z += (r[j] = std::exp(r[j] - mx));
        for (int j = 0; j < n; ++j) r[j] /= z;
        return r;
    };
    long double loss = 0.0L;
    for (int i = 0; i < n; ++i) {
        auto T = row_softmax(t, i);
        auto S = row_softmax(p, i);
        for (int j = 0; j < n; ++j) loss -= T[j] * std::log(S[j]);
    }
    return static_cast<double>(loss / n);
}

Tensor random_unit_rows(Rng& rng, int n, int d) {
    Tensor t = rng.normal_tensor({n, d});
    for (int i = 0; i < n; ++i) {
        double nrm = 0.0;
        for (int c = 0; c < d; ++c) nrm += t.at(i, c) * t.at(i, c);
        nrm = std::sqrt(nrm);
        for (int c = 0; c < d; ++c) t.at(i, c) /= nrm;
    }
    return t;
}

// 2-D Givens rotations composed over random planes: orthogonal by construction
Tensor random_rotation(Rng& rng, int d) {
    Tensor r = Tensor::matrix(d, d);
    for (int i = 0; i < d; ++i) r.at(i, i) = 1.0;
    for (int s = 0; s < 4 * d; ++s) {
        const int a = static_cast<int>(rng.below(d));
        int b = static_cast<int>(rng.below(d));
        if (a == b) b = (b + 1) % d;
        const double th = rng.uniform(0.0, 6.28318530717958648);
        const double c = std::cos(th), sn = std::sin(th);
        for (int i = 0; i < d; ++i) {
            const double xa = r.at(i, a), xb = r.at(i, b);
            r.at(i, a) = c * xa - sn * xb;
            r.at(i, b) = sn * xa + c * xb;
        }
    }
    return r;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    mm_acc(a, b, c);
    return c;
}

}  // namespace

// ---- projector ----

TEST(Projector, ZeroEmbeddingYieldsZeroTokens) {
    for (ProjectorMode m :
         {ProjectorMode::two_linear_tanh, ProjectorMode::pure_linear, ProjectorMode::cascaded_mlp}) {
        PlaceController pc;
        pc.cfg = micro_ctrl();
        pc.cfg.mode = m;
        ParamStore ps;
        Rng rng(7);
        pc.init(ps, rng);
        Tape tp;
        Binding bind(tp, ps);
        Ref z = pc.project(tp, bind, tp.leaf(Tensor::matrix(1, pc.cfg.d_place, 0.0)));
        for (double v : tp.val(z).data) EXPECT_DOUBLE_EQ(v, 0.0);
    }
}

TEST(Projector, OutputShapeIsFourTokensByModelDim) {
    PlaceController pc;
    pc.cfg = micro_ctrl(64, 32);
    ParamStore ps;
    Rng rng(7);
    pc.init(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    Ref z = pc.project(tp, bind, tp.leaf(rng.normal_tensor({1, 64})));
    EXPECT_EQ(tp.val(z).rows(), 4);
    EXPECT_EQ(tp.val(z).cols(), 32);
}

TEST(Projector, PureLinearModeIsAdditive) {
    PlaceController pc;
    pc.cfg = micro_ctrl();
    pc.cfg.mode = ProjectorMode::pure_linear;
    ParamStore ps;
    Rng rng(5);
    pc.init(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    Tensor a = rng.normal_tensor({1, pc.cfg.d_place});
    Tensor b = rng.normal_tensor({1, pc.cfg.d_place});
    Tensor ab = a;
    for (std::size_t i = 0; i < ab.data.size(); ++i) ab.data[i] += b.data[i];
    const Tensor za = tp.val(pc.project(tp, bind, tp.leaf(a)));
    const Tensor zb = tp.val(pc.project(tp, bind, tp.leaf(b)));
    const Tensor zab = tp.val(pc.project(tp, bind, tp.leaf(ab)));
    for (std::size_t i = 0; i < zab.data.size(); ++i) {
        EXPECT_NEAR(zab.data[i], za.data[i] + zb.data[i], 1e-9);
    }
}

TEST(Projector, UnknownModeStringRejected) {
    EXPECT_THROW(projector_mode_from("mlp"), std::invalid_argument);
    EXPECT_EQ(projector_mode_from("cascaded_mlp"), ProjectorMode::cascaded_mlp);
    EXPECT_STREQ(projector_mode_name(ProjectorMode::pure_linear), "pure_linear");
}

// ---- reference masking ----

TEST(MaskReference, NoBoxesNoSkyIsIdentity) {
    Rng rng(3);
    Tensor img = rng.uniform_tensor({32 * 32, 3}, 0.0, 1.0);
    EXPECT_EQ(mask_reference(img, {}, 0).data, img.data);
}

TEST(MaskReference, FullImageBoxZeroesEverything) {
    Rng rng(3);
    Tensor img = rng.uniform_tensor({32 * 32, 3}, 0.0, 1.0);
    Tensor out = mask_reference(img, {{0, 0, 32, 32}}, 0);
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(MaskReference, PixelCountOracle) {
    // one 4x4 box at (10, 6) on 32x32 with sky_rows = 8: the box overlaps the
    // sky band by 4x2 pixels, so zeroed = 8*32 + 16 - 8
    Tensor img = Tensor({32 * 32, 3}, 1.0);
    Tensor out = mask_reference(img, {{10, 6, 4, 4}}, 8);
    int zeroed = 0;
    for (int pix = 0; pix < 32 * 32; ++pix) {
        const bool z = out.data[pix * 3] == 0.0;
        EXPECT_EQ(out.data[pix * 3 + 1] == 0.0, z);
        EXPECT_EQ(out.data[pix * 3 + 2] == 0.0, z);
        if (z) ++zeroed;
        else EXPECT_DOUBLE_EQ(out.data[pix * 3], 1.0);
    }
    EXPECT_EQ(zeroed, 8 * 32 + 16 - 8);
}

TEST(MaskReference, Idempotent) {
    Rng rng(9);
    Tensor img = rng.uniform_tensor({16 * 16, 3}, 0.0, 1.0);
    Tensor once = mask_reference(img, {{3, 5, 4, 4}}, 2);
    Tensor twice = mask_reference(once, {{3, 5, 4, 4}}, 2);
    EXPECT_EQ(once.data, twice.data);
}

TEST(MaskReference, OutOfBoundsBoxClampedToEquivalent) {
    Rng rng(9);
    Tensor img = rng.uniform_tensor({16 * 16, 3}, 0.0, 1.0);
    Tensor clamped = mask_reference(img, {{12, 12, 10, 10}}, 0);
    Tensor manual = mask_reference(img, {{12, 12, 4, 4}}, 0);
    EXPECT_EQ(clamped.data, manual.data);
}

// ---- attribute encoder ----

TEST(AttributeEncoderT, FrozenAndDeterministic) {
    AttributeEncoder ae;
    ParamStore ps;
    Rng rng(17);
    ae.init(ps, rng);
    for (const auto& e : ps.entries()) EXPECT_TRUE(e.frozen) << e.name;

    Rng irng(5);
    Tensor img = irng.uniform_tensor({32 * 32, 3}, 0.0, 1.0);
    EXPECT_EQ(ae.tokens(ps, img).data, ae.tokens(ps, img).data);
    EXPECT_EQ(ae.tokens(ps, img).rows(), ae.cfg.tokens());
    EXPECT_EQ(ae.tokens(ps, img).cols(), ae.cfg.d_attr);

    const Tensor zero = Tensor({32 * 32, 3}, 0.0);
    EXPECT_EQ(ae.pooled(ps, zero).data, ae.pooled(ps, zero).data);

    const Tensor p = ae.pooled(ps, img);
    double nrm = 0.0;
    for (double v : p.data) nrm += v * v;
    EXPECT_NEAR(std::sqrt(nrm), 1.0, 1e-9);
}

// ---- perceiver ----

TEST(Perceiver, ExactIdentityAtZeroInit) {
    PlaceController pc;
    pc.cfg = micro_ctrl();
    ParamStore ps;
    Rng rng(23);
    pc.init(ps, rng);
    Tape tp;
    Binding bind(tp, ps);
    Ref z = tp.leaf(rng.normal_tensor({pc.cfg.n_tokens, pc.cfg.d_model}));
    Ref c = tp.leaf(rng.normal_tensor({6, pc.cfg.d_model}));
    Ref out = pc.refine(tp, bind, z, c);
    EXPECT_EQ(tp.val(out).data, tp.val(z).data);
}

TEST(Perceiver, SingleAttributeTokenClosedForm) {
    // one layer, inner dim = model dim, identity W_v, zero biases: softmax
    // over the lone key is 1, so each token becomes z_i + (c W_v) O
    PlaceController pc;
    pc.cfg = micro_ctrl();
    pc.cfg.perceiver_layers = 1;
    pc.cfg.perceiver_inner = pc.cfg.d_model;
    const int d = pc.cfg.d_model;
    ParamStore ps;
    Rng rng(29);
    pc.init(ps, rng);
    Tensor eye = Tensor::matrix(d, d);
    for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    ps.value("ctrl.perc0.wv.w") = eye;
    Tensor o = rng.normal_tensor({d, d});
    ps.value("ctrl.perc0.out.w") = o;

    Tape tp;
    Binding bind(tp, ps);
    Tensor zt = rng.normal_tensor({pc.cfg.n_tokens, d});
    Tensor ct = rng.normal_tensor({1, d});
    Ref out = pc.refine(tp, bind, tp.leaf(zt), tp.leaf(ct));

    const Tensor co = matmul_plain(ct, o);   // (c W_v) OutProj, shared by every token
    for (int i = 0; i < pc.cfg.n_tokens; ++i) {
        for (int j = 0; j < d; ++j) {
            EXPECT_NEAR(tp.val(out).at(i, j), zt.at(i, j) + co.data[j], 1e-12);
        }
    }
}

// ---- SoftCLIP ----

TEST(SoftClip, GibbsBoundAndEqualityAtTeacher) {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(6));
        const int d = 4 + static_cast<int>(rng.below(8));
        const double tau = 0.07 + 0.4 * rng.uniform(0.0, 1.0);
        Tensor t = random_unit_rows(rng, n, d);
        Tensor p = random_unit_rows(rng, n, d);

        Tape tp;
        const double loss = tp.val(softclip_loss(tp, tp.leaf(p), t, tau)).data[0];
        const double entropy = softclip_teacher_entropy(t, tau);
        EXPECT_GE(loss, entropy - 1e-12);
        EXPECT_NEAR(loss, softclip_oracle(t, p, tau), 1e-12);

        Tape tp2;
        const double at_min = tp2.val(softclip_loss(tp2, tp2.leaf(t), t, tau)).data[0];
        EXPECT_NEAR(at_min, entropy, 1e-12);
    }
}

TEST(SoftClip, IdenticalEmbeddingsGiveLogN) {
    const int n = 5, d = 6;
    Tensor t = Tensor::matrix(n, d);
    for (int i = 0; i < n; ++i) t.at(i, 0) = 1.0;   // all rows the same unit vector
    Tape tp;
    const double loss = tp.val(softclip_loss(tp, tp.leaf(t), t, 0.07)).data[0];
    EXPECT_NEAR(loss, std::log(static_cast<double>(n)), 1e-12);
}

TEST(SoftClip, NEquals2ClosedForm) {
    Tensor t = Tensor::matrix(2, 2);
    t.at(0, 0) = 1.0;
    t.at(1, 1) = 1.0;
    Tape tp;
    const double loss = tp.val(softclip_loss(tp, tp.leaf(t), t, 1.0)).data[0];

    // teacher row = softmax(1, 0)
    const double a = 1.0 / (1.0 + std::exp(-1.0));
    EXPECT_NEAR(a, 0.7311, 1e-4);
    EXPECT_NEAR(1.0 - a, 0.2689, 1e-4);
    const double entropy = -(a * std::log(a) + (1.0 - a) * std::log(1.0 - a));
    EXPECT_NEAR(loss, entropy, 1e-12);
    EXPECT_NEAR(loss, 0.5822030, 1e-6);   // brute-force oracle value
    EXPECT_NEAR(loss, softclip_oracle(t, t, 1.0), 1e-15);
}

TEST(SoftClip, InvariantUnderCommonRotation) {
    Rng rng(55);
    const int n = 4, d = 8;
    Tensor t = random_unit_rows(rng, n, d);
    Tensor p = random_unit_rows(rng, n, d);
    Tensor r = random_rotation(rng, d);
    Tensor tr = matmul_plain(t, r);
    Tensor pr = matmul_plain(p, r);

    Tape tp;
    const double base = tp.val(softclip_loss(tp, tp.leaf(p), t, 0.07)).data[0];
    Tape tp2;
    const double rot = tp2.val(softclip_loss(tp2, tp2.leaf(pr), tr, 0.07)).data[0];
    EXPECT_NEAR(base, rot, 1e-9);
}

TEST(SoftClip, RejectsDegenerateBatches) {
    Tensor one = Tensor::matrix(1, 3);
    one.at(0, 0) = 1.0;
    Tape tp;
    EXPECT_THROW(softclip_loss(tp, tp.leaf(one), one, 0.07), std::invalid_argument);

    Tensor two = Tensor::matrix(2, 3);
    two.at(0, 0) = 1.0;
    two.at(1, 1) = 1.0;
    EXPECT_THROW(softclip_loss(tp, tp.leaf(two), two, 0.0), std::invalid_argument);
    EXPECT_THROW(softclip_loss(tp, tp.leaf(two), two, -1.0), std::invalid_argument);

    Tensor unnorm = two;
    unnorm.at(0, 0) = 2.0;
    EXPECT_THROW(softclip_loss(tp, tp.leaf(two), unnorm, 0.07), std::invalid_argument);
}

// ---- total loss ----

TEST(TotalLoss, WeightingArithmetic) {
    Tape tp;
    Ref base = tp.leaf(Tensor::scalar(1.0));
    Ref sc = tp.leaf(Tensor::scalar(0.5));
    EXPECT_DOUBLE_EQ(tp.val(total_loss(tp, base, sc, 0.0)).data[0], 1.0);
    EXPECT_DOUBLE_EQ(tp.val(total_loss(tp, base, sc, 0.1)).data[0], 1.05);
}

TEST(TotalLoss, GradientIsLinearCombinationAndPassesFiniteDifferences) {
    // end-to-end: projector -> perceiver -> pooled softclip embedding, base
    // term = squared deviation of the tokens from a fixed target
    PlaceController pc;
    pc.cfg = micro_ctrl();
    ParamStore ps;
    Rng rng(61);
    pc.init(ps, rng);
    // perturb the zero-initialized projections so their gradients are generic
    for (auto& e : ps.entries()) {
        for (double& v : e.value.data) v += rng.uniform(-0.05, 0.05);
    }

    const Tensor e_place = rng.normal_tensor({1, pc.cfg.d_place});
    const Tensor c_tok = rng.normal_tensor({5, pc.cfg.d_model});
    const Tensor target = rng.normal_tensor({pc.cfg.n_tokens, pc.cfg.d_model});
    Tensor teacher = random_unit_rows(rng, 3, pc.cfg.d_model);
    const double lambda = 0.1;

    // mode 0: total, 1: base only, 2: softclip only
    auto make = [&](int mode) {
        return [&, mode](ParamStore& p, bool with_grad) {
            Tape tp;
            Binding bind(tp, p);
            Ref z = pc.tokens(tp, bind, tp.leaf(e_place), tp.leaf(c_tok));
            Ref d = tp.sub(z, tp.leaf(target));
            Ref base = tp.mean_all(tp.mul(d, d));
            std::vector<Ref> emb;
            for (int i = 0; i < 3; ++i) {
                Ref zi = pc.tokens(tp, bind, tp.leaf(e_place), tp.slice_rows(tp.leaf(c_tok), i, 1));
                emb.push_back(pc.softclip_embed(tp, bind, zi));
            }
            Ref sc = softclip_loss(tp, tp.concat_rows(emb), teacher, 0.07);
            Ref loss = (mode == 0) ? total_loss(tp, base, sc, lambda) : (mode == 1 ? base : sc);
            if (with_grad) {
                tp.backward(loss);
                bind.harvest();
            }
            return tp.val(loss).data[0];
        };
    };

    Rng coord_rng(99);
    auto rep = grad_check(make(0), ps, 1e-5, 1e-4, coord_rng, 3);
    EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;

    // grad(total) = grad(base) + lambda * grad(softclip)
    ps.zero_grad();
    make(0)(ps, true);
    std::vector<std::vector<double>> g_total;
    for (auto& e : ps.entries()) g_total.push_back(e.grad.data);
    ps.zero_grad();
    make(1)(ps, true);
    std::vector<std::vector<double>> g_base;
    for (auto& e : ps.entries()) g_base.push_back(e.grad.data);
    ps.zero_grad();
    make(2)(ps, true);
    std::size_t k = 0;
    for (auto& e : ps.entries()) {
        for (std::size_t i = 0; i < e.grad.data.size(); ++i) {
            EXPECT_NEAR(g_total[k][i], g_base[k][i] + lambda * e.grad.data[i], 1e-10);
        }
        ++k;
    }
}
