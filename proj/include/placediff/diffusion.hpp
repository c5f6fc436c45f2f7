#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace placediff {

// Per-timestep constants of the forward/reverse chains. Index i holds the
// values for timestep t = i + 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma2;

    double beta_at(int t) const { return beta[check(t)]; }
    double alpha_at(int t) const { return alpha[check(t)]; }
    double alpha_bar_at(int t) const { return alpha_bar[check(t)]; }
    double sigma2_at(int t) const { return sigma2[check(t)]; }

private:
    int check(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("schedule: timestep out of range");
        return t - 1;
    }
};

// Linear beta interpolation; sigma_t^2 = beta_t.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma2.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
        s.sigma2[i] = s.beta[i];
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: eps shape mismatch");
    const double ab = s.alpha_bar_at(t);
    const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ca * x0.data[i] + cb * eps.data[i];
    return out;
}

// mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)
inline Tensor posterior_mean(const Tensor& x_t, int t, const Tensor& eps_pred, const NoiseSchedule& s) {
    if (t == 0) throw std::invalid_argument("posterior_mean: no step below t=0");
    if (!x_t.same_shape(eps_pred)) throw std::invalid_argument("posterior_mean: shape mismatch");
    const double inv_sa = 1.0 / std::sqrt(s.alpha_at(t));
    const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
    Tensor out = x_t;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = inv_sa * (x_t.data[i] - coef * eps_pred.data[i]);
    }
    out.check_finite("posterior_mean");
    return out;
}

// Conditional noise predictor over a stack of per-view images; the condition
// set is captured by the callable.
using DenoiseFn = std::function<std::vector<Tensor>(const std::vector<Tensor>& x_t, int t)>;

// Ancestral DDPM sampling from x_T ~ N(0, I); deterministic given seed.
inline std::vector<Tensor> ancestral_sample(const DenoiseFn& denoiser, const std::vector<std::vector<int>>& shapes,
                                            const NoiseSchedule& s, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> x;
    x.reserve(shapes.size());
    for (const auto& sh : shapes) x.push_back(rng.normal_tensor(sh));
    for (int t = s.T; t >= 1; --t) {
        std::vector<Tensor> eps_pred = denoiser(x, t);
        if (eps_pred.size() != x.size()) throw std::runtime_error("ancestral_sample: view count mismatch");
        for (std::size_t v = 0; v < x.size(); ++v) {
            eps_pred[v].check_finite("denoiser output");
            Tensor mu = posterior_mean(x[v], t, eps_pred[v], s);
            if (t > 1) {
                const double sig = std::sqrt(s.sigma2_at(t));
                for (auto& p : mu.data) p += sig * rng.normal();
            }
            x[v] = std::move(mu);
        }
    }
    return x;
}

// Builds the noise-prediction loss graph for one scene draw:
//   mean over views of mean((eps - eps_pred)^2)
// with t ~ U{1..T} and eps ~ N(0, I) drawn from rng. `predict` maps
// (tape, x_t leaf refs, t) to per-view prediction refs.
template <class PredictFn>
Ref base_loss_graph(Tape& tp, const std::vector<Tensor>& x0_views, const NoiseSchedule& s, Rng& rng,
                    PredictFn&& predict) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
    std::vector<Tensor> eps;
    std::vector<Ref> xt_refs;
    eps.reserve(x0_views.size());
    for (const auto& x0 : x0_views) {
        eps.push_back(rng.normal_tensor(x0.shape));
        xt_refs.push_back(tp.leaf(forward_diffuse(x0, t, eps.back(), s)));
    }
    std::vector<Ref> preds = predict(tp, xt_refs, t);
    Ref total = -1;
    for (std::size_t v = 0; v < preds.size(); ++v) {
        Ref diff = tp.sub(tp.leaf(eps[v]), preds[v]);
        Ref msev = tp.mean_all(tp.mul(diff, diff));
        total = (total < 0) ? msev : tp.add(total, msev);
    }
    return tp.scale(total, 1.0 / static_cast<double>(preds.size()));
}

// Noise loss with a capped clean-image reweighting:
//   w_t = 1 + min((1 - abar_t) / abar_t, cap)
// A plain noise loss barely penalizes sloppy predictions at high noise
// levels even though they wreck the implied clean image; the extra term
// restores that pressure, and the cap bounds the per-draw variance.
template <class PredictFn>
Ref hybrid_loss_graph(Tape& tp, const std::vector<Tensor>& x0_views, const NoiseSchedule& s,
                      Rng& rng, PredictFn&& predict, double cap = 100.0) {
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
    const double ab = s.alpha_bar_at(t);
    const double w = 1.0 + std::min((1.0 - ab) / ab, cap);
    std::vector<Tensor> eps;
    std::vector<Ref> xt_refs;
    eps.reserve(x0_views.size());
    for (const auto& x0 : x0_views) {
        eps.push_back(rng.normal_tensor(x0.shape));
        xt_refs.push_back(tp.leaf(forward_diffuse(x0, t, eps.back(), s)));
    }
    std::vector<Ref> preds = predict(tp, xt_refs, t);
    Ref total = -1;
    for (std::size_t v = 0; v < preds.size(); ++v) {
        Ref diff = tp.sub(tp.leaf(eps[v]), preds[v]);
        Ref msev = tp.mean_all(tp.mul(diff, diff));
        total = (total < 0) ? msev : tp.add(total, msev);
    }
    return tp.scale(total, w / static_cast<double>(preds.size()));
}

// Same draw protocol as base_loss_graph, but scored in clean-image space:
//   mean over views of mean((x0 - x0_hat)^2),
//   x0_hat = (x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t).
// Equivalent to the noise loss reweighted by (1 - abar_t) / abar_t, which
// keeps the gradient of slowly-varying content alive at high noise levels
// where the plain noise loss suppresses it.
// `t_min` narrows the timestep draw to [t_min, T]; the default covers the
// whole schedule.
template <class PredictFn>
Ref x0_loss_graph(Tape& tp, const std::vector<Tensor>& x0_views, const NoiseSchedule& s, Rng& rng,
                  PredictFn&& predict, int t_min = 1) {
    if (t_min < 1 || t_min > s.T) throw std::invalid_argument("x0_loss_graph: t_min out of range");
    const int t = t_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T - t_min + 1)));
    const double ab = s.alpha_bar_at(t);
    const double ca = std::sqrt(1.0 - ab) / std::sqrt(ab);
    std::vector<Tensor> eps;
    std::vector<Ref> xt_refs;
    eps.reserve(x0_views.size());
    for (const auto& x0 : x0_views) {
        eps.push_back(rng.normal_tensor(x0.shape));
        xt_refs.push_back(tp.leaf(forward_diffuse(x0, t, eps.back(), s)));
    }
    std::vector<Ref> preds = predict(tp, xt_refs, t);
    Ref total = -1;
    for (std::size_t v = 0; v < preds.size(); ++v) {
        // x0 - x0_hat = ca * (eps_pred - eps)
        Ref diff = tp.scale(tp.sub(preds[v], tp.leaf(eps[v])), ca);
        Ref msev = tp.mean_all(tp.mul(diff, diff));
        total = (total < 0) ? msev : tp.add(total, msev);
    }
    return tp.scale(total, 1.0 / static_cast<double>(preds.size()));
}

}  // namespace placediff
