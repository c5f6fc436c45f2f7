#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "params.hpp"
#include "rng.hpp"

namespace placediff {

// f(store, with_grad): returns the scalar value; when with_grad it must also
// accumulate gradients into the store. Must be deterministic across calls.
using ScalarFn = std::function<double(ParamStore&, bool with_grad)>;

struct GradCheckReport {
    struct PerParam {
        std::string name;
        double max_rel_err = 0.0;
        int coords_checked = 0;
    };
    std::vector<PerParam> params;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central finite differences vs reverse-mode gradients on a random sample of
// coordinates per parameter (coords_per_param < 0 checks every coordinate).
inline GradCheckReport grad_check(const ScalarFn& f, ParamStore& ps, double eps, double tol,
                                  Rng& rng, int coords_per_param = 4) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");

    const double v1 = f(ps, false);
    const double v2 = f(ps, false);
    if (v1 != v2) throw std::runtime_error("grad_check: oracle-invalid, f is non-deterministic");

    ps.zero_grad();
    f(ps, true);

    GradCheckReport rep;
    for (auto& e : ps.entries()) {
        if (e.frozen) continue;
        GradCheckReport::PerParam pp;
        pp.name = e.name;
        const std::size_t n = e.value.numel();
        std::vector<std::size_t> coords;
        if (coords_per_param < 0 || static_cast<std::size_t>(coords_per_param) >= n) {
            for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < coords_per_param; ++i) coords.push_back(rng.below(n));
        }
        for (std::size_t idx : coords) {
            const double saved = e.value.data[idx];
            e.value.data[idx] = saved + eps;
            const double fp = f(ps, false);
            e.value.data[idx] = saved - eps;
            const double fm = f(ps, false);
            e.value.data[idx] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double ad = e.grad.data[idx];
            const double denom = std::max({std::fabs(ad), std::fabs(fd), 1e-3});
            const double rel = std::fabs(ad - fd) / denom;
            pp.max_rel_err = std::max(pp.max_rel_err, rel);
            ++pp.coords_checked;
        }
        rep.max_rel_err = std::max(rep.max_rel_err, pp.max_rel_err);
        rep.params.push_back(std::move(pp));
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace placediff
