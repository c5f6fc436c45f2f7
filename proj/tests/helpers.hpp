#pragma once

// Shared test helpers: a tiny MLP noise predictor for scalar/2-pixel
// diffusion experiments, trained with the same tape + AdamW machinery.

#include <vector>

#include "placediff/diffusion.hpp"
#include "placediff/params.hpp"
#include "placediff/rng.hpp"
#include "placediff/tape.hpp"

namespace pdtest {

using namespace placediff;

// eps_hat = W2 tanh(W1 [x; t/T] + b1) + b2 over a [1 x dim] state
struct TinyMlp {
    int dim;
    int hidden;
    int T;

    void init(ParamStore& ps, Rng& rng) const {
        ps.add("mlp.w1", init_linear(rng, dim + 2, hidden));
        ps.add("mlp.b1", Tensor::matrix(1, hidden));
        ps.add("mlp.w2", init_linear(rng, hidden, dim));
        ps.add("mlp.b2", Tensor::matrix(1, dim));
    }

    Ref predict(Tape& tp, Binding& bind, Ref x, int t) const {
        const double ft = static_cast<double>(t) / T;
        Tensor temb = Tensor::matrix(1, 2);
        temb.data[0] = ft;
        temb.data[1] = std::sin(6.283185307179586 * ft);
        Ref in = tp.concat_rows({tp.reshape(x, {dim, 1}), tp.reshape(tp.leaf(temb), {2, 1})});
        in = tp.reshape(in, {1, dim + 2});
        Ref h = tp.tanh_(tp.bcast_row_add(tp.matmul(in, bind("mlp.w1")), bind("mlp.b1")));
        return tp.bcast_row_add(tp.matmul(h, bind("mlp.w2")), bind("mlp.b2"));
    }

    Tensor predict_raw(ParamStore& ps, const Tensor& x, int t) const {
        Tape tp;
        Binding bind(tp, ps);
        Ref r = predict(tp, bind, tp.leaf(x), t);
        return tp.val(r);
    }
};

// Trains the MLP as a DDPM noise predictor on draws from `sample_x0`.
inline void train_tiny_ddpm(TinyMlp& net, ParamStore& ps, const NoiseSchedule& sched,
                            const std::function<Tensor(Rng&)>& sample_x0, int steps, double lr,
                            std::uint64_t seed) {
    Rng rng(seed);
    for (int step = 1; step <= steps; ++step) {
        Tape tp;
        Binding bind(tp, ps);
        Tensor x0 = sample_x0(rng);
        Ref loss = base_loss_graph(tp, {x0}, sched, rng, [&](Tape& t2, const std::vector<Ref>& xt, int t) {
            return std::vector<Ref>{net.predict(t2, bind, xt[0], t)};
        });
        tp.backward(loss);
        bind.harvest();
        adamw_step(ps, warmup_lr(lr, step - 1, steps / 10), 0.0, {}, step);
        ps.zero_grad();
    }
}

}  // namespace pdtest
