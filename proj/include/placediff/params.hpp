#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace placediff {

// Flat named collection of trainable arrays. Entries keep insertion order so
// serialization and optimizer traversal are deterministic.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        Tensor m;   // AdamW first moment
        Tensor v;   // AdamW second moment
        bool frozen = false;
    };

    Tensor& add(const std::string& name, Tensor value, bool frozen = false) {
        if (index_.count(name)) throw std::invalid_argument("param already exists: " + name);
        Entry e;
        e.name = name;
        e.grad = Tensor(value.shape, 0.0);
        e.m = Tensor(value.shape, 0.0);
        e.v = Tensor(value.shape, 0.0);
        e.value = std::move(value);
        e.frozen = frozen;
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no such param: " + name);
        return entries_[it->second];
    }
    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no such param: " + name);
        return entries_[it->second];
    }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }
    Tensor& grad(const std::string& name) { return entry(name).grad; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grad() {
        for (auto& e : entries_) {
            for (auto& g : e.grad.data) g = 0.0;
        }
    }

    void freeze_prefix(const std::string& prefix) {
        for (auto& e : entries_) {
            if (e.name.rfind(prefix, 0) == 0) e.frozen = true;
        }
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) {
            if (!e.frozen) n += e.value.numel();
        }
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// Binds store parameters to tape leaves for one forward/backward evaluation.
class Binding {
public:
    Binding(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

    Ref operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Ref r = tape_->leaf(store_->value(name));
        bound_[name] = r;
        return r;
    }

    // accumulate tape gradients back into the store (frozen entries skipped)
    void harvest() {
        for (auto& e : store_->entries()) {
            auto it = bound_.find(e.name);
            if (it == bound_.end() || e.frozen) continue;
            const Tensor& g = tape_->grad(it->second);
            for (std::size_t i = 0; i < g.data.size(); ++i) e.grad.data[i] += g.data[i];
        }
    }

private:
    Tape* tape_;
    ParamStore* store_;
    std::map<std::string, Ref> bound_;
};

struct AdamBetas {
    double b1 = 0.9;
    double b2 = 0.999;
};

// Decoupled-weight-decay Adam update, applied in place. Frozen entries are
// skipped entirely, leaving value and moments bitwise unchanged.
inline void adamw_step(ParamStore& ps, double lr, double wd, AdamBetas betas, std::int64_t step,
                       double eps = 1e-8) {
    if (step < 1 || step >= (std::int64_t(1) << 50)) {
        throw std::invalid_argument("adamw_step: step counter out of range");
    }
    const double c1 = 1.0 - std::pow(betas.b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(betas.b2, static_cast<double>(step));
    for (auto& e : ps.entries()) {
        if (e.frozen) continue;
        for (std::size_t i = 0; i < e.value.data.size(); ++i) {
            const double g = e.grad.data[i];
            e.m.data[i] = betas.b1 * e.m.data[i] + (1.0 - betas.b1) * g;
            e.v.data[i] = betas.b2 * e.v.data[i] + (1.0 - betas.b2) * g * g;
            const double mh = e.m.data[i] / c1;
            const double vh = e.v.data[i] / c2;
            e.value.data[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * e.value.data[i]);
        }
        e.value.check_finite("adamw_step");
    }
}

// constant learning rate with linear warm-up over the first `warmup` steps
inline double warmup_lr(double base_lr, std::int64_t step, std::int64_t warmup) {
    if (warmup <= 0 || step >= warmup) return base_lr;
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

// linear warm-up followed by cosine decay to 10% of the peak at `total` steps
inline double warmup_cosine_lr(double base_lr, std::int64_t step, std::int64_t warmup,
                               std::int64_t total) {
    if (warmup > 0 && step < warmup) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total <= warmup) return base_lr;
    const double frac = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    const double pi = 3.14159265358979323846;
    return base_lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(pi * std::min(1.0, frac))));
}

// Kaiming-style scaled uniform init for a [fan_in x fan_out] matrix.
inline Tensor init_linear(Rng& rng, int fan_in, int fan_out, double gain = 1.0) {
    const double bound = gain * std::sqrt(1.0 / fan_in);
    return rng.uniform_tensor({fan_in, fan_out}, -bound, bound);
}

}  // namespace placediff
