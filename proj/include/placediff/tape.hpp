#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace placediff {

// Reverse-mode autodiff over a linear record of executed operations.
// Refs are indices into the record; backward() replays it in reverse.
class Tape {
public:
    using Ref = int;

    Ref leaf(Tensor v) {
        v.check_finite("leaf");
        return push(std::move(v), nullptr);
    }

    const Tensor& val(Ref r) const { return nodes_[r].value; }
    const Tensor& grad(Ref r) const { return nodes_[r].grad; }

    std::size_t size() const { return nodes_.size(); }

    void backward(Ref out) {
        if (nodes_[out].value.numel() != 1) {
            throw std::invalid_argument("backward: output must be scalar");
        }
        nodes_[out].grad.data[0] = 1.0;
        nodes_[out].touched = true;
        for (int i = out; i >= 0; --i) {
            if (nodes_[i].touched && nodes_[i].back) nodes_[i].back();
        }
    }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        require_same(a, b, "add");
        Tensor v = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] += bv.data[i];
        return push(std::move(v), [this, a, b](int out) {
            const Tensor& g = nodes_[out].grad;
            acc(a, g.data.data());
            acc(b, g.data.data());
        }, "add");
    }

    Ref sub(Ref a, Ref b) {
        require_same(a, b, "sub");
        Tensor v = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] -= bv.data[i];
        return push(std::move(v), [this, a, b](int out) {
            const Tensor& g = nodes_[out].grad;
            acc(a, g.data.data());
            Tensor& gb = nodes_[b].grad;
            for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= g.data[i];
            nodes_[b].touched = true;
        }, "sub");
    }

    Ref mul(Ref a, Ref b) {
        require_same(a, b, "mul");
        Tensor v = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] *= bv.data[i];
        return push(std::move(v), [this, a, b](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            Tensor& gb = nodes_[b].grad;
            const Tensor& av = nodes_[a].value;
            const Tensor& bv2 = nodes_[b].value;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * bv2.data[i];
                gb.data[i] += g.data[i] * av.data[i];
            }
            nodes_[a].touched = nodes_[b].touched = true;
        }, "mul");
    }

    Ref scale(Ref a, double s) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x *= s;
        return push(std::move(v), [this, a, s](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
            nodes_[a].touched = true;
        }, "scale");
    }

    Ref add_scalar(Ref a, double s) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x += s;
        return push(std::move(v), [this, a](int out) {
            acc(a, nodes_[out].grad.data.data());
        }, "add_scalar");
    }

    Ref tanh_(Ref a) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x = std::tanh(x);
        return push(std::move(v), [this, a](int out) {
            const Tensor& g = nodes_[out].grad;
            const Tensor& y = nodes_[out].value;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
            }
            nodes_[a].touched = true;
        }, "tanh");
    }

    Ref exp_(Ref a) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x = std::exp(x);
        return push(std::move(v), [this, a](int out) {
            const Tensor& g = nodes_[out].grad;
            const Tensor& y = nodes_[out].value;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
            nodes_[a].touched = true;
        }, "exp");
    }

    Ref log_(Ref a) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x = std::log(x);
        return push(std::move(v), [this, a](int out) {
            const Tensor& g = nodes_[out].grad;
            const Tensor& xv = nodes_[a].value;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / xv.data[i];
            nodes_[a].touched = true;
        }, "log");
    }

    // elementwise x^p; x must stay strictly positive for non-integer p
    Ref pow_(Ref a, double p) {
        Tensor v = nodes_[a].value;
        for (auto& x : v.data) x = std::pow(x, p);
        return push(std::move(v), [this, a, p](int out) {
            const Tensor& g = nodes_[out].grad;
            const Tensor& xv = nodes_[a].value;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * p * std::pow(xv.data[i], p - 1.0);
            }
            nodes_[a].touched = true;
        }, "pow");
    }

    // ---- matrix ----

    Ref matmul(Ref a, Ref b) {
        const Tensor& av = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        if (av.cols() != bv.rows()) {
            throw std::invalid_argument("matmul: inner extents " + shape_str(av) + " vs " + shape_str(bv));
        }
        Tensor v = Tensor::matrix(av.rows(), bv.cols());
        mm_acc(av, bv, v);
        return push(std::move(v), [this, a, b](int out) {
            const Tensor& g = nodes_[out].grad;
            mm_nt_acc(g, nodes_[b].value, nodes_[a].grad);
            mm_tn_acc(nodes_[a].value, g, nodes_[b].grad);
            nodes_[a].touched = nodes_[b].touched = true;
        }, "matmul");
    }

    // a * b^T  (attention scores)
    Ref matmul_nt(Ref a, Ref b) {
        const Tensor& av = nodes_[a].value;
        const Tensor& bv = nodes_[b].value;
        if (av.cols() != bv.cols()) {
            throw std::invalid_argument("matmul_nt: inner extents " + shape_str(av) + " vs " + shape_str(bv));
        }
        Tensor v = Tensor::matrix(av.rows(), bv.rows());
        mm_nt_acc(av, bv, v);
        return push(std::move(v), [this, a, b](int out) {
            const Tensor& g = nodes_[out].grad;
            mm_acc(g, nodes_[b].value, nodes_[a].grad);
            mm_tn_acc(g, nodes_[a].value, nodes_[b].grad);
            nodes_[a].touched = nodes_[b].touched = true;
        }, "matmul_nt");
    }

    // ---- softmax ----

    // row-wise softmax of (scale * x), stabilized by row-max subtraction
    Ref softmax_rows(Ref a, double s) {
        if (s <= 0.0) throw std::invalid_argument("softmax_rows: scale must be > 0");
        const Tensor& xv = nodes_[a].value;
        Tensor v = xv;
        const int r = v.rows(), c = v.cols();
        for (int i = 0; i < r; ++i) {
            double* row = v.data.data() + static_cast<std::size_t>(i) * c;
            double mx = row[0] * s;
            for (int j = 0; j < c; ++j) mx = std::max(mx, row[j] * s);
            double sum = 0.0;
            for (int j = 0; j < c; ++j) {
                row[j] = std::exp(row[j] * s - mx);
                sum += row[j];
            }
            for (int j = 0; j < c; ++j) row[j] /= sum;
        }
        return push(std::move(v), [this, a, s](int out) {
            const Tensor& g = nodes_[out].grad;
            const Tensor& y = nodes_[out].value;
            Tensor& ga = nodes_[a].grad;
            const int r2 = y.rows(), c2 = y.cols();
            for (int i = 0; i < r2; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * c2;
                double dot = 0.0;
                for (int j = 0; j < c2; ++j) dot += g.data[off + j] * y.data[off + j];
                for (int j = 0; j < c2; ++j) {
                    ga.data[off + j] += s * y.data[off + j] * (g.data[off + j] - dot);
                }
            }
            nodes_[a].touched = true;
        }, "softmax_rows");
    }

    // ---- reductions & broadcasts ----

    Ref row_sum(Ref a) {
        const Tensor& xv = nodes_[a].value;
        const int r = xv.rows(), c = xv.cols();
        Tensor v = Tensor::matrix(r, 1);
        for (int i = 0; i < r; ++i) {
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += xv.at(i, j);
            v.data[i] = s;
        }
        return push(std::move(v), [this, a, c](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            const int r2 = g.rows();
            for (int i = 0; i < r2; ++i) {
                for (int j = 0; j < c; ++j) ga.data[static_cast<std::size_t>(i) * c + j] += g.data[i];
            }
            nodes_[a].touched = true;
        }, "row_sum");
    }

    Ref row_mean(Ref a) { return scale(row_sum(a), 1.0 / nodes_[a].value.cols()); }

    Ref sum_all(Ref a) {
        const Tensor& xv = nodes_[a].value;
        double s = 0.0;
        for (double x : xv.data) s += x;
        return push(Tensor::scalar(s), [this, a](int out) {
            const double g = nodes_[out].grad.data[0];
            Tensor& ga = nodes_[a].grad;
            for (auto& x : ga.data) x += g;
            nodes_[a].touched = true;
        }, "sum_all");
    }

    Ref mean_all(Ref a) { return scale(sum_all(a), 1.0 / static_cast<double>(nodes_[a].value.numel())); }

    // x [r x c] op col [r x 1], broadcast along columns
    Ref bcast_col_add(Ref a, Ref col) { return bcast_col(a, col, false); }
    Ref bcast_col_mul(Ref a, Ref col) { return bcast_col(a, col, true); }

    // x [r x c] op row [1 x c], broadcast along rows
    Ref bcast_row_add(Ref a, Ref row) { return bcast_row(a, row, false); }
    Ref bcast_row_mul(Ref a, Ref row) { return bcast_row(a, row, true); }

    // ---- structural ----

    Ref concat_rows(const std::vector<Ref>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
        const int c = nodes_[parts[0]].value.cols();
        int r = 0;
        for (Ref p : parts) {
            if (nodes_[p].value.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
            r += nodes_[p].value.rows();
        }
        Tensor v = Tensor::matrix(r, c);
        std::size_t off = 0;
        for (Ref p : parts) {
            const Tensor& pv = nodes_[p].value;
            std::copy(pv.data.begin(), pv.data.end(), v.data.begin() + off);
            off += pv.data.size();
        }
        return push(std::move(v), [this, parts](int out) {
            const Tensor& g = nodes_[out].grad;
            std::size_t o = 0;
            for (Ref p : parts) {
                Tensor& gp = nodes_[p].grad;
                for (std::size_t i = 0; i < gp.data.size(); ++i) gp.data[i] += g.data[o + i];
                o += gp.data.size();
                nodes_[p].touched = true;
            }
        }, "concat_rows");
    }

    Ref slice_rows(Ref a, int r0, int n) {
        const Tensor& xv = nodes_[a].value;
        const int c = xv.cols();
        if (r0 < 0 || n <= 0 || r0 + n > xv.rows()) throw std::invalid_argument("slice_rows: out of range");
        Tensor v = Tensor::matrix(n, c);
        std::copy(xv.data.begin() + static_cast<std::size_t>(r0) * c,
                  xv.data.begin() + static_cast<std::size_t>(r0 + n) * c, v.data.begin());
        return push(std::move(v), [this, a, r0, c](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            const std::size_t off = static_cast<std::size_t>(r0) * c;
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[off + i] += g.data[i];
            nodes_[a].touched = true;
        }, "slice_rows");
    }

    // out.data[i] = in.data[map[i]]; map need not be a bijection
    Ref reindex(Ref a, std::vector<int> shape, std::vector<std::size_t> map) {
        const Tensor& xv = nodes_[a].value;
        Tensor v(std::move(shape));
        if (v.numel() != map.size()) throw std::invalid_argument("reindex: map length mismatch");
        for (std::size_t i = 0; i < map.size(); ++i) {
            if (map[i] >= xv.numel()) throw std::invalid_argument("reindex: index out of range");
            v.data[i] = xv.data[map[i]];
        }
        auto m = std::make_shared<std::vector<std::size_t>>(std::move(map));
        return push(std::move(v), [this, a, m](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            for (std::size_t i = 0; i < m->size(); ++i) ga.data[(*m)[i]] += g.data[i];
            nodes_[a].touched = true;
        }, "reindex");
    }

    Ref reshape(Ref a, std::vector<int> shape) {
        const Tensor& xv = nodes_[a].value;
        if (Tensor::numel_of(shape) != xv.numel()) throw std::invalid_argument("reshape: numel mismatch");
        Tensor v = xv;
        v.shape = std::move(shape);
        return push(std::move(v), [this, a](int out) {
            acc(a, nodes_[out].grad.data.data());
        }, "reshape");
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        bool touched = false;
    };

    std::vector<Node> nodes_;

    Ref push(Tensor v, std::function<void(int)> back, const char* who = nullptr) {
        if (who) v.check_finite(who);
        Node n;
        n.grad = Tensor(v.shape, 0.0);
        n.value = std::move(v);
        const int id = static_cast<int>(nodes_.size());
        if (back) n.back = [this, back = std::move(back), id]() { back(id); };
        nodes_.push_back(std::move(n));
        return id;
    }

    void require_same(Ref a, Ref b, const char* who) {
        if (!nodes_[a].value.same_shape(nodes_[b].value)) {
            throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                        shape_str(nodes_[a].value) + " vs " + shape_str(nodes_[b].value));
        }
    }

    void acc(Ref a, const double* g) {
        Tensor& ga = nodes_[a].grad;
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g[i];
        nodes_[a].touched = true;
    }

    Ref bcast_col(Ref a, Ref col, bool is_mul) {
        const Tensor& xv = nodes_[a].value;
        const Tensor& cv = nodes_[col].value;
        const int r = xv.rows(), c = xv.cols();
        if (cv.rows() != r || cv.cols() != 1) throw std::invalid_argument("bcast_col: need [r x 1]");
        Tensor v = xv;
        for (int i = 0; i < r; ++i) {
            const double s = cv.data[i];
            double* row = v.data.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) row[j] = is_mul ? row[j] * s : row[j] + s;
        }
        return push(std::move(v), [this, a, col, is_mul, r, c](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            Tensor& gc = nodes_[col].grad;
            const Tensor& xv2 = nodes_[a].value;
            const Tensor& cv2 = nodes_[col].value;
            for (int i = 0; i < r; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * c;
                double s = 0.0;
                for (int j = 0; j < c; ++j) {
                    if (is_mul) {
                        ga.data[off + j] += g.data[off + j] * cv2.data[i];
                        s += g.data[off + j] * xv2.data[off + j];
                    } else {
                        ga.data[off + j] += g.data[off + j];
                        s += g.data[off + j];
                    }
                }
                gc.data[i] += s;
            }
            nodes_[a].touched = nodes_[col].touched = true;
        }, is_mul ? "bcast_col_mul" : "bcast_col_add");
    }

    Ref bcast_row(Ref a, Ref row, bool is_mul) {
        const Tensor& xv = nodes_[a].value;
        const Tensor& rv = nodes_[row].value;
        const int r = xv.rows(), c = xv.cols();
        if (rv.rows() != 1 || rv.cols() != c) throw std::invalid_argument("bcast_row: need [1 x c]");
        Tensor v = xv;
        for (int i = 0; i < r; ++i) {
            double* out = v.data.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) out[j] = is_mul ? out[j] * rv.data[j] : out[j] + rv.data[j];
        }
        return push(std::move(v), [this, a, row, is_mul, r, c](int out) {
            const Tensor& g = nodes_[out].grad;
            Tensor& ga = nodes_[a].grad;
            Tensor& gr = nodes_[row].grad;
            const Tensor& xv2 = nodes_[a].value;
            const Tensor& rv2 = nodes_[row].value;
            for (int i = 0; i < r; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) {
                    if (is_mul) {
                        ga.data[off + j] += g.data[off + j] * rv2.data[j];
                        gr.data[j] += g.data[off + j] * xv2.data[off + j];
                    } else {
                        ga.data[off + j] += g.data[off + j];
                        gr.data[j] += g.data[off + j];
                    }
                }
            }
            nodes_[a].touched = nodes_[row].touched = true;
        }, is_mul ? "bcast_row_mul" : "bcast_row_add");
    }
};

using Ref = Tape::Ref;

// rows of x normalized to unit L2 norm
inline Ref normalize_rows(Tape& t, Ref x, double eps = 1e-12) {
    Ref sq = t.mul(x, x);
    Ref n2 = t.row_sum(sq);
    Ref inv = t.pow_(t.add_scalar(n2, eps), -0.5);
    return t.bcast_col_mul(x, inv);
}

// pre-norm layer normalization over the last dimension with affine params
inline Ref layer_norm(Tape& t, Ref x, Ref gain, Ref bias, double eps = 1e-5) {
    Ref mu = t.row_mean(x);
    Ref xc = t.bcast_col_add(x, t.scale(mu, -1.0));
    Ref var = t.row_mean(t.mul(xc, xc));
    Ref inv = t.pow_(t.add_scalar(var, eps), -0.5);
    Ref y = t.bcast_col_mul(xc, inv);
    y = t.bcast_row_mul(y, gain);
    return t.bcast_row_add(y, bias);
}

}  // namespace placediff
