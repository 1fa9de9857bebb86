#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facl/error.hpp"
#include "facl/tensor.hpp"

// Tape-based reverse-mode differentiation over facl::Tensor.
//
// Every op evaluates eagerly, appends one node to the tape and remembers how
// to push its output adjoint onto its parents. Tape::backward walks the nodes
// in exact reverse order of recording.

namespace facl::ad {

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true) {
        require_finite(value, "leaf");
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Appends an op node. It requires grad iff any parent does; the backward
    // closure is dropped otherwise.
    Var record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op) {
        require_finite(value, op);
        bool needs = false;
        for (const Var& p : parents) {
            if (p.tape() != this) throw Error(std::string(op) + ": operand recorded on another tape");
            needs = needs || nodes_[p.id()].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    const Tensor& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    const Tensor& output_grad(std::size_t id) const { return nodes_[id].grad; }

    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool requires_grad(Var v) const { return requires_grad(v.id()); }

    std::size_t size() const noexcept { return nodes_.size(); }

    // Adds `g` into the adjoint of node `id`; silently ignored for constants.
    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (g.size() != n.value.size()) throw ShapeError("accumulate: gradient shape mismatch");
        if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
        auto dst = n.grad.data();
        auto src = g.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }

    // Reverse pass from a scalar root. Resets all adjoints first; afterwards
    // every node that requires grad holds d(root)/d(node), zero when the node
    // does not reach the root. Returns the ids whose adjoint rule ran, in the
    // order they ran.
    std::vector<std::size_t> backward(Var root) {
        if (root.tape() != this) throw Error("backward: root recorded on another tape");
        const Tensor& rv = nodes_.at(root.id()).value;
        if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got shape " + shape_string(rv.shape()));
        for (Node& n : nodes_) {
            if (n.requires_grad) {
                n.grad = Tensor(n.value.shape());
            } else {
                n.grad = Tensor{};
            }
        }
        std::vector<std::size_t> visited;
        if (!nodes_[root.id()].requires_grad) return visited;
        nodes_[root.id()].grad[0] = 1.0;
        for (std::size_t id = root.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || !n.backward) continue;
            n.backward(*this, id);
            visited.push_back(id);
        }
        return visited;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad;
        Backward backward;
    };
    std::deque<Node> nodes_;  // stable references across pushes
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

// ---------------------------------------------------------------------------
// Differentiable ops

inline Var matmul(Var a, Var b) {
    Tensor out = kernels::matmul(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        if (t.requires_grad(ia)) t.accumulate(ia, kernels::matmul_nt(g, t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, kernels::matmul_tn(t.value(ia), g));
    }, "matmul");
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
    Tensor out = kernels::matmul_nt(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        if (t.requires_grad(ia)) t.accumulate(ia, kernels::matmul(g, t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, kernels::matmul_tn(g, t.value(ia)));
    }, "matmul_nt");
}

inline Var transpose(Var a) {
    Tensor out = kernels::transpose(a.value());
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        t.accumulate(ia, kernels::transpose(t.output_grad(self)));
    }, "transpose");
}

inline Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] += bv[k];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    }, "add");
}

inline Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] -= bv[k];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        t.accumulate(ia, g);
        if (t.requires_grad(ib)) {
            Tensor neg = g;
            for (double& v : neg.data()) v = -v;
            t.accumulate(ib, neg);
        }
    }, "sub");
}

// Elementwise product.
inline Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] *= bv[k];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        if (t.requires_grad(ia)) {
            Tensor ga = g;
            auto bv = t.value(ib).data();
            for (std::size_t k = 0; k < ga.size(); ++k) ga[k] *= bv[k];
            t.accumulate(ia, ga);
        }
        if (t.requires_grad(ib)) {
            Tensor gb = g;
            auto av = t.value(ia).data();
            for (std::size_t k = 0; k < gb.size(); ++k) gb[k] *= av[k];
            t.accumulate(ib, gb);
        }
    }, "mul");
}

inline Var scale(Var a, double c) {
    Tensor out = a.value();
    for (double& v : out.data()) v *= c;
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, c](Tape& t, std::size_t self) {
        Tensor g = t.output_grad(self);
        for (double& v : g.data()) v *= c;
        t.accumulate(ia, g);
    }, "scale");
}

// x[n x m] + b broadcast over rows; b has m entries (shape {m} or {1, m}).
inline Var add_row_bias(Var x, Var b) {
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || bv.size() != xv.cols()) {
        throw ShapeError("add_row_bias: bias " + shape_string(bv.shape()) + " does not fit rows of " +
                         shape_string(xv.shape()));
    }
    Tensor out = xv;
    const std::size_t n = xv.rows(), m = xv.cols();
    for (std::size_t i = 0; i < n; ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < m; ++j) r[j] += bv[j];
    }
    const std::size_t ix = x.id(), ib = b.id();
    return x.tape()->record(std::move(out), {x, b}, [ix, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        t.accumulate(ix, g);
        if (t.requires_grad(ib)) {
            Tensor gb(t.value(ib).shape());
            for (std::size_t i = 0; i < g.rows(); ++i) {
                auto r = g.row(i);
                for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += r[j];
            }
            t.accumulate(ib, gb);
        }
    }, "add_row_bias");
}

inline Var relu(Var a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        Tensor g = t.output_grad(self);
        auto x = t.value(ia).data();
        for (std::size_t k = 0; k < g.size(); ++k)
            if (!(x[k] > 0.0)) g[k] = 0.0;
        t.accumulate(ia, g);
    }, "relu");
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const std::size_t ia = a.id();
    return a.tape()->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
        Tensor g(t.value(ia).shape(), t.output_grad(self)[0]);
        t.accumulate(ia, g);
    }, "sum");
}

inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
    Tensor out = kernels::gather_rows(a.value(), idx);
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, idx = std::move(idx)](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        Tensor ga(t.value(ia).shape());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            auto dst = ga.row(idx[r]);
            auto src = g.row(r);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        t.accumulate(ia, ga);
    }, "gather_rows");
}

inline Var concat_rows(Var a, Var b) {
    Tensor out = kernels::concat_rows(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    const std::size_t split = a.value().size();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib, split](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        if (t.requires_grad(ia)) {
            Tensor ga(t.value(ia).shape());
            std::copy_n(g.data().begin(), split, ga.data().begin());
            t.accumulate(ia, ga);
        }
        if (t.requires_grad(ib)) {
            Tensor gb(t.value(ib).shape());
            std::copy(g.data().begin() + static_cast<std::ptrdiff_t>(split), g.data().end(), gb.data().begin());
            t.accumulate(ib, gb);
        }
    }, "concat_rows");
}

// Row 2q of the result is a[q], row 2q+1 is b[q].
inline Var interleave_rows(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape() != bv.shape()) {
        throw ShapeError("interleave_rows: shape mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
    }
    const std::size_t n = av.rows(), d = av.cols();
    Tensor out = Tensor::matrix(2 * n, d);
    for (std::size_t q = 0; q < n; ++q) {
        std::copy_n(av.row(q).begin(), d, out.row(2 * q).begin());
        std::copy_n(bv.row(q).begin(), d, out.row(2 * q + 1).begin());
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape()->record(std::move(out), {a, b}, [ia, ib, n, d](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        Tensor ga = Tensor::matrix(n, d), gb = Tensor::matrix(n, d);
        for (std::size_t q = 0; q < n; ++q) {
            std::copy_n(g.row(2 * q).begin(), d, ga.row(q).begin());
            std::copy_n(g.row(2 * q + 1).begin(), d, gb.row(q).begin());
        }
        t.accumulate(ia, ga);
        t.accumulate(ib, gb);
    }, "interleave_rows");
}

// Each row scaled to unit L2 norm. A zero row has no direction and is rejected.
inline Var l2_normalize_rows(Var a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw ShapeError("l2_normalize_rows: expected a matrix");
    Tensor out = av;
    std::vector<double> norms(av.rows());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        const double nrm = kernels::norm(av.row(i));
        if (!(nrm > 0.0)) throw ValueError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        norms[i] = nrm;
        for (double& v : out.row(i)) v /= nrm;
    }
    const std::size_t ia = a.id();
    return a.tape()->record(std::move(out), {a}, [ia, norms = std::move(norms)](Tape& t, std::size_t self) {
        const Tensor& g = t.output_grad(self);
        const Tensor& yv = t.value(self);
        Tensor ga(yv.shape());
        for (std::size_t i = 0; i < yv.rows(); ++i) {
            auto yr = yv.row(i);
            auto gr = g.row(i);
            const double yg = kernels::dot(yr, gr);
            auto dst = ga.row(i);
            for (std::size_t j = 0; j < yr.size(); ++j) dst[j] = (gr[j] - yr[j] * yg) / norms[i];
        }
        t.accumulate(ia, ga);
    }, "l2_normalize_rows");
}

// Mean over rows of -log softmax(logits)[target].
inline Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
    const Tensor& z = logits.value();
    if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be a matrix");
    const std::size_t n = z.rows(), k = z.cols();
    if (targets.size() != n) throw ShapeError("softmax_cross_entropy: one target per row required");
    if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    Tensor probs = Tensor::matrix(n, k);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = targets[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw ValueError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(k) + ")");
        }
        auto zr = z.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : zr) mx = std::max(mx, v);
        double se = 0.0;
        for (double v : zr) se += std::exp(v - mx);
        const double lse = mx + std::log(se);
        total += lse - zr[static_cast<std::size_t>(y)];
        auto pr = probs.row(i);
        for (std::size_t j = 0; j < k; ++j) pr[j] = std::exp(zr[j] - lse);
    }
    std::vector<int> labels(targets.begin(), targets.end());
    const std::size_t il = logits.id();
    return logits.tape()->record(
        Tensor::scalar(total / static_cast<double>(n)), {logits},
        [il, probs = std::move(probs), labels = std::move(labels)](Tape& t, std::size_t self) {
            const double g = t.output_grad(self)[0] / static_cast<double>(labels.size());
            Tensor gl = probs;
            for (std::size_t i = 0; i < labels.size(); ++i) gl(i, static_cast<std::size_t>(labels[i])) -= 1.0;
            for (double& v : gl.data()) v *= g;
            t.accumulate(il, gl);
        },
        "softmax_cross_entropy");
}

}  // namespace facl::ad
