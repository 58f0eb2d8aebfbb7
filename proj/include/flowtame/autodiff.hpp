#pragma once

// Reverse-mode automatic differentiation over dense 64-bit matrices.
//
// A Tape records every operation eagerly: each call computes its value at
// once and appends a node holding the value, the ids of its inputs and the
// closure that pushes an upstream gradient back to those inputs. Node ids are
// handed out in creation order, so decreasing id is always a valid reverse
// topological order; backward() walks the nodes reachable from the output in
// that order, each exactly once.
//
// Parameters live outside any tape. Binding one with Tape::param() creates a
// leaf whose gradient is added into Parameter::grad when backward() finishes,
// so gradients accumulate across backward calls until zero_grad().
//
// Broadcasting is limited to scalar (1x1) against array. Row/column
// broadcasting is expressed with matmul against constant ones/diagonal
// matrices (see broadcast_rows, row_sums, scale_columns).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowtame/errors.hpp"

namespace flowtame::ad {

using Array = Eigen::MatrixXd;

inline std::string shape_str(const Array& a) {
    return "[" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "]";
}

// Trainable leaf. `grad` always has the shape of `value`.
struct Parameter {
    std::string name;
    Array value;
    Array grad;

    Parameter() = default;
    Parameter(std::string n, Array v)
        : name(std::move(n)), value(std::move(v)), grad(Array::Zero(value.rows(), value.cols())) {}
};

inline void zero_grad(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->grad.setZero(p->value.rows(), p->value.cols());
}

class Tape;

// Lightweight handle to a node on a tape. Copyable; only valid while the
// tape is alive.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    [[nodiscard]] Tape& tape() const { return *tape_; }
    [[nodiscard]] std::size_t id() const { return id_; }
    [[nodiscard]] const Array& value() const;
    [[nodiscard]] const Array& grad() const;
    [[nodiscard]] double item() const;
    [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
    [[nodiscard]] Eigen::Index cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that never receives a gradient.
    Var constant(Array value) { return push_leaf(std::move(value), false, nullptr); }
    Var constant(double v) { return constant(Array::Constant(1, 1, v)); }

    // Leaf whose gradient is kept on the node (useful for inputs and tests).
    Var variable(Array value) { return push_leaf(std::move(value), true, nullptr); }
    Var variable(double v) { return variable(Array::Constant(1, 1, v)); }

    // Leaf bound to a Parameter; backward() adds its gradient to p.grad.
    Var param(Parameter& p) { return push_leaf(p.value, true, &p); }

    // Appends an interior node. `parents` must already be on this tape.
    Var push(Array value, std::vector<std::size_t> parents, BackwardFn backward) {
        bool needs = false;
        for (std::size_t pid : parents) needs = needs || nodes_[pid].requires_grad;
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    [[nodiscard]] const Array& value(std::size_t id) const { return nodes_[id].value; }

    [[nodiscard]] const Array& grad(std::size_t id) const {
        const Node& n = nodes_[id];
        if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
            n.grad.setZero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Accumulates `g` into the gradient slot of node `id` (used by backward rules).
    void accumulate(std::size_t id, const Array& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        n.grad += g;
    }

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    void backward(Var output) {
        const std::size_t out = output.id();
        if (nodes_[out].value.size() != 1)
            throw NonScalarOutputError("backward() needs a 1x1 output, got " +
                                       shape_str(nodes_[out].value));
        // Reachability from the output; ids below `out` only.
        std::vector<char> reach(out + 1, 0);
        std::vector<std::size_t> stack{out};
        reach[out] = 1;
        while (!stack.empty()) {
            std::size_t id = stack.back();
            stack.pop_back();
            for (std::size_t pid : nodes_[id].parents) {
                if (!reach[pid] && nodes_[pid].requires_grad) {
                    reach[pid] = 1;
                    stack.push_back(pid);
                }
            }
        }
        for (std::size_t id = 0; id <= out; ++id)
            if (reach[id]) nodes_[id].grad.setZero(nodes_[id].value.rows(), nodes_[id].value.cols());
        nodes_[out].grad.setConstant(1.0);
        for (std::size_t id = out + 1; id-- > 0;) {
            if (!reach[id] || !nodes_[id].backward) continue;
            nodes_[id].backward(*this, id);
        }
        for (std::size_t id = 0; id <= out; ++id) {
            if (reach[id] && nodes_[id].param != nullptr) nodes_[id].param->grad += nodes_[id].grad;
        }
    }

private:
    struct Node {
        Array value;
        mutable Array grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    Var push_leaf(Array value, bool requires_grad, Parameter* p) {
        Node n;
        n.grad = Array::Zero(value.rows(), value.cols());
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.param = p;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

inline const Array& Var::value() const { return tape_->value(id_); }
inline const Array& Var::grad() const { return tape_->grad(id_); }
inline double Var::item() const {
    const Array& v = value();
    if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(v));
    return v(0, 0);
}

namespace detail {

inline void check_same_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw ShapeError("operands live on different tapes");
}

enum class Broadcast { none, lhs_scalar, rhs_scalar };

inline Broadcast broadcast_kind(const Array& a, const Array& b, const char* op) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::none;
    if (a.size() == 1) return Broadcast::lhs_scalar;
    if (b.size() == 1) return Broadcast::rhs_scalar;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

// Returns `a` itself when it already has the target shape, otherwise a
// scalar expanded into `storage`.
inline const Array& expand(const Array& a, Eigen::Index rows, Eigen::Index cols, Array& storage) {
    if (a.rows() == rows && a.cols() == cols) return a;
    storage = Array::Constant(rows, cols, a(0, 0));
    return storage;
}

// Adds a full-shape gradient to node `id`, summing it down for scalar operands.
inline void accumulate_reduced(Tape& t, std::size_t id, const Array& g) {
    const Array& like = t.value(id);
    if (like.rows() == g.rows() && like.cols() == g.cols()) {
        t.accumulate(id, g);
    } else {
        t.accumulate(id, Array::Constant(1, 1, g.sum()));
    }
}

// Local-derivative signature: (A, B, out, upstream) -> gradient wrt that operand,
// all in the broadcast (full) shape.
using BinaryGrad = std::function<Array(const Array&, const Array&, const Array&, const Array&)>;

inline Var binary(const Var& a, const Var& b, const char* op,
                  const std::function<Array(const Array&, const Array&)>& fwd, BinaryGrad da,
                  BinaryGrad db) {
    check_same_tape(a, b);
    const Array& av = a.value();
    const Array& bv = b.value();
    broadcast_kind(av, bv, op);
    const Eigen::Index r = std::max(av.rows(), bv.rows());
    const Eigen::Index c = std::max(av.cols(), bv.cols());
    Array sa, sb;
    Array out = fwd(expand(av, r, c, sa), expand(bv, r, c, sb));
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().push(
        std::move(out), {ia, ib},
        [ia, ib, r, c, da = std::move(da), db = std::move(db)](Tape& t, std::size_t self) {
            const Array& g = t.grad(self);
            const Array& o = t.value(self);
            Array sa, sb;
            const Array& A = expand(t.value(ia), r, c, sa);
            const Array& B = expand(t.value(ib), r, c, sb);
            if (t.requires_grad(ia)) accumulate_reduced(t, ia, da(A, B, o, g));
            if (t.requires_grad(ib)) accumulate_reduced(t, ib, db(A, B, o, g));
        });
}

// Local-derivative signature: (A, out) -> dout/dA elementwise.
inline Var unary(const Var& a, const std::function<Array(const Array&)>& fwd,
                 std::function<Array(const Array&, const Array&)> local) {
    Array out = fwd(a.value());
    const std::size_t ia = a.id();
    return a.tape().push(out, {ia},
                         [ia, local = std::move(local)](Tape& t, std::size_t self) {
                             const Array d = local(t.value(ia), t.value(self));
                             t.accumulate(ia, (t.grad(self).array() * d.array()).matrix());
                         });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "add", [](const Array& A, const Array& B) -> Array { return A + B; },
        [](const Array&, const Array&, const Array&, const Array& g) -> Array { return g; },
        [](const Array&, const Array&, const Array&, const Array& g) -> Array { return g; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "sub", [](const Array& A, const Array& B) -> Array { return A - B; },
        [](const Array&, const Array&, const Array&, const Array& g) -> Array { return g; },
        [](const Array&, const Array&, const Array&, const Array& g) -> Array { return -g; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary(
        a, b, "mul",
        [](const Array& A, const Array& B) -> Array { return (A.array() * B.array()).matrix(); },
        [](const Array&, const Array& B, const Array&, const Array& g) -> Array {
            return (g.array() * B.array()).matrix();
        },
        [](const Array& A, const Array&, const Array&, const Array& g) -> Array {
            return (g.array() * A.array()).matrix();
        });
}

inline Var div(const Var& a, const Var& b) {
    if ((b.value().array() == 0.0).any()) throw DomainError("division by zero");
    return detail::binary(
        a, b, "div",
        [](const Array& A, const Array& B) -> Array { return (A.array() / B.array()).matrix(); },
        [](const Array&, const Array& B, const Array&, const Array& g) -> Array {
            return (g.array() / B.array()).matrix();
        },
        [](const Array&, const Array& B, const Array& out, const Array& g) -> Array {
            return (-g.array() * out.array() / B.array()).matrix();
        });
}

inline Var neg(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return -A; },
        [](const Array& A, const Array&) -> Array { return Array::Constant(A.rows(), A.cols(), -1.0); });
}

inline Var exp(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().exp().matrix(); },
        [](const Array&, const Array& out) -> Array { return out; });
}

inline Var log(const Var& a) {
    if ((a.value().array() <= 0.0).any()) throw DomainError("log of a nonpositive value");
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().log().matrix(); },
        [](const Array& A, const Array&) -> Array { return A.array().inverse().matrix(); });
}

inline Var sqrt(const Var& a) {
    if ((a.value().array() <= 0.0).any()) throw DomainError("sqrt of a nonpositive value");
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().sqrt().matrix(); },
        [](const Array&, const Array& out) -> Array { return (0.5 / out.array()).matrix(); });
}

inline Var tanh(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().tanh().matrix(); },
        [](const Array&, const Array& out) -> Array {
            return (1.0 - out.array().square()).matrix();
        });
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return A.unaryExpr([](double x) { return sigmoid(x); }); },
        [](const Array&, const Array& out) -> Array {
            return (out.array() * (1.0 - out.array())).matrix();
        });
}

inline Var square(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().square().matrix(); },
        [](const Array& A, const Array&) -> Array { return (2.0 * A.array()).matrix(); });
}

// d|x|/dx is taken as 0 at x = 0.
inline Var abs(const Var& a) {
    return detail::unary(
        a, [](const Array& A) -> Array { return A.array().abs().matrix(); },
        [](const Array& A, const Array&) -> Array {
            return A.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
        });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
    detail::check_same_tape(a, b);
    const Array& av = a.value();
    const Array& bv = b.value();
    if (av.cols() != bv.rows())
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(av) + " * " +
                         shape_str(bv));
    Array out = av * bv;
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().push(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Array& g = t.grad(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
    const Array& av = a.value();
    if (av.size() == 0) throw EmptyInputError("sum of an empty array");
    const std::size_t ia = a.id();
    return a.tape().push(Array::Constant(1, 1, av.sum()), {ia}, [ia](Tape& t, std::size_t self) {
        const Array& v = t.value(ia);
        t.accumulate(ia, Array::Constant(v.rows(), v.cols(), t.grad(self)(0, 0)));
    });
}

inline Var mean(const Var& a) {
    const Array& av = a.value();
    if (av.size() == 0) throw EmptyInputError("mean of an empty array");
    const std::size_t ia = a.id();
    const double n = static_cast<double>(av.size());
    return a.tape().push(Array::Constant(1, 1, av.sum() / n), {ia},
                         [ia, n](Tape& t, std::size_t self) {
                             const Array& v = t.value(ia);
                             t.accumulate(ia, Array::Constant(v.rows(), v.cols(),
                                                              t.grad(self)(0, 0) / n));
                         });
}

// ---------------------------------------------------------------- operators

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

inline Var operator+(const Var& a, double b) { return add(a, a.tape().constant(b)); }
inline Var operator+(double a, const Var& b) { return add(b.tape().constant(a), b); }
inline Var operator-(const Var& a, double b) { return sub(a, a.tape().constant(b)); }
inline Var operator-(double a, const Var& b) { return sub(b.tape().constant(a), b); }
inline Var operator*(const Var& a, double b) { return mul(a, a.tape().constant(b)); }
inline Var operator*(double a, const Var& b) { return mul(b.tape().constant(a), b); }
inline Var operator/(const Var& a, double b) { return div(a, a.tape().constant(b)); }

// ---------------------------------------------------------------- composed helpers

// [1 x n] row repeated over `rows` rows: ones(rows x 1) * row.
inline Var broadcast_rows(const Var& row, Eigen::Index rows) {
    if (row.rows() != 1) throw ShapeError("broadcast_rows expects a row vector, got " +
                                          shape_str(row.value()));
    return matmul(row.tape().constant(Array::Ones(rows, 1)), row);
}

// [m x n] -> [m x 1] column of row sums: a * ones(n x 1).
inline Var row_sums(const Var& a) {
    return matmul(a, a.tape().constant(Array::Ones(a.cols(), 1)));
}

// Multiplies column j of `a` by weights[j]: a * diag(weights).
inline Var scale_columns(const Var& a, const Eigen::VectorXd& weights) {
    if (weights.size() != a.cols())
        throw ShapeError("scale_columns: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(a.value()));
    return matmul(a, a.tape().constant(Array(weights.asDiagonal())));
}

// Dense affine map x * W + b with b broadcast over rows.
inline Var affine(const Var& x, const Var& w, const Var& b) {
    return add(matmul(x, w), broadcast_rows(b, x.rows()));
}

}  // namespace flowtame::ad
