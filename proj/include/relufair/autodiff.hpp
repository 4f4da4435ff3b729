#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// Every primitive's backward rule is itself written in terms of primitives, so
// running the backward pass with graph recording enabled produces a
// differentiable gradient. Differentiating <grad f, v> again yields Hessian
// vector products without ever forming the Hessian.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "relufair/error.hpp"
#include "relufair/tensor.hpp"

namespace relufair::ad {

class Var;

using BackwardFn = std::function<std::vector<Var>(const Var& upstream)>;

struct Node {
    Tensor value;
    std::vector<Var> parents;
    BackwardFn backward;
    const char* op = "leaf";
    bool requires_grad = false;
};

// Handle to a node of the computation graph. Cheap to copy.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const char* op() const { return node_->op; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    double item() const { return node_->value.item(); }
    Node* node() const { return node_.get(); }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local bool grad_mode_enabled = true;
} // namespace detail

inline bool grad_mode() { return detail::grad_mode_enabled; }

// Scoped switch for graph recording; restores the previous mode on exit.
class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode_enabled) {
        detail::grad_mode_enabled = enabled;
    }
    ~GradModeGuard() { detail::grad_mode_enabled = previous_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

inline Var constant(Tensor value) {
    if (!value.all_finite()) throw NumericError("constant: non-finite input");
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "constant";
    return Var(std::move(node));
}

inline Var parameter(Tensor value) {
    if (!value.all_finite()) throw NumericError("parameter: non-finite input");
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "parameter";
    node->requires_grad = true;
    return Var(std::move(node));
}

namespace detail {

inline Var make(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = false;
    if (grad_mode_enabled)
        for (const Var& p : parents) needs_grad = needs_grad || p.requires_grad();
    if (needs_grad) {
        node->parents = std::move(parents);
        node->backward = std::move(backward);
        node->requires_grad = true;
    }
    return Var(std::move(node));
}

} // namespace detail

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var matmul(const Var& a, const Var& b);
Var sum_to(const Var& a, std::size_t rows, std::size_t cols);
Var expand(const Var& a, std::size_t rows, std::size_t cols);
Var slice(const Var& flat, std::size_t offset, std::size_t rows, std::size_t cols);
Var pad(const Var& block, std::size_t offset, std::size_t rows, std::size_t cols);
Var exp(const Var& a);
Var reciprocal(const Var& a);
Var log_softmax(const Var& a);

inline bool broadcastable(const Var& big, const Var& small) {
    return (small.rows() == big.rows() || small.rows() == 1) &&
           (small.cols() == big.cols() || small.cols() == 1);
}

// a + b, where the smaller operand broadcasts as a row, column or scalar.
inline Var add(const Var& a, const Var& b) {
    if (!broadcastable(a, b)) {
        if (broadcastable(b, a)) return add(b, a);
        throw ShapeError("add: " + a.value().shape_string() + " + " + b.value().shape_string());
    }
    Tensor value = kernel::broadcast(a.value(), b.value(), std::plus<>(), "add");
    return detail::make("add", std::move(value), {a, b}, [a, b](const Var& g) {
        return std::vector<Var>{g, b.requires_grad() ? sum_to(g, b.rows(), b.cols()) : Var()};
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

inline Var add_scalar(const Var& a, double c) { return add(a, constant(Tensor::scalar(c))); }

// Elementwise product with broadcasting of the smaller operand.
inline Var mul(const Var& a, const Var& b) {
    if (!broadcastable(a, b)) {
        if (broadcastable(b, a)) return mul(b, a);
        throw ShapeError("mul: " + a.value().shape_string() + " * " + b.value().shape_string());
    }
    Tensor value = kernel::broadcast(a.value(), b.value(), std::multiplies<>(), "mul");
    return detail::make("mul", std::move(value), {a, b}, [a, b](const Var& g) {
        Var ga = a.requires_grad() ? mul(g, b) : Var();
        Var gb = b.requires_grad() ? sum_to(mul(g, a), b.rows(), b.cols()) : Var();
        return std::vector<Var>{ga, gb};
    });
}

inline Var scale(const Var& a, double factor) {
    Tensor value = kernel::map(a.value(), [factor](double x) { return factor * x; });
    return detail::make("scale", std::move(value), {a},
                        [factor](const Var& g) { return std::vector<Var>{scale(g, factor)}; });
}

inline Var transpose(const Var& a) {
    return detail::make("transpose", kernel::transpose(a.value()), {a},
                        [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

inline Var matmul(const Var& a, const Var& b) {
    Tensor value = kernel::matmul(a.value(), b.value());
    return detail::make("matmul", std::move(value), {a, b}, [a, b](const Var& g) {
        Var ga = a.requires_grad() ? matmul(g, transpose(b)) : Var();
        Var gb = b.requires_grad() ? matmul(transpose(a), g) : Var();
        return std::vector<Var>{ga, gb};
    });
}

// Sum over broadcast dimensions down to (rows, cols); each is 1 or unchanged.
inline Var sum_to(const Var& a, std::size_t rows, std::size_t cols) {
    if (a.rows() == rows && a.cols() == cols) return a;
    Tensor value = kernel::reduce_to(a.value(), rows, cols);
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    return detail::make("sum_to", std::move(value), {a},
                        [r, c](const Var& g) { return std::vector<Var>{expand(g, r, c)}; });
}

inline Var expand(const Var& a, std::size_t rows, std::size_t cols) {
    if (a.rows() == rows && a.cols() == cols) return a;
    Tensor value = kernel::expand(a.value(), rows, cols);
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    return detail::make("expand", std::move(value), {a},
                        [r, c](const Var& g) { return std::vector<Var>{sum_to(g, r, c)}; });
}

inline Var sum(const Var& a) { return sum_to(a, 1, 1); }

inline Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

// View `rows x cols` values starting at `offset` of a flattened tensor.
inline Var slice(const Var& flat, std::size_t offset, std::size_t rows, std::size_t cols) {
    const std::size_t total = flat.value().size();
    if (offset + rows * cols > total) throw ShapeError("slice: range exceeds tensor size");
    const auto src = flat.value().values();
    std::vector<double> out(src.begin() + static_cast<std::ptrdiff_t>(offset),
                            src.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
    const std::size_t fr = flat.rows();
    const std::size_t fc = flat.cols();
    return detail::make("slice", Tensor::matrix(rows, cols, std::move(out)), {flat},
                        [offset, fr, fc](const Var& g) {
                            return std::vector<Var>{pad(g, offset, fr, fc)};
                        });
}

// Inverse of slice: zeros of shape rows x cols with `block` written at `offset`.
inline Var pad(const Var& block, std::size_t offset, std::size_t rows, std::size_t cols) {
    const std::size_t n = block.value().size();
    if (offset + n > rows * cols) throw ShapeError("pad: block exceeds target size");
    Tensor value = Tensor::zeros(rows, cols);
    const auto src = block.value().values();
    for (std::size_t i = 0; i < n; ++i) value[offset + i] = src[i];
    const std::size_t br = block.rows();
    const std::size_t bc = block.cols();
    return detail::make("pad", std::move(value), {block}, [offset, br, bc](const Var& g) {
        return std::vector<Var>{slice(g, offset, br, bc)};
    });
}

// max(x, 0); the derivative at exactly 0 is taken as 0.
inline Var relu(const Var& a) {
    Tensor value = kernel::map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
    return detail::make("relu", std::move(value), {a}, [a](const Var& g) {
        Tensor mask = kernel::map(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
        return std::vector<Var>{mul(g, constant(std::move(mask)))};
    });
}

inline Var abs(const Var& a) {
    Tensor value = kernel::map(a.value(), [](double x) { return std::fabs(x); });
    return detail::make("abs", std::move(value), {a}, [a](const Var& g) {
        Tensor sign = kernel::map(a.value(), [](double x) {
            return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        });
        return std::vector<Var>{mul(g, constant(std::move(sign)))};
    });
}

inline Var exp(const Var& a) {
    Tensor value = kernel::map(a.value(), [](double x) { return std::exp(x); });
    return detail::make("exp", std::move(value), {a},
                        [a](const Var& g) { return std::vector<Var>{mul(g, exp(a))}; });
}

inline Var log(const Var& a) {
    for (double x : a.value().values())
        if (!(x > 0.0)) throw NumericError("log: argument must be positive");
    Tensor value = kernel::map(a.value(), [](double x) { return std::log(x); });
    return detail::make("log", std::move(value), {a},
                        [a](const Var& g) { return std::vector<Var>{mul(g, reciprocal(a))}; });
}

inline Var reciprocal(const Var& a) {
    Tensor value = kernel::map(a.value(), [](double x) { return 1.0 / x; });
    return detail::make("reciprocal", std::move(value), {a}, [a](const Var& g) {
        Var r = reciprocal(a);
        return std::vector<Var>{neg(mul(g, mul(r, r)))};
    });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
    Tensor value = kernel::map(a.value(), sigmoid_value);
    return detail::make("sigmoid", std::move(value), {a}, [a](const Var& g) {
        Var s = sigmoid(a);
        return std::vector<Var>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
    });
}

// Row-wise log of softmax, computed with the max-shift.
inline Var log_softmax(const Var& a) {
    const Tensor& x = a.value();
    Tensor value = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double top = x(i, 0);
        for (std::size_t j = 1; j < x.cols(); ++j) top = std::max(top, x(i, j));
        double total = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) total += std::exp(x(i, j) - top);
        const double log_total = top + std::log(total);
        for (std::size_t j = 0; j < x.cols(); ++j) value(i, j) = x(i, j) - log_total;
    }
    return detail::make("log_softmax", std::move(value), {a}, [a](const Var& g) {
        Var probs = exp(log_softmax(a));
        return std::vector<Var>{sub(g, mul(probs, sum_to(g, g.rows(), 1)))};
    });
}

// Topological record of the graph reachable from `output` through nodes that
// require gradients. Parents always precede their children in `order`.
class Tape {
public:
    explicit Tape(const Var& output) {
        if (!output.requires_grad()) return;
        std::unordered_map<Node*, bool> done;
        std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
        done[output.node()] = false;
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* parent = node->parents[next++].node();
                if (parent == nullptr || !parent->requires_grad) continue;
                if (done.contains(parent)) continue;
                done[parent] = false;
                stack.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                done[node] = true;
                stack.pop_back();
            }
        }
    }

    const std::vector<Node*>& order() const { return order_; }

private:
    std::vector<Node*> order_;
};

// Gradients of `output` with respect to each of `inputs`. `output` must be a
// single element unless `seed` (same shape as output) is supplied. With
// `create_graph` the returned gradients are themselves differentiable.
inline std::vector<Var> grad(const Var& output, std::span<const Var> inputs,
                             bool create_graph = false, const Var* seed = nullptr) {
    std::vector<Var> result(inputs.size());
    if (!output.requires_grad()) {
        for (std::size_t i = 0; i < inputs.size(); ++i)
            result[i] = constant(Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        return result;
    }
    if (seed == nullptr && output.value().size() != 1)
        throw ShapeError("grad: output must be a scalar when no seed is given");

    GradModeGuard mode(create_graph);
    Tape tape(output);
    std::unordered_map<Node*, Var> grads;
    grads[output.node()] = seed ? *seed : constant(Tensor::filled(output.rows(), output.cols(), 1.0));

    const auto& order = tape.order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto found = grads.find(node);
        if (found == grads.end() || !node->backward) continue;
        const Var upstream = found->second;
        std::vector<Var> parent_grads = node->backward(upstream);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            const Var& parent = node->parents[i];
            if (!parent.requires_grad() || !parent_grads[i].defined()) continue;
            auto slot = grads.find(parent.node());
            if (slot == grads.end())
                grads.emplace(parent.node(), parent_grads[i]);
            else
                slot->second = add(slot->second, parent_grads[i]);
        }
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto found = grads.find(inputs[i].node());
        result[i] = found != grads.end()
                        ? found->second
                        : constant(Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
    }
    return result;
}

inline Var grad(const Var& output, const Var& input, bool create_graph = false) {
    const Var inputs[] = {input};
    return grad(output, inputs, create_graph)[0];
}

} // namespace relufair::ad

namespace relufair {

// Flat, ordered view of a model's trainable values.
class ParameterVector {
public:
    ParameterVector() = default;
    explicit ParameterVector(std::vector<double> values) : values_(std::move(values)) {}
    static ParameterVector zeros(std::size_t n) { return ParameterVector(std::vector<double>(n, 0.0)); }

    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    const std::vector<double>& vector() const { return values_; }

    double norm() const { return kernel::norm(values_); }
    double dot(const ParameterVector& other) const {
        check_size(other, "dot");
        return kernel::dot(values_, other.values_);
    }

    Tensor as_row() const { return Tensor::row(values_); }

    ParameterVector operator-(const ParameterVector& other) const {
        check_size(other, "subtract");
        ParameterVector out(values_);
        for (std::size_t i = 0; i < size(); ++i) out.values_[i] -= other.values_[i];
        return out;
    }
    ParameterVector operator+(const ParameterVector& other) const {
        check_size(other, "add");
        ParameterVector out(values_);
        for (std::size_t i = 0; i < size(); ++i) out.values_[i] += other.values_[i];
        return out;
    }
    ParameterVector operator*(double factor) const {
        ParameterVector out(values_);
        for (double& v : out.values_) v *= factor;
        return out;
    }

    friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

private:
    void check_size(const ParameterVector& other, const char* op) const {
        if (other.size() != size())
            throw ShapeError(std::string("ParameterVector ") + op + ": size mismatch");
    }

    std::vector<double> values_;
};

// Scalar objective of a flattened parameter row vector (1 x P).
using ScalarFunction = std::function<ad::Var(const ad::Var& theta)>;

inline double evaluate(const ScalarFunction& f, const ParameterVector& at) {
    ad::GradModeGuard mode(false);
    const ad::Var out = f(ad::constant(at.as_row()));
    return out.item();
}

inline std::pair<double, ParameterVector> value_and_grad(const ScalarFunction& f,
                                                         const ParameterVector& at) {
    const ad::Var theta = ad::parameter(at.as_row());
    ad::Var out;
    {
        ad::GradModeGuard mode(true);
        out = f(theta);
    }
    if (out.value().size() != 1) throw ShapeError("grad: objective must be scalar");
    const ad::Var g = ad::grad(out, theta);
    return {out.item(), ParameterVector(g.value().to_vector())};
}

inline ParameterVector grad(const ScalarFunction& f, const ParameterVector& at) {
    return value_and_grad(f, at).second;
}

// Hessian-vector product H(at) * v by differentiating <grad f, v>.
inline ParameterVector hvp(const ScalarFunction& f, const ParameterVector& at,
                           const ParameterVector& v) {
    if (v.size() != at.size()) throw ShapeError("hvp: direction length differs from parameters");
    ad::GradModeGuard mode(true);
    const ad::Var theta = ad::parameter(at.as_row());
    const ad::Var out = f(theta);
    if (out.value().size() != 1) throw ShapeError("hvp: objective must be scalar");
    const ad::Var g = ad::grad(out, theta, /*create_graph=*/true);
    const ad::Var directional = ad::dot(g, ad::constant(v.as_row()));
    const ad::Var hv = ad::grad(directional, theta);
    return ParameterVector(hv.value().to_vector());
}

} // namespace relufair
