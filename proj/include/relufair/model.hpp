#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "relufair/autodiff.hpp"
#include "relufair/error.hpp"
#include "relufair/rng.hpp"
#include "relufair/tensor.hpp"

namespace relufair {

// softmax: one logit per class. sigmoid: binary only; a single score z is
// emitted as the logit pair (0, z), so softmax over the pair is (1 - s, s)
// with s = sigmoid(z) and cross-entropy reduces to binary cross-entropy.
enum class OutputHead { softmax, sigmoid };

inline std::string to_string(OutputHead head) {
    return head == OutputHead::softmax ? "softmax" : "sigmoid";
}

inline OutputHead parse_output_head(const std::string& name) {
    if (name == "softmax") return OutputHead::softmax;
    if (name == "sigmoid") return OutputHead::sigmoid;
    throw PreconditionError("unknown output head '" + name + "'");
}

struct NetworkShape {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_widths;
    std::size_t num_classes = 0;
    OutputHead head = OutputHead::softmax;

    void validate() const {
        if (input_dim < 1) throw PreconditionError("NetworkShape: input_dim must be >= 1");
        if (hidden_widths.empty()) throw PreconditionError("NetworkShape: need at least one hidden layer");
        for (std::size_t w : hidden_widths)
            if (w < 1) throw PreconditionError("NetworkShape: hidden widths must be >= 1");
        if (num_classes < 2) throw PreconditionError("NetworkShape: need at least two classes");
        if (head == OutputHead::sigmoid && num_classes != 2)
            throw PreconditionError("NetworkShape: sigmoid head requires exactly two classes");
    }

    std::size_t output_units() const { return head == OutputHead::sigmoid ? 1 : num_classes; }

    std::size_t total_units() const {
        return std::accumulate(hidden_widths.begin(), hidden_widths.end(), std::size_t{0});
    }

    // Fan-in/fan-out of each dense layer, hidden layers first, head last.
    std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        std::size_t in = input_dim;
        for (std::size_t w : hidden_widths) {
            dims.emplace_back(in, w);
            in = w;
        }
        dims.emplace_back(in, output_units());
        return dims;
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (auto [in, out] : layer_dims()) n += in * out + out;
        return n;
    }

    friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

enum class GateMode { frozen, learnable };

inline std::string to_string(GateMode mode) { return mode == GateMode::frozen ? "frozen" : "learnable"; }

// Number of rectified units kept out of the total R.
struct ReluBudget {
    double retained_fraction = 1.0;
    std::size_t retained_count = 0;
    std::size_t total = 0;

    static ReluBudget from_fraction(double fraction, std::size_t total) {
        if (!(fraction > 0.0 && fraction <= 1.0))
            throw PreconditionError("ReluBudget: fraction must lie in (0, 1]");
        if (total < 1) throw PreconditionError("ReluBudget: network has no activation units");
        const auto r = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total)));
        if (r < 1) throw PreconditionError("ReluBudget: budget rounds to zero retained units");
        return ReluBudget{fraction, r, total};
    }
};

struct DenseLayer {
    Tensor weight;  // fan_in x fan_out
    Tensor bias;    // 1 x fan_out
};

// Feed-forward classifier whose hidden units apply c * max(z, 0) + (1 - c) * z
// with a per-unit gate c in [0, 1]. Frozen networks have every gate at exactly
// 0 (linear) or 1 (rectified).
class GatedNetwork {
public:
    GatedNetwork() = default;

    explicit GatedNetwork(NetworkShape shape) : shape_(std::move(shape)) {
        shape_.validate();
        for (auto [in, out] : shape_.layer_dims())
            layers_.push_back({Tensor::zeros(in, out), Tensor::zeros(1, out)});
        for (std::size_t w : shape_.hidden_widths) gates_.emplace_back(w, 1.0);
    }

    // He-normal weights, zero biases, all gates rectified.
    static GatedNetwork initialized(NetworkShape shape, std::uint64_t seed) {
        GatedNetwork net(std::move(shape));
        Rng rng = Rng::derive(seed, 0x1417);
        for (DenseLayer& layer : net.layers_) {
            const double stddev = std::sqrt(2.0 / static_cast<double>(layer.weight.rows()));
            for (double& w : layer.weight.values()) w = rng.normal(0.0, stddev);
        }
        return net;
    }

    const NetworkShape& shape() const { return shape_; }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }
    const std::vector<std::vector<double>>& gates() const { return gates_; }
    GateMode gate_mode() const { return mode_; }

    std::size_t num_parameters() const { return shape_.num_parameters(); }
    std::size_t total_units() const { return shape_.total_units(); }

    ParameterVector parameters() const {
        std::vector<double> flat;
        flat.reserve(num_parameters());
        for (const DenseLayer& layer : layers_) {
            flat.insert(flat.end(), layer.weight.values().begin(), layer.weight.values().end());
            flat.insert(flat.end(), layer.bias.values().begin(), layer.bias.values().end());
        }
        return ParameterVector(std::move(flat));
    }

    void set_parameters(const ParameterVector& theta) {
        if (theta.size() != num_parameters())
            throw ShapeError("set_parameters: expected " + std::to_string(num_parameters()) +
                             " values, got " + std::to_string(theta.size()));
        std::size_t pos = 0;
        for (DenseLayer& layer : layers_) {
            for (double& w : layer.weight.values()) w = theta[pos++];
            for (double& b : layer.bias.values()) b = theta[pos++];
        }
    }

    // Gates flattened layer by layer.
    std::vector<double> flat_gates() const {
        std::vector<double> flat;
        for (const auto& layer : gates_) flat.insert(flat.end(), layer.begin(), layer.end());
        return flat;
    }

    void set_gates(const std::vector<std::vector<double>>& gates, GateMode mode) {
        if (gates.size() != gates_.size()) throw ShapeError("set_gates: wrong number of layers");
        for (std::size_t l = 0; l < gates.size(); ++l) {
            if (gates[l].size() != gates_[l].size()) throw ShapeError("set_gates: wrong layer width");
            for (double c : gates[l]) {
                if (!(c >= 0.0 && c <= 1.0)) throw PreconditionError("set_gates: gate outside [0, 1]");
                if (mode == GateMode::frozen && c != 0.0 && c != 1.0)
                    throw PreconditionError("set_gates: frozen gates must be exactly 0 or 1");
            }
        }
        gates_ = gates;
        mode_ = mode;
    }

    void set_flat_gates(std::span<const double> flat, GateMode mode) {
        if (flat.size() != total_units()) throw ShapeError("set_flat_gates: wrong gate count");
        std::vector<std::vector<double>> gates;
        std::size_t pos = 0;
        for (std::size_t w : shape_.hidden_widths) {
            gates.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                               flat.begin() + static_cast<std::ptrdiff_t>(pos + w));
            pos += w;
        }
        set_gates(gates, mode);
    }

    // Number of rectified units; only meaningful once gates are frozen.
    std::size_t relu_count() const {
        if (mode_ != GateMode::frozen) throw ModeError("relu_count: gates are learnable, freeze them first");
        std::size_t count = 0;
        for (const auto& layer : gates_)
            count += static_cast<std::size_t>(std::count(layer.begin(), layer.end(), 1.0));
        return count;
    }

    // Differentiable logits for a batch x (n x input_dim). `theta` is the flat
    // 1 x P parameter row. When `gate_row` is given (1 x R) it replaces the
    // stored gates, which is how gate learning is expressed.
    ad::Var logits(const ad::Var& theta, const ad::Var& x, const ad::Var* gate_row = nullptr) const {
        if (x.cols() != shape_.input_dim)
            throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, network expects " +
                             std::to_string(shape_.input_dim));
        if (theta.value().size() != num_parameters()) throw ShapeError("forward: parameter length mismatch");
        ad::Var h = x;
        std::size_t pos = 0;
        std::size_t gate_pos = 0;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const std::size_t in = layers_[l].weight.rows();
            const std::size_t out = layers_[l].weight.cols();
            ad::Var w = ad::slice(theta, pos, in, out);
            pos += in * out;
            ad::Var b = ad::slice(theta, pos, 1, out);
            pos += out;
            ad::Var z = ad::add(ad::matmul(h, w), b);
            if (l + 1 == layers_.size()) {
                h = z;
                break;
            }
            if (gate_row != nullptr) {
                ad::Var c = ad::slice(*gate_row, gate_pos, 1, out);
                h = gated_activation(z, c);
            } else {
                h = frozen_activation(z, gates_[l]);
            }
            gate_pos += out;
        }
        if (shape_.head == OutputHead::sigmoid)
            return ad::matmul(h, ad::constant(Tensor::row({0.0, 1.0})));
        return h;
    }

    // Plain evaluation without graph recording.
    Tensor forward(const Tensor& x) const {
        ad::GradModeGuard mode(false);
        return logits(ad::constant(parameters().as_row()), ad::constant(x)).value();
    }

    std::vector<int> predict(const Tensor& x) const { return argmax_rows(forward(x)); }

    // Row-wise argmax, ties resolved toward the smallest class index.
    static std::vector<int> argmax_rows(const Tensor& logits) {
        std::vector<int> out(logits.rows());
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < logits.cols(); ++j)
                if (logits(i, j) > logits(i, best)) best = j;
            out[i] = static_cast<int>(best);
        }
        return out;
    }

    // z + c * (relu(z) - z): exactly relu(z) at c = 1 and z at c = 0.
    static ad::Var gated_activation(const ad::Var& z, const ad::Var& c) {
        return ad::add(z, ad::mul(ad::sub(ad::relu(z), z), c));
    }

    friend bool operator==(const GatedNetwork& a, const GatedNetwork& b) {
        if (!(a.shape_ == b.shape_) || a.gates_ != b.gates_ || a.mode_ != b.mode_) return false;
        return a.parameters() == b.parameters();
    }

private:
    static ad::Var frozen_activation(const ad::Var& z, const std::vector<double>& gates) {
        const bool all_on = std::all_of(gates.begin(), gates.end(), [](double c) { return c == 1.0; });
        if (all_on) return ad::relu(z);
        const bool all_off = std::all_of(gates.begin(), gates.end(), [](double c) { return c == 0.0; });
        if (all_off) return z;
        return gated_activation(z, ad::constant(Tensor::row(gates)));
    }

    NetworkShape shape_;
    std::vector<DenseLayer> layers_;
    std::vector<std::vector<double>> gates_;
    GateMode mode_ = GateMode::frozen;
};

// Layer-granular linearization: gates of the listed hidden layers become 0,
// every other gate 1. Weights are untouched.
inline GatedNetwork linearize_dr(const GatedNetwork& net, const std::set<std::size_t>& linear_layers) {
    const std::size_t depth = net.shape().hidden_widths.size();
    for (std::size_t l : linear_layers)
        if (l >= depth)
            throw PreconditionError("linearize_dr: layer index " + std::to_string(l) + " out of range");
    if (linear_layers.size() == depth)
        throw PreconditionError("linearize_dr: linearizing every layer leaves an affine network");
    GatedNetwork out = net;
    std::vector<std::vector<double>> gates;
    for (std::size_t l = 0; l < depth; ++l)
        gates.emplace_back(net.shape().hidden_widths[l], linear_layers.contains(l) ? 0.0 : 1.0);
    out.set_gates(gates, GateMode::frozen);
    return out;
}

// Euclidean distance between the weight/bias vectors of two same-shape networks.
inline double parameter_distance(const GatedNetwork& a, const GatedNetwork& b) {
    if (!(a.shape() == b.shape())) throw ShapeError("parameter_distance: network shapes differ");
    return (a.parameters() - b.parameters()).norm();
}

} // namespace relufair
