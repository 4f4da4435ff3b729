#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "relufair/data.hpp"
#include "relufair/model.hpp"
#include "relufair/trainer.hpp"

namespace relufair {

struct SnlResult {
    GatedNetwork net;
    // Gate values learned in the relaxation phase, flattened layer by layer.
    std::vector<double> learned_gates;
};

// Keep the r largest gates rectified and linearize the rest. Ties go to the
// lower (layer, unit) position, which is the flattened index order.
inline std::vector<double> top_r_mask(const std::vector<double>& gates, std::size_t r) {
    if (r > gates.size()) throw PreconditionError("top_r_mask: budget exceeds unit count");
    std::vector<std::size_t> order(gates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&gates](std::size_t a, std::size_t b) { return gates[a] > gates[b]; });
    std::vector<double> mask(gates.size(), 0.0);
    for (std::size_t k = 0; k < r; ++k) mask[order[k]] = 1.0;
    return mask;
}

// Selective linearization with a learned per-unit mask:
//  1. gates become learnable at 1.0 and are trained jointly with the weights on
//     cross-entropy + gate_l1_weight * sum(c), clamped to [0, 1] after each step;
//  2. the r largest gates are frozen at 1, all others at 0;
//  3. the frozen network is returned (fine-tuning is left to the caller).
inline SnlResult linearize_snl_detailed(const GatedNetwork& net, const ReluBudget& budget, double gate_l1_weight,
                                        int epochs, const GroupedDataset& data, std::uint64_t seed,
                                        TrainConfig cfg = {}) {
    if (net.gate_mode() != GateMode::frozen || net.relu_count() != net.total_units())
        throw PreconditionError("linearize_snl: input network must be frozen with every unit rectified");
    if (budget.total != net.total_units())
        throw PreconditionError("linearize_snl: budget total does not match the network's unit count");
    if (budget.retained_count > budget.total || budget.retained_count < 1)
        throw PreconditionError("linearize_snl: retained count must lie in [1, R]");
    if (!(gate_l1_weight >= 0.0)) throw PreconditionError("linearize_snl: gate_l1_weight must be >= 0");
    if (epochs < 0) throw PreconditionError("linearize_snl: epochs must be >= 0");

    const std::size_t p = net.num_parameters();
    const std::size_t units = net.total_units();
    std::vector<double> params = net.parameters().vector();
    params.insert(params.end(), units, 1.0);

    if (epochs > 0) {
        detail::require_trainable(net, data, "linearize_snl");
        cfg.epochs = epochs;
        cfg.seed = seed;
        auto objective = [&](const ad::Var& all, std::span<const std::size_t> batch) {
            const ad::Var theta = ad::slice(all, 0, 1, p);
            const ad::Var gates = ad::slice(all, p, 1, units);
            const auto labels = detail::batch_labels(data, batch);
            const ad::Var logits = net.logits(theta, detail::batch_features(data, batch), &gates);
            const ad::Var task = ad::mean(cross_entropy_per_sample(logits, labels));
            return ad::add(task, ad::scale(ad::sum(gates), gate_l1_weight));
        };
        auto clamp_gates = [p](std::vector<double>& values) {
            for (std::size_t i = p; i < values.size(); ++i) values[i] = std::clamp(values[i], 0.0, 1.0);
        };
        detail::descend(params, data, cfg, objective, clamp_gates, nullptr);
    }

    SnlResult result{net, std::vector<double>(params.begin() + static_cast<std::ptrdiff_t>(p), params.end())};
    params.resize(p);
    result.net.set_parameters(ParameterVector(params));
    result.net.set_flat_gates(top_r_mask(result.learned_gates, budget.retained_count), GateMode::frozen);
    return result;
}

inline GatedNetwork linearize_snl(const GatedNetwork& net, const ReluBudget& budget, double gate_l1_weight, int epochs,
                                  const GroupedDataset& data, std::uint64_t seed, TrainConfig cfg = {}) {
    return linearize_snl_detailed(net, budget, gate_l1_weight, epochs, data, seed, cfg).net;
}

// Frozen mask keeping round(fraction * width) leading units of every hidden
// layer rectified; used to build linearized networks trained from scratch.
inline GatedNetwork with_layerwise_budget(GatedNetwork net, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw PreconditionError("with_layerwise_budget: fraction outside [0, 1]");
    std::vector<std::vector<double>> gates;
    for (std::size_t w : net.shape().hidden_widths) {
        const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(w)));
        std::vector<double> layer(w, 0.0);
        std::fill_n(layer.begin(), keep, 1.0);
        gates.push_back(layer);
    }
    net.set_gates(gates, GateMode::frozen);
    return net;
}

} // namespace relufair
