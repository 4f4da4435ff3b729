#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "relufair/data.hpp"
#include "relufair/linearize.hpp"
#include "relufair/model.hpp"
#include "relufair/rng.hpp"
#include "relufair/trainer.hpp"

using namespace relufair;

namespace {

// One hidden unit with weight 1 and bias 0, identity output layer.
GatedNetwork single_unit(double gate) {
    GatedNetwork net({1, {1}, 2, OutputHead::softmax});
    net.layers()[0].weight(0, 0) = 1.0;
    net.layers()[1].weight(0, 0) = 1.0;
    net.set_gates({{gate}}, gate == 0.0 || gate == 1.0 ? GateMode::frozen : GateMode::learnable);
    return net;
}

Tensor random_inputs(std::size_t n, std::size_t d, Rng& rng, double scale = 2.0) {
    std::vector<double> v(n * d);
    for (double& x : v) x = rng.uniform(-scale, scale);
    return Tensor::matrix(n, d, v);
}

// Shape generator for property tests: 1 to 3 hidden layers of width 1 to 6.
NetworkShape random_shape(Rng& rng) {
    NetworkShape s;
    s.input_dim = 1 + rng.next() % 4;
    const std::size_t depth = 1 + rng.next() % 3;
    for (std::size_t l = 0; l < depth; ++l) s.hidden_widths.push_back(1 + rng.next() % 6);
    s.num_classes = 2 + rng.next() % 3;
    s.head = s.num_classes == 2 && rng.next() % 2 ? OutputHead::sigmoid : OutputHead::softmax;
    return s;
}

TrainConfig quick_adam(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.learning_rate = 0.01;
    cfg.optimizer.kind = OptimizerKind::adam;
    return cfg;
}

} // namespace

TEST(Forward, ZeroNetworkPredictsClassZero) {
    const GatedNetwork net({3, {4}, 3, OutputHead::softmax});
    Rng rng(1);
    const Tensor x = random_inputs(5, 3, rng);
    const Tensor logits = net.forward(x);
    for (double v : logits.values()) EXPECT_EQ(v, 0.0);
    for (int c : net.predict(x)) EXPECT_EQ(c, 0);
}

TEST(Forward, LinearGatePassesNegativeInputThrough) {
    EXPECT_EQ(single_unit(0.0).forward(Tensor::row({-2.0}))(0, 0), -2.0);
}

TEST(Forward, HalfGateMixesRectifiedAndLinear) {
    EXPECT_DOUBLE_EQ(single_unit(0.5).forward(Tensor::row({-2.0}))(0, 0), -1.0);
}

TEST(Forward, RectifiedGateClipsNegativeInput) {
    EXPECT_EQ(single_unit(1.0).forward(Tensor::row({-2.0}))(0, 0), 0.0);
    EXPECT_EQ(single_unit(1.0).forward(Tensor::row({3.0}))(0, 0), 3.0);
}

TEST(Forward, SigmoidHeadEmitsZeroAndMargin) {
    const GatedNetwork net = GatedNetwork::initialized({2, {3}, 2, OutputHead::sigmoid}, 4);
    Rng rng(2);
    const Tensor logits = net.forward(random_inputs(6, 2, rng));
    ASSERT_EQ(logits.cols(), 2u);
    for (std::size_t i = 0; i < logits.rows(); ++i) EXPECT_EQ(logits(i, 0), 0.0);
}

TEST(Forward, InputWidthMismatchThrows) {
    const GatedNetwork net = GatedNetwork::initialized({2, {3}, 2, OutputHead::softmax}, 0);
    EXPECT_THROW(net.forward(Tensor::zeros(1, 3)), ShapeError);
}

TEST(Gates, ActivationIsExactAtBothEnds) {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const double z = rng.uniform(-5.0, 5.0);
        const auto act = [z](double c) {
            const ad::Var out = GatedNetwork::gated_activation(ad::constant(Tensor::row({z})),
                                                               ad::constant(Tensor::row({c})));
            return out.item();
        };
        EXPECT_EQ(act(1.0), std::max(z, 0.0));
        EXPECT_EQ(act(0.0), z);
        const double c = rng.uniform();
        EXPECT_NEAR(act(c), c * std::max(z, 0.0) + (1.0 - c) * z, 1e-12);
    }
}

TEST(Gates, FrozenGatesMustBeBinary) {
    GatedNetwork net = GatedNetwork::initialized({2, {2}, 2, OutputHead::softmax}, 0);
    EXPECT_THROW(net.set_gates({{0.5, 1.0}}, GateMode::frozen), PreconditionError);
    EXPECT_THROW(net.set_gates({{1.5, 1.0}}, GateMode::learnable), PreconditionError);
    net.set_gates({{0.5, 1.0}}, GateMode::learnable);
    EXPECT_THROW((void)net.relu_count(), ModeError);
}

TEST(ReluCount, FreshNetworkCountsEveryUnit) {
    const GatedNetwork net = GatedNetwork::initialized({2, {8, 5, 3}, 2, OutputHead::softmax}, 0);
    EXPECT_EQ(net.relu_count(), 16u);
}

TEST(ReluCount, FullyLinearizedIsZero) {
    GatedNetwork net = GatedNetwork::initialized({2, {4, 4}, 2, OutputHead::softmax}, 0);
    net.set_flat_gates(std::vector<double>(8, 0.0), GateMode::frozen);
    EXPECT_EQ(net.relu_count(), 0u);
}

TEST(ReluCount, EqualsNumberOfUnitGatesProperty) {
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        GatedNetwork net(random_shape(rng));
        std::vector<double> gates(net.total_units());
        std::size_t ones = 0;
        for (double& g : gates) {
            g = rng.next() % 2 ? 1.0 : 0.0;
            ones += g == 1.0;
        }
        net.set_flat_gates(gates, GateMode::frozen);
        EXPECT_EQ(net.relu_count(), ones);
    }
}

TEST(Budget, RoundsAndValidates) {
    EXPECT_EQ(ReluBudget::from_fraction(0.5, 64).retained_count, 32u);
    EXPECT_EQ(ReluBudget::from_fraction(0.25, 64).retained_count, 16u);
    EXPECT_EQ(ReluBudget::from_fraction(1.0, 7).retained_count, 7u);
    EXPECT_THROW(ReluBudget::from_fraction(0.0, 64), PreconditionError);
    EXPECT_THROW(ReluBudget::from_fraction(1.2, 64), PreconditionError);
    EXPECT_THROW(ReluBudget::from_fraction(0.01, 10), PreconditionError);
}

TEST(Parameters, RoundTripThroughFlatVector) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        GatedNetwork net = GatedNetwork::initialized(random_shape(rng), rng.next());
        const ParameterVector p = net.parameters();
        EXPECT_EQ(p.size(), net.num_parameters());
        GatedNetwork copy(net.shape());
        copy.set_parameters(p);
        EXPECT_TRUE(copy == net);
    }
}

TEST(Affine, FullyLinearNetworkComposesToAffineMap) {
    Rng rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        NetworkShape shape = random_shape(rng);
        shape.head = OutputHead::softmax;
        GatedNetwork net = GatedNetwork::initialized(shape, rng.next());
        for (DenseLayer& layer : net.layers())
            for (double& b : layer.bias.values()) b = rng.normal();
        net.set_flat_gates(std::vector<double>(net.total_units(), 0.0), GateMode::frozen);
        const Tensor x = random_inputs(2, shape.input_dim, rng);
        const double t = rng.uniform(-2.0, 3.0);
        std::vector<double> mix(shape.input_dim);
        for (std::size_t j = 0; j < shape.input_dim; ++j) mix[j] = t * x(0, j) + (1.0 - t) * x(1, j);
        const Tensor both = net.forward(x);
        const Tensor mixed = net.forward(Tensor::row(mix));
        for (std::size_t c = 0; c < both.cols(); ++c)
            EXPECT_NEAR(mixed(0, c), t * both(0, c) + (1.0 - t) * both(1, c), 1e-9);
    }
}

TEST(LinearizeDr, EmptySetLeavesNetworkUnchanged) {
    const GatedNetwork net = GatedNetwork::initialized({2, {8, 8}, 2, OutputHead::softmax}, 3);
    EXPECT_TRUE(linearize_dr(net, {}) == net);
}

TEST(LinearizeDr, SecondLayerOfEightByEight) {
    const GatedNetwork net = GatedNetwork::initialized({2, {8, 8}, 2, OutputHead::softmax}, 3);
    const GatedNetwork lin = linearize_dr(net, {1});
    EXPECT_EQ(lin.relu_count(), 8u);
    EXPECT_EQ(lin.parameters(), net.parameters());
}

TEST(LinearizeDr, AllLayersIsRejected) {
    const GatedNetwork net = GatedNetwork::initialized({2, {8, 8}, 2, OutputHead::softmax}, 3);
    EXPECT_THROW(linearize_dr(net, {0, 1}), PreconditionError);
    EXPECT_THROW(linearize_dr(net, {2}), PreconditionError);
}

TEST(LinearizeDr, ReluCountIsSurvivingWidthProperty) {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        const NetworkShape shape = random_shape(rng);
        if (shape.hidden_widths.size() < 2) continue;
        std::set<std::size_t> layers;
        std::size_t surviving = 0;
        for (std::size_t l = 0; l < shape.hidden_widths.size(); ++l) {
            if (l + 1 < shape.hidden_widths.size() && rng.next() % 2)
                layers.insert(l);
            else
                surviving += shape.hidden_widths[l];
        }
        EXPECT_EQ(linearize_dr(GatedNetwork::initialized(shape, 0), layers).relu_count(), surviving);
    }
}

TEST(Distance, ZeroForEqualAndExactForOneShift) {
    const GatedNetwork a = GatedNetwork::initialized({2, {4}, 2, OutputHead::softmax}, 8);
    EXPECT_EQ(parameter_distance(a, a), 0.0);
    GatedNetwork b = a;
    b.layers()[0].weight(1, 2) += 3.0;
    EXPECT_DOUBLE_EQ(parameter_distance(a, b), 3.0);
    EXPECT_THROW(parameter_distance(a, GatedNetwork::initialized({2, {5}, 2, OutputHead::softmax}, 8)), ShapeError);
}

TEST(TopRMask, KeepsLargestWithIndexTieBreak) {
    EXPECT_EQ(top_r_mask({0.2, 0.9, 0.5, 0.9}, 2), (std::vector<double>{0, 1, 0, 1}));
    EXPECT_EQ(top_r_mask({0.5, 0.5, 0.5}, 2), (std::vector<double>{1, 1, 0}));
    EXPECT_THROW(top_r_mask({0.5}, 2), PreconditionError);
}

TEST(Snl, FullBudgetWithoutEpochsIsIdentity) {
    const GroupedDataset data = make_toy_boundary(400, 0.07, 0.03, 1);
    const GatedNetwork net = GatedNetwork::initialized({2, {8, 8}, 2, OutputHead::softmax}, 1);
    const GatedNetwork out = linearize_snl(net, ReluBudget::from_fraction(1.0, 16), 1e-3, 0, data, 1);
    EXPECT_TRUE(out == net);
}

TEST(Snl, ReturnsFrozenNetworkAtRequestedBudget) {
    const GroupedDataset data = make_toy_boundary(400, 0.07, 0.03, 2);
    const GatedNetwork net = GatedNetwork::initialized({2, {32, 32}, 2, OutputHead::softmax}, 2);
    const GatedNetwork half = linearize_snl(net, ReluBudget::from_fraction(0.5, 64), 1e-3, 1, data, 2, quick_adam(1));
    EXPECT_EQ(half.gate_mode(), GateMode::frozen);
    EXPECT_EQ(half.relu_count(), 32u);
    const GatedNetwork quarter =
        linearize_snl(net, ReluBudget::from_fraction(0.25, 64), 1e-3, 1, data, 2, quick_adam(1));
    EXPECT_EQ(quarter.relu_count(), 16u);
}

TEST(Snl, RejectsAlreadyLinearizedInput) {
    const GroupedDataset data = make_toy_boundary(400, 0.07, 0.03, 2);
    const GatedNetwork net = linearize_dr(GatedNetwork::initialized({2, {4, 4}, 2, OutputHead::softmax}, 2), {0});
    EXPECT_THROW(linearize_snl(net, ReluBudget::from_fraction(0.5, 8), 1e-3, 1, data, 2), PreconditionError);
}

// Data-driven placement against the uniform-random baseline: a random mask of
// r units keeps on average r * w1 / R units in the first layer.
TEST(Snl, RetainedGatesConcentrateInFirstLayer) {
    double snl_share = 0.0;
    double random_share = 0.0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
        const GroupedDataset data = make_toy_boundary(4000, 0.07, 0.03, static_cast<std::uint64_t>(s));
        TrainConfig cfg = quick_adam(30);
        cfg.seed = static_cast<std::uint64_t>(s);
        const GatedNetwork base =
            train_base(GatedNetwork::initialized({2, {8, 8}, 2, OutputHead::softmax}, cfg.seed), data, cfg).net;
        const GatedNetwork lin =
            linearize_snl(base, ReluBudget::from_fraction(0.5, 16), 1e-3, 20, data, cfg.seed, cfg);
        snl_share += std::count(lin.gates()[0].begin(), lin.gates()[0].end(), 1.0) / 8.0;

        Rng rng(1000 + static_cast<std::uint64_t>(s));
        std::vector<std::size_t> order(16);
        for (std::size_t i = 0; i < 16; ++i) order[i] = i;
        rng.shuffle(std::span<std::size_t>(order));
        random_share += static_cast<double>(std::count_if(order.begin(), order.begin() + 8,
                                                          [](std::size_t u) { return u < 8; })) / 8.0;
    }
    EXPECT_GT(snl_share / seeds, random_share / seeds);
}
