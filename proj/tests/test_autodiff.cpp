#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "relufair/autodiff.hpp"
#include "relufair/losses.hpp"
#include "relufair/model.hpp"
#include "relufair/rng.hpp"
#include "relufair/spectral.hpp"

using namespace relufair;

namespace {

ParameterVector random_point(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return ParameterVector(v);
}

// Central differences with step h.
ParameterVector fd_grad(const ScalarFunction& f, const ParameterVector& at, double h = 1e-6) {
    ParameterVector g = ParameterVector::zeros(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
        ParameterVector up = at, down = at;
        up[i] += h;
        down[i] -= h;
        g[i] = (evaluate(f, up) - evaluate(f, down)) / (2.0 * h);
    }
    return g;
}

double rel_err(const ParameterVector& a, const ParameterVector& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / scale;
}

struct OpCase {
    const char* name;
    std::size_t params;
    ScalarFunction f;
    double lo = -1.0;
    double hi = 1.0;
};

// Each case slices theta into operands and reduces the op's output to a scalar
// through a fixed random weighting, so every output element is exercised.
std::vector<OpCase> op_cases() {
    auto weigh = [](const ad::Var& out, std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> w(out.value().size());
        for (double& x : w) x = rng.uniform(-1.0, 1.0);
        return ad::sum(ad::mul(out, ad::constant(Tensor::matrix(out.rows(), out.cols(), w))));
    };
    using ad::Var;
    std::vector<OpCase> cases;
    cases.push_back({"add_broadcast", 9, [=](const Var& t) {
                         return weigh(ad::add(ad::slice(t, 0, 2, 3), ad::slice(t, 6, 1, 3)), 1);
                     }});
    cases.push_back({"sub", 12, [=](const Var& t) {
                         return weigh(ad::sub(ad::slice(t, 0, 2, 3), ad::slice(t, 6, 2, 3)), 2);
                     }});
    cases.push_back({"mul_broadcast", 8, [=](const Var& t) {
                         return weigh(ad::mul(ad::slice(t, 0, 3, 2), ad::slice(t, 6, 1, 2)), 3);
                     }});
    cases.push_back({"scale", 4, [=](const Var& t) { return weigh(ad::scale(ad::slice(t, 0, 2, 2), -2.5), 4); }});
    cases.push_back({"matmul", 12, [=](const Var& t) {
                         return weigh(ad::matmul(ad::slice(t, 0, 2, 3), ad::slice(t, 6, 3, 2)), 5);
                     }});
    cases.push_back({"transpose", 6, [=](const Var& t) { return weigh(ad::transpose(ad::slice(t, 0, 2, 3)), 6); }});
    cases.push_back({"sum_to_rows", 6, [=](const Var& t) { return weigh(ad::sum_to(ad::slice(t, 0, 3, 2), 1, 2), 7); }});
    cases.push_back({"sum_to_cols", 6, [=](const Var& t) { return weigh(ad::sum_to(ad::slice(t, 0, 3, 2), 3, 1), 8); }});
    cases.push_back({"expand", 3, [=](const Var& t) { return weigh(ad::expand(ad::slice(t, 0, 1, 3), 4, 3), 9); }});
    cases.push_back({"mean", 6, [=](const Var& t) { return ad::mean(ad::mul(t, t)); }});
    cases.push_back({"pad", 4, [=](const Var& t) { return weigh(ad::pad(ad::slice(t, 0, 2, 2), 3, 3, 3), 10); }});
    cases.push_back({"relu", 6, [=](const Var& t) { return weigh(ad::relu(ad::slice(t, 0, 2, 3)), 11); }});
    cases.push_back({"abs", 6, [=](const Var& t) { return weigh(ad::abs(ad::slice(t, 0, 2, 3)), 12); }});
    cases.push_back({"exp", 6, [=](const Var& t) { return weigh(ad::exp(ad::slice(t, 0, 2, 3)), 13); }});
    cases.push_back({"log", 6, [=](const Var& t) { return weigh(ad::log(ad::slice(t, 0, 2, 3)), 14); }, 0.5, 2.0});
    cases.push_back({"reciprocal", 6, [=](const Var& t) { return weigh(ad::reciprocal(ad::slice(t, 0, 2, 3)), 15); },
                     0.5, 2.0});
    cases.push_back({"sigmoid", 6, [=](const Var& t) { return weigh(ad::sigmoid(ad::slice(t, 0, 2, 3)), 16); }});
    cases.push_back({"log_softmax", 8, [=](const Var& t) { return weigh(ad::log_softmax(ad::slice(t, 0, 2, 4)), 17); }});
    cases.push_back({"dot", 6, [=](const Var& t) { return ad::dot(ad::slice(t, 0, 1, 3), ad::slice(t, 3, 1, 3)); }});
    cases.push_back({"composite", 6, [=](const Var& t) {
                         const Var a = ad::slice(t, 0, 2, 3);
                         return ad::mean(ad::mul(ad::exp(ad::scale(a, 0.5)), ad::sigmoid(a)));
                     }});
    return cases;
}

GatedNetwork small_net(OutputHead head, std::uint64_t seed) {
    return GatedNetwork::initialized({3, {4, 3}, 2, head}, seed);
}

Tensor small_batch(std::uint64_t seed, std::size_t n = 6) {
    Rng rng(seed);
    std::vector<double> v(n * 3);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::matrix(n, 3, v);
}

ScalarFunction network_loss(const GatedNetwork& net, const Tensor& x, std::vector<int> labels) {
    return [net, x, labels](const ad::Var& theta) {
        return ad::mean(cross_entropy_per_sample(net.logits(theta, ad::constant(x)), labels));
    };
}

} // namespace

TEST(Autodiff, EveryOpMatchesCentralDifferences) {
    for (const OpCase& c : op_cases()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            ParameterVector at = random_point(c.params, 100 + seed, c.lo, c.hi);
            // Keep relu and abs inputs away from their kink.
            for (std::size_t i = 0; i < at.size(); ++i)
                if (std::fabs(at[i]) < 1e-3) at[i] = 0.1;
            const double err = rel_err(grad(c.f, at), fd_grad(c.f, at));
            EXPECT_LT(err, 1e-5) << c.name << " seed " << seed;
        }
    }
}

TEST(Autodiff, NetworkLossGradientMatchesCentralDifferences) {
    for (OutputHead head : {OutputHead::softmax, OutputHead::sigmoid}) {
        const GatedNetwork net = small_net(head, 3);
        const ScalarFunction f = network_loss(net, small_batch(4), {0, 1, 1, 0, 1, 0});
        const ParameterVector at = net.parameters();
        EXPECT_LT(rel_err(grad(f, at), fd_grad(f, at)), 1e-5) << to_string(head);
    }
}

TEST(Autodiff, GateGradientMatchesCentralDifferences) {
    GatedNetwork net = small_net(OutputHead::softmax, 5);
    net.set_flat_gates(std::vector<double>{0.3, 0.9, 0.5, 0.1, 0.7, 0.2, 0.6}, GateMode::learnable);
    const Tensor x = small_batch(6);
    const std::vector<int> labels{1, 0, 1, 1, 0, 0};
    const ParameterVector theta = net.parameters();
    const ScalarFunction f = [net, x, labels, theta](const ad::Var& gates) {
        return ad::mean(cross_entropy_per_sample(net.logits(ad::constant(theta.as_row()), ad::constant(x), &gates), labels));
    };
    const ParameterVector at(net.flat_gates());
    EXPECT_LT(rel_err(grad(f, at), fd_grad(f, at)), 1e-5);
}

TEST(Autodiff, GradientOfGradientMatchesFiniteDifferenceOfGradient) {
    const GatedNetwork net = small_net(OutputHead::softmax, 7);
    const ScalarFunction f = network_loss(net, small_batch(8), {0, 0, 1, 1, 0, 1});
    const ParameterVector at = net.parameters();
    const ParameterVector v = random_point(at.size(), 9);
    const double h = 1e-5;
    const ParameterVector fd = (grad(f, at + v * h) - grad(f, at - v * h)) * (1.0 / (2.0 * h));
    EXPECT_LT(rel_err(hvp(f, at, v), fd), 1e-5);
}

TEST(Autodiff, HvpIsSymmetric) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const GatedNetwork net = small_net(seed % 2 ? OutputHead::sigmoid : OutputHead::softmax, seed);
        const ScalarFunction f = network_loss(net, small_batch(seed + 50), {0, 1, 0, 1, 1, 0});
        const ParameterVector at = net.parameters();
        const ParameterVector u = random_point(at.size(), 200 + seed);
        const ParameterVector v = random_point(at.size(), 300 + seed);
        const double uhv = u.dot(hvp(f, at, v));
        const double vhu = v.dot(hvp(f, at, u));
        EXPECT_LT(std::fabs(uhv - vhu), 1e-8 * std::max(1.0, std::fabs(uhv))) << "seed " << seed;
    }
}

TEST(Autodiff, GradModeOffRecordsNothing) {
    ad::GradModeGuard off(false);
    const ad::Var p = ad::parameter(Tensor::row({1.0, 2.0}));
    const ad::Var y = ad::sum(ad::mul(p, p));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, NonFiniteValuesAreRejected) {
    const ad::Var p = ad::parameter(Tensor::row({0.0}));
    EXPECT_THROW(ad::log(p), NumericError);
    EXPECT_THROW(ad::reciprocal(p), NumericError);
}

TEST(Autodiff, NonScalarOutputNeedsSeed) {
    const ad::Var p = ad::parameter(Tensor::row({1.0, 2.0}));
    EXPECT_THROW(ad::grad(ad::mul(p, p), p), ShapeError);
}

// --- spectral ------------------------------------------------------------------

namespace {

Eigen::MatrixXd to_eigen(const std::vector<double>& a, std::size_t n) {
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = a[i * n + j];
    return m;
}

LinearOperator dense_operator(const std::vector<double>& a, std::size_t n) {
    return [a, n](std::span<const double> v) {
        std::vector<double> w(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) w[i] += a[i * n + j] * v[j];
        return w;
    };
}

// Symmetric matrix Q diag(spectrum) Q^T with a random orthogonal Q.
std::vector<double> with_spectrum(const std::vector<double>& spectrum, std::uint64_t seed) {
    const std::size_t n = spectrum.size();
    Rng rng(seed);
    Eigen::MatrixXd g(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) g(i, j) = rng.normal();
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    Eigen::VectorXd d(n);
    for (std::size_t i = 0; i < n; ++i) d(i) = spectrum[i];
    const Eigen::MatrixXd m = q * d.asDiagonal() * q.transpose();
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = 0.5 * (m(i, j) + m(j, i));
    return out;
}

} // namespace

TEST(Spectral, PowerIterationMatchesDenseSolverOnNetworkHessians) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const GatedNetwork net = GatedNetwork::initialized({2, {3}, 2, OutputHead::softmax}, seed);
        Rng rng(seed + 11);
        std::vector<double> xv(40);
        for (double& x : xv) x = rng.uniform(-1.0, 1.0);
        std::vector<int> labels(20);
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = xv[2 * i] * xv[2 * i + 1] > 0 ? 1 : 0;
        const ScalarFunction f = network_loss(net, Tensor::matrix(20, 2, xv), labels);
        const ParameterVector at = net.parameters();
        const std::size_t n = at.size();
        const std::vector<double> h = dense_hessian(f, at);

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(h, n));
        const Eigen::VectorXd ev = solver.eigenvalues();
        const double top = ev(static_cast<Eigen::Index>(n) - 1);
        const double radius = std::max(std::fabs(ev(0)), std::fabs(top));

        const EigenEstimate t = top_eigenvalue(hessian_operator(f, at), n, 1e-13, 50000, 7);
        ASSERT_TRUE(t.converged) << "seed " << seed;
        EXPECT_LT(std::fabs(t.value - top), 1e-6 * std::fabs(top)) << "seed " << seed;
        const EigenEstimate r = spectral_radius(hessian_operator(f, at), n, 1e-13, 50000, 7);
        EXPECT_LT(std::fabs(r.value - radius), 1e-6 * radius) << "seed " << seed;
    }
}

TEST(Spectral, PowerIterationMatchesDenseSolverOnPlantedSpectra) {
    const std::vector<std::vector<double>> spectra{
        {5.0, 3.0, 1.0, 0.5, -1.0}, {-7.0, -2.0, 1.0, 3.0}, {1.0, 0.9, 0.1, 0.0, -0.3, -0.5}};
    for (std::size_t k = 0; k < spectra.size(); ++k) {
        const std::size_t n = spectra[k].size();
        const std::vector<double> a = with_spectrum(spectra[k], 40 + k);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(a, n));
        const double top = solver.eigenvalues()(static_cast<Eigen::Index>(n) - 1);
        const EigenEstimate est = top_eigenvalue(dense_operator(a, n), n, 1e-14, 100000, 3);
        EXPECT_LT(std::fabs(est.value - top), 1e-6 * std::fabs(top)) << "case " << k;
    }
}

TEST(Spectral, JacobiMatchesDenseSolver) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const std::size_t n = 7;
        Rng rng(seed);
        std::vector<double> a(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) a[i * n + j] = a[j * n + i] = rng.normal();
        const std::vector<double> ours = symmetric_eigenvalues(a, n);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_eigen(a, n));
        for (std::size_t i = 0; i < n; ++i)
            EXPECT_NEAR(ours[i], solver.eigenvalues()(static_cast<Eigen::Index>(i)), 1e-10);
    }
}

TEST(Spectral, NegativeDominantIsFlaggedAndTopIsStillFound) {
    const std::vector<double> a = with_spectrum({-4.0, 1.0, 0.5}, 9);
    const EigenEstimate dom = max_eigenvalue(dense_operator(a, 3), 3, 1e-14, 100000, 1);
    EXPECT_TRUE(dom.negative_dominant);
    EXPECT_NEAR(dom.value, -4.0, 1e-6);
    EXPECT_NEAR(top_eigenvalue(dense_operator(a, 3), 3, 1e-14, 100000, 1).value, 1.0, 1e-6);
}

TEST(Spectral, RejectsBadArguments) {
    EXPECT_THROW(max_eigenvalue(dense_operator({}, 0), 0, 1e-6, 10, 0), PreconditionError);
    EXPECT_THROW(max_eigenvalue(dense_operator({1.0}, 1), 1, 0.0, 10, 0), PreconditionError);
}
