// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "relufair/audit.hpp"
#include "relufair/autodiff.hpp"
#include "relufair/data.hpp"
#include "relufair/io.hpp"
#include "relufair/linearize.hpp"
#include "relufair/losses.hpp"
#include "relufair/model.hpp"
#include "relufair/rng.hpp"
#include "relufair/spectral.hpp"
#include "relufair/theory.hpp"
#include "relufair/trainer.hpp"

using namespace relufair;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

constexpr int seeds = 10;

TrainConfig adam(int epochs, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.learning_rate = 0.01;
    cfg.optimizer.kind = OptimizerKind::adam;
    cfg.seed = seed;
    return cfg;
}

TrainConfig finetune_cfg(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.learning_rate = 0.002;
    cfg.optimizer.kind = OptimizerKind::sgd_momentum;
    cfg.seed = seed;
    return cfg;
}

struct Accuracy {
    double global = 0.0;
    std::vector<double> groups;
};

Accuracy accuracy(const GatedNetwork& net, const GroupedDataset& data) {
    const auto predictions = net.predict(data.features);
    Accuracy out;
    out.groups.assign(data.num_groups(), 0.0);
    std::vector<double> counts(data.num_groups(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double hit = predictions[i] == data.labels[i] ? 1.0 : 0.0;
        out.global += hit;
        out.groups[static_cast<std::size_t>(data.groups[i])] += hit;
        counts[static_cast<std::size_t>(data.groups[i])] += 1.0;
    }
    out.global /= static_cast<double>(data.size());
    for (std::size_t a = 0; a < counts.size(); ++a) out.groups[a] /= counts[a];
    return out;
}

// --- 1 ---------------------------------------------------------------------------

Outcome toy_disparity() {
    const NetworkShape shape{2, {4, 4}, 2};
    double relu_global = 0.0, relu_minority = 0.0, lin_global = 0.0, lin_minority = 0.0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        const GroupedDataset train = make_toy_boundary(4000, 0.07, 0.03, s);
        const GroupedDataset eval = make_toy_boundary(20000, 0.07, 0.03, s + 1000);
        const GatedNetwork relu = train_base(GatedNetwork::initialized(shape, s), train, adam(100, s)).net;
        // Half the units linear: the whole first hidden layer.
        const GatedNetwork lin =
            train_base(linearize_dr(GatedNetwork::initialized(shape, s), {0}), train, adam(100, s)).net;
        const Accuracy r = accuracy(relu, eval), l = accuracy(lin, eval);
        relu_global += r.global / seeds;
        relu_minority += r.groups[1] / seeds;
        lin_global += l.global / seeds;
        lin_minority += l.groups[1] / seeds;
    }
    const double gap_global = 100.0 * std::fabs(relu_global - lin_global);
    const double gap_minority = 100.0 * (relu_minority - lin_minority);
    return {relu_global >= 0.98 && gap_global <= 1.5 && gap_minority >= 3.0,
            "all-ReLU global " + fmt(100 * relu_global) + "%, minority " + fmt(100 * relu_minority) +
                "%; linearized global " + fmt(100 * lin_global) + "%, minority " + fmt(100 * lin_minority) +
                "%; global gap " + fmt(gap_global) + " pts (<= 1.5), minority gap " + fmt(gap_minority) +
                " pts (>= 3)"};
}

// --- 2 ---------------------------------------------------------------------------

Outcome approximation_rate() {
    using namespace theory;
    const std::vector<int> ns{1, 2, 4, 8, 16};
    const double sq = rate_check(ConvexFn1D(FnKind::square, 0.0, 1.0), ns).slope;
    const double ex = rate_check(ConvexFn1D(FnKind::exp, 0.0, 2.0), ns).slope;
    const double sp = rate_check(ConvexFn1D(FnKind::softplus, -2.0, 2.0), ns).slope;
    double worst_rel = 0.0;
    for (int n : {1, 2, 4, 8}) {
        const double expected = 1.0 / (8.0 * n * n);
        const double e = best_pwl_error(ConvexFn1D(FnKind::square, 0.0, 1.0), n, 1000 * n).error;
        worst_rel = std::max(worst_rel, std::fabs(e - expected) / expected);
    }
    const bool pass = sq >= -2.05 && sq <= -1.95 && ex >= -2.15 && ex <= -1.85 && sp >= -2.15 && sp <= -1.85 &&
                      worst_rel <= 0.02;
    return {pass, "slopes square " + fmt(sq, 6) + ", exp " + fmt(ex, 6) + ", softplus " + fmt(sp, 6) +
                      "; worst deviation from 1/(8n^2) " + fmt(100 * worst_rel) + "%"};
}

// --- 3 ---------------------------------------------------------------------------

Outcome region_bound() {
    using namespace theory;
    Rng rng(42);
    int violations = 0;
    for (int k = 0; k < 200; ++k) {
        std::vector<std::size_t> widths(1 + rng.next() % 3);
        for (std::size_t& w : widths) w = 1 + rng.next() % 8;
        const ScalarReluNet net = ScalarReluNet::random(widths, rng);
        if (count_linear_regions(net, -3.0, 3.0) > region_upper_bound(widths)) ++violations;
    }
    ScalarReluNet full;
    full.widths = {2};
    full.weights = {{1.0, -1.0}};
    full.biases = {{0.5, 0.5}};
    full.gates = {{1, 1}};
    full.out_weights = {1.0, 1.0};
    ScalarReluNet reduced = full;
    reduced.gates = {{1, 0}};
    const std::size_t a = count_linear_regions(full, -1.0, 1.0);
    const std::size_t b = count_linear_regions(reduced, -1.0, 1.0);
    return {violations == 0 && a == 3 && b <= 2,
            std::to_string(violations) + " violations over 200 nets; pair " + std::to_string(a) + " -> " +
                std::to_string(b) + " regions"};
}

// --- 4 ---------------------------------------------------------------------------

Outcome taylor() {
    const ScalarFunction half_square = [](const ad::Var& t) { return ad::scale(ad::sum(ad::mul(t, t)), 0.5); };
    Rng rng(4);
    int quad_failures = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t p = 1 + rng.next() % 20;
        std::vector<double> t(p), d(p);
        for (std::size_t i = 0; i < p; ++i) {
            t[i] = rng.normal();
            d[i] = rng.normal() * rng.uniform(0.01, 2.0);
        }
        const TaylorBound b = taylor_bound(half_square, half_square, ParameterVector(t), ParameterVector(t) + ParameterVector(d));
        if (!(b.lhs <= b.rhs_total)) ++quad_failures;
    }

    const GroupedDataset data = make_toy_boundary(1000, 0.07, 0.03, 4);
    const GatedNetwork net = train_base(GatedNetwork::initialized({2, {8, 8}, 2}, 4), data, adam(20, 4)).net;
    const std::size_t p = net.num_parameters();
    std::vector<double> dir(p, 0.0);
    // Output-layer direction: the hidden activations, and so the gates' effect, stay fixed.
    for (std::size_t i = p - 18; i < p; ++i) dir[i] = rng.normal();
    const ParameterVector unit = ParameterVector(dir) * (1.0 / ParameterVector(dir).norm());
    const std::vector<double> eps{1e-3, 1e-2, 1e-1};
    std::vector<double> rem;
    for (double e : eps) {
        GatedNetwork moved = net;
        moved.set_parameters(net.parameters() + unit * e);
        rem.push_back(std::fabs(taylor_bound(net, moved, data).remainder()));
    }
    const double r1 = rem[1] / rem[0], r2 = rem[2] / rem[1];
    const bool cubic = r1 >= 1000.0 / 3.0 && r1 <= 3000.0 && r2 >= 1000.0 / 3.0 && r2 <= 3000.0;
    return {quad_failures == 0 && cubic, std::to_string(quad_failures) +
                                             " quadratic-loss violations over 50 cases; remainder ratios per 10x eps " +
                                             fmt(r1) + ", " + fmt(r2) + " (cubic: 1000, factor 3)"};
}

// --- 5 ---------------------------------------------------------------------------

// Dense Hessian by central differences of the gradient; steps are halved
// until a column stops changing, which skips ReLU kinks.
Eigen::MatrixXd fd_hessian(const ScalarFunction& f, const ParameterVector& theta) {
    const std::size_t p = theta.size();
    auto column = [&](std::size_t j, double h) {
        ParameterVector up = theta, down = theta;
        up[j] += h;
        down[j] -= h;
        const ParameterVector gu = grad(f, up), gd = grad(f, down);
        Eigen::VectorXd col(static_cast<Eigen::Index>(p));
        for (std::size_t i = 0; i < p; ++i) col(static_cast<Eigen::Index>(i)) = (gu[i] - gd[i]) / (2.0 * h);
        return col;
    };
    Eigen::MatrixXd hess(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
    for (std::size_t j = 0; j < p; ++j) {
        double h = 1e-5;
        Eigen::VectorXd col = column(j, h);
        for (int attempt = 0; attempt < 6; ++attempt) {
            const Eigen::VectorXd finer = column(j, h / 2.0);
            const bool agree = (finer - col).norm() <= 1e-5 * std::max(1.0, finer.norm());
            col = finer;
            h /= 2.0;
            if (agree) break;
        }
        hess.col(static_cast<Eigen::Index>(j)) = col;
    }
    return 0.5 * (hess + hess.transpose());
}

Outcome hessian_bound() {
    Rng rng(55);
    int violations = 0;
    double worst_margin = INFINITY;
    for (int trial = 0; trial < 50; ++trial) {
        GatedNetwork net = GatedNetwork::initialized({2, {4, 4}, 2, OutputHead::sigmoid}, rng.next());
        ParameterVector theta = net.parameters();
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.normal();
        net.set_parameters(theta);
        GroupedDataset data;
        std::vector<double> f(40);
        for (double& v : f) v = rng.uniform(-1.0, 1.0);
        data.features = Tensor::matrix(20, 2, f);
        for (int i = 0; i < 20; ++i) data.labels.push_back(static_cast<int>(rng.next() % 2));
        data.groups.assign(20, 0);
        data.group_names = {"all"};
        data.num_classes = 2;

        const HessianBound b = hessian_bound_z1z2(net, data);
        const Eigen::MatrixXd h = fd_hessian(mean_loss_objective(net, data), net.parameters());
        const double lambda = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
        const double margin = b.z1 + b.z2 + 1e-6 - lambda;
        worst_margin = std::min(worst_margin, margin);
        if (!(margin >= 0.0)) ++violations;
    }
    return {violations == 0, std::to_string(violations) + " violations over 50 nets; smallest slack Z1+Z2-lambda " +
                                 fmt(worst_margin)};
}

// --- 6 ---------------------------------------------------------------------------

Outcome gradient_identity() {
    int ok = 0;
    double worst = 0.0, worst_norm = 0.0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        const GroupedDataset train = make_toy_boundary(4000, 0.07, 0.015, s);
        const GatedNetwork base = train_base(GatedNetwork::initialized({2, {8, 8}, 2}, s), train, adam(100, s)).net;
        const ConvergeResult c = converge(base, train, ConvergeConfig{1e-3, 2000});
        const GroupMetrics m = group_metrics(c.net, train);
        const auto sizes = train.group_sizes();
        const double lhs = std::fabs(m.groups[0].grad_norm * static_cast<double>(sizes[0]) -
                                     m.groups[1].grad_norm * static_cast<double>(sizes[1]));
        const double rhs = static_cast<double>(train.size()) * 1e-3;
        worst = std::max(worst, lhs / rhs);
        worst_norm = std::max(worst_norm, c.grad_norm);
        if (c.grad_norm < 1e-3 && lhs <= rhs) ++ok;
    }
    return {ok == seeds, std::to_string(ok) + "/10 seeds converged and satisfy the identity; worst global grad norm " +
                             fmt(worst_norm) + ", worst |lhs|/(|S| tau) " + fmt(worst)};
}

// --- 7 and 8 ---------------------------------------------------------------------

struct TrendSeed {
    std::vector<double> minority_grad;  // by budget
    std::vector<double> distance;       // by budget
    double boundary_minority = 0.0;
    double boundary_majority = 0.0;
    Accuracy base;
    Accuracy kd;    // at budget 0.1
    Accuracy fair;  // at budget 0.1
};

const std::vector<double> budgets{1.0, 0.5, 0.2, 0.1};

const std::vector<TrendSeed>& trend_runs() {
    static const std::vector<TrendSeed> runs = [] {
        std::vector<TrendSeed> out;
        for (std::uint64_t s = 0; s < seeds; ++s) {
            const GroupedDataset train = make_toy_boundary(4000, 0.07, 0.03, s);
            const GroupedDataset eval = make_toy_boundary(10000, 0.07, 0.03, s + 1000);
            const GatedNetwork base = train_base(GatedNetwork::initialized({2, {8, 8}, 2}, s), train, adam(100, s)).net;
            TrendSeed r;
            r.base = accuracy(base, eval);
            const GroupedDataset minority = train.group(1);
            for (double b : budgets) {
                const GatedNetwork raw =
                    linearize_snl(base, ReluBudget::from_fraction(b, 16), 1e-3, 20, train, s, adam(0, s));
                const GatedNetwork tuned = finetune_kd(raw, base, train, finetune_cfg(s), KDConfig{}).net;
                r.minority_grad.push_back(grad(mean_loss_objective(tuned, minority), tuned.parameters()).norm());
                r.distance.push_back(parameter_distance(tuned, base));
                if (b == 0.1) {
                    r.kd = accuracy(tuned, eval);
                    r.fair = accuracy(finetune_fair(raw, base, train, finetune_cfg(s), KDConfig{}, 0.1).net, eval);
                }
            }
            const BoundaryDistances d = boundary_distances(base, eval.features, eval.labels);
            double sums[2] = {0.0, 0.0}, counts[2] = {0.0, 0.0};
            for (std::size_t i = 0; i < eval.size(); ++i)
                if (d.finite[i]) {
                    sums[eval.groups[i]] += d.distance[i];
                    counts[eval.groups[i]] += 1.0;
                }
            r.boundary_majority = sums[0] / counts[0];
            r.boundary_minority = sums[1] / counts[1];
            out.push_back(std::move(r));
        }
        return out;
    }();
    return runs;
}

bool non_decreasing(const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] < v[i - 1]) return false;
    return true;
}

Outcome trends() {
    int grad_ok = 0, dist_ok = 0, boundary_ok = 0;
    for (const TrendSeed& r : trend_runs()) {
        grad_ok += non_decreasing(r.minority_grad);
        dist_ok += non_decreasing(r.distance);
        boundary_ok += r.boundary_minority < r.boundary_majority;
    }
    return {grad_ok >= 8 && dist_ok >= 8 && boundary_ok >= 8,
            "minority grad norm monotone in " + std::to_string(grad_ok) + "/10, distance monotone in " +
                std::to_string(dist_ok) + "/10, minority closer to the boundary in " + std::to_string(boundary_ok) +
                "/10 (each needs >= 8)"};
}

Outcome mitigation() {
    double kd_worst = 0.0, fair_worst = 0.0, kd_major = 0.0, fair_major = 0.0;
    for (const TrendSeed& r : trend_runs()) {
        double kw = -INFINITY, fw = -INFINITY;
        for (std::size_t a = 0; a < r.base.groups.size(); ++a) {
            kw = std::max(kw, relative_accuracy_drop(r.base.groups[a], r.kd.groups[a]));
            fw = std::max(fw, relative_accuracy_drop(r.base.groups[a], r.fair.groups[a]));
        }
        kd_worst += kw / seeds;
        fair_worst += fw / seeds;
        kd_major += 100.0 * r.kd.groups[0] / seeds;
        fair_major += 100.0 * r.fair.groups[0] / seeds;
    }
    const double gain = kd_worst - fair_worst;
    const double major_loss = kd_major - fair_major;
    return {gain >= 1.0 && major_loss <= 1.0,
            "worst-group relative drop KD " + fmt(kd_worst) + "%, fair " + fmt(fair_worst) + "% (gain " + fmt(gain) +
                " >= 1); majority accuracy KD " + fmt(kd_major) + "%, fair " + fmt(fair_major) + "% (loss " +
                fmt(major_loss) + " <= 1)"};
}

// --- 9 ---------------------------------------------------------------------------

ParameterVector fd_grad(const ScalarFunction& f, const ParameterVector& at) {
    const double h = 1e-6;
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
    return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

Outcome numerics() {
    Rng rng(9);
    auto random_vec = [&](std::size_t n, double lo, double hi) {
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(lo, hi);
        return ParameterVector(v);
    };
    using ad::Var;
    const Tensor w = Tensor::matrix(2, 4, {0.3, -0.7, 0.2, 0.9, -0.4, 0.5, 0.8, -0.1});
    auto weigh = [w](const Var& out) { return ad::sum(ad::mul(out, ad::constant(w))); };
    const std::vector<std::pair<std::string, ScalarFunction>> ops{
        {"matmul", [=](const Var& t) { return weigh(ad::matmul(ad::slice(t, 0, 2, 3), ad::slice(t, 6, 3, 4))); }},
        {"relu", [=](const Var& t) { return weigh(ad::relu(ad::slice(t, 0, 2, 4))); }},
        {"abs", [=](const Var& t) { return weigh(ad::abs(ad::slice(t, 0, 2, 4))); }},
        {"exp", [=](const Var& t) { return weigh(ad::exp(ad::slice(t, 0, 2, 4))); }},
        {"sigmoid", [=](const Var& t) { return weigh(ad::sigmoid(ad::slice(t, 0, 2, 4))); }},
        {"log_softmax", [=](const Var& t) { return weigh(ad::log_softmax(ad::slice(t, 0, 2, 4))); }},
        {"broadcast", [=](const Var& t) { return weigh(ad::add(ad::mul(ad::slice(t, 0, 2, 4), ad::slice(t, 8, 1, 4)), ad::slice(t, 12, 2, 1))); }},
    };
    double worst_fd = 0.0;
    for (const auto& [name, f] : ops)
        for (int k = 0; k < 5; ++k) {
            ParameterVector at = random_vec(18, -1.0, 1.0);
            for (std::size_t i = 0; i < at.size(); ++i)
                if (std::fabs(at[i]) < 1e-3) at[i] = 0.1;
            worst_fd = std::max(worst_fd, rel_err(grad(f, at), fd_grad(f, at)));
        }

    double worst_sym = 0.0, worst_eig = 0.0;
    for (std::uint64_t s = 0; s < 6; ++s) {
        const OutputHead head = s % 2 ? OutputHead::sigmoid : OutputHead::softmax;
        GatedNetwork net = GatedNetwork::initialized({2, {3, 3}, 2, head}, s);
        // Zero biases put samples with a dead first layer exactly on second-layer kinks.
        net.set_parameters(net.parameters() + random_vec(net.num_parameters(), -0.1, 0.1));
        std::vector<double> xv(40);
        for (double& x : xv) x = rng.uniform(-1.0, 1.0);
        std::vector<int> labels(20);
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = xv[2 * i] * xv[2 * i + 1] > 0 ? 1 : 0;
        const Tensor x = Tensor::matrix(20, 2, xv);
        const ScalarFunction f = [net, x, labels](const Var& t) {
            return ad::mean(cross_entropy_per_sample(net.logits(t, ad::constant(x)), labels));
        };
        const ParameterVector at = net.parameters();
        worst_fd = std::max(worst_fd, rel_err(grad(f, at), fd_grad(f, at)));

        const ParameterVector u = random_vec(at.size(), -1.0, 1.0), v = random_vec(at.size(), -1.0, 1.0);
        const double uhv = u.dot(hvp(f, at, v)), vhu = v.dot(hvp(f, at, u));
        worst_sym = std::max(worst_sym, std::fabs(uhv - vhu) / std::max(1.0, std::fabs(uhv)));

        const std::size_t n = at.size();
        const std::vector<double> dense = dense_hessian(f, at);
        Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 0.5 * (dense[i * n + j] + dense[j * n + i]);
        const double top = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
        const EigenEstimate est = top_eigenvalue(hessian_operator(f, at), n, 1e-13, 50000, 7);
        worst_eig = std::max(worst_eig, std::fabs(est.value - top) / std::fabs(top));
    }
    return {worst_fd < 1e-5 && worst_sym < 1e-8 && worst_eig < 1e-6,
            "worst gradient rel err " + fmt(worst_fd) + " (< 1e-5), HVP asymmetry " + fmt(worst_sym) +
                " (< 1e-8), power iteration rel err " + fmt(worst_eig) + " (< 1e-6)"};
}

// --- 10 --------------------------------------------------------------------------

int run_cli(const std::string& args) {
    const std::string cmd = "\"" + std::string(RELUFAIR_CLI) + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = io::read_text(e.path());
    return files;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "relufair_acceptance";
    fs::remove_all(root);
    const std::string config = "\"" + (fs::path(RELUFAIR_SOURCE_DIR) / "configs" / "smoke.yaml").string() + "\"";
    std::vector<std::map<std::string, std::string>> outputs;
    for (const char* name : {"first", "second"}) {
        const std::string out = "\"" + (root / name).string() + "\"";
        for (const std::string verb : {"train", "linearize", "mitigate", "audit", "report"})
            if (run_cli("--config " + config + " --out " + out + " --quiet " + verb) != 0)
                return {false, "command '" + verb + "' failed"};
        if (run_cli("--out " + out + " --quiet theory --nets 50") != 0) return {false, "command 'theory' failed"};
        outputs.push_back(tree(root / name));
    }
    auto& a = outputs[0];
    auto& b = outputs[1];
    const std::string ha = nlohmann::json::parse(a.at("manifest.json")).at("content_hash");
    const std::string hb = nlohmann::json::parse(b.at("manifest.json")).at("content_hash");
    a.erase("manifest.json");
    b.erase("manifest.json");
    std::size_t differing = a.size() == b.size() ? 0 : 1;
    for (const auto& [rel, bytes] : a)
        if (!b.count(rel) || b.at(rel) != bytes) ++differing;
    return {differing == 0 && ha == hb, std::to_string(a.size()) + " files compared, " + std::to_string(differing) +
                                            " differ; manifest content hashes " + (ha == hb ? "equal" : "differ")};
}

} // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
        double budget_seconds;  // 0 for no runtime limit
    };
    const std::vector<Criterion> criteria{
        {1, "toy-experiment disparity", toy_disparity, 300.0},
        {2, "piecewise-linear approximation rate", approximation_rate, 60.0},
        {3, "linear-region bound soundness", region_bound, 60.0},
        {4, "residual-loss Taylor bound", taylor, 0.0},
        {5, "Hessian eigenvalue bound Z1 + Z2", hessian_bound, 0.0},
        {6, "group-gradient identity at convergence", gradient_identity, 0.0},
        {7, "disparity trends across budgets", trends, 0.0},
        {8, "mitigation efficacy at budget 0.1", mitigation, 0.0},
        {9, "numeric foundations", numerics, 0.0},
        {10, "CLI determinism", determinism, 0.0},
    };
    int failures = 0;
    for (const Criterion& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.budget_seconds > 0.0 && seconds > c.budget_seconds) {
            o.pass = false;
            o.detail += "; runtime over " + fmt(c.budget_seconds) + " s";
        }
        failures += o.pass ? 0 : 1;
        std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << ": " << o.detail
                  << " [" << fmt(seconds, 3) << " s]" << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
