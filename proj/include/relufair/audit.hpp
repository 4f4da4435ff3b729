#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "relufair/autodiff.hpp"
#include "relufair/data.hpp"
#include "relufair/error.hpp"
#include "relufair/io.hpp"
#include "relufair/losses.hpp"
#include "relufair/model.hpp"
#include "relufair/spectral.hpp"

namespace relufair {

struct EigenOptions {
    double tol = 1e-6;
    int max_iters = 500;
    std::uint64_t seed = 0x5EED;
};

struct GroupStats {
    int group = 0;
    std::string name;
    std::size_t size = 0;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double grad_norm = 0.0;
    // Largest eigenvalue of the group-loss Hessian; absent when not requested.
    std::optional<double> hessian_lambda;
    bool hessian_converged = false;
    double mean_boundary_distance = 0.0;
    double mean_normalized_distance = 0.0;
    // Samples whose margin gradient vanished; excluded from the means above.
    std::size_t infinite_distances = 0;
};

struct GroupMetrics {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double parity_gap = 0.0;
    std::vector<GroupStats> groups;
};

struct MetricsOptions {
    bool hessian = false;
    EigenOptions eigen;
};

// (base - new) / base * 100; negative values are improvements.
inline double relative_accuracy_drop(double base_acc, double new_acc) {
    if (base_acc == 0.0) throw PreconditionError("relative_accuracy_drop: base accuracy is 0");
    if (!(base_acc > 0.0)) throw PreconditionError("relative_accuracy_drop: base accuracy must be > 0");
    return (base_acc - new_acc) / base_acc * 100.0;
}

// Mean loss over `data` as a function of the flat parameter row.
inline ScalarFunction mean_loss_objective(const GatedNetwork& net, const GroupedDataset& data,
                                          const LossFn& loss = cross_entropy_loss()) {
    if (data.size() == 0) throw PreconditionError("mean loss over an empty sample set");
    const ad::Var x = ad::constant(data.features);
    return [&net, x, &data, loss](const ad::Var& theta) { return ad::mean(loss(net.logits(theta, x), data.labels)); };
}

inline double mean_loss(const GatedNetwork& net, const GroupedDataset& data, const LossFn& loss = cross_entropy_loss()) {
    return evaluate(mean_loss_objective(net, data, loss), net.parameters());
}

struct BoundaryDistances {
    std::vector<double> distance;
    // False where the margin gradient norm fell below 1e-12; distance is +inf there.
    std::vector<bool> finite;
};

// First-order distance to the decision boundary, m(x) / ||grad_x m(x)|| with
// m(x) = logit_y - max_{j != y} logit_j. Negative for misclassified samples.
// Rows are independent, so one backward pass over the summed margins yields
// every per-sample input gradient.
inline BoundaryDistances boundary_distances(const GatedNetwork& net, const Tensor& x, std::span<const int> labels) {
    if (x.rows() != labels.size()) throw ShapeError("boundary_distance: label count differs from sample count");
    const std::size_t n = x.rows();
    const std::size_t c = net.shape().output_units() == 1 ? 2 : net.shape().output_units();
    const Tensor logits = net.forward(x);
    Tensor selector = Tensor::zeros(n, c);
    std::vector<double> margin(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        if (y >= c) throw PreconditionError("boundary_distance: label out of range");
        std::size_t rival = y == 0 ? 1 : 0;
        for (std::size_t j = 0; j < c; ++j)
            if (j != y && logits(i, j) > logits(i, rival)) rival = j;
        selector(i, y) = 1.0;
        selector(i, rival) = -1.0;
        margin[i] = logits(i, y) - logits(i, rival);
    }
    const ad::Var input = ad::parameter(x);
    ad::Var total;
    {
        ad::GradModeGuard mode(true);
        const ad::Var out = net.logits(ad::constant(net.parameters().as_row()), input);
        total = ad::sum(ad::mul(out, ad::constant(selector)));
    }
    const Tensor gx = ad::grad(total, input).value();
    BoundaryDistances result{std::vector<double>(n), std::vector<bool>(n, true)};
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < gx.cols(); ++k) sq += gx(i, k) * gx(i, k);
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) {
            result.distance[i] = std::numeric_limits<double>::infinity();
            result.finite[i] = false;
        } else {
            result.distance[i] = margin[i] / norm;
        }
    }
    return result;
}

inline double boundary_distance(const GatedNetwork& net, std::span<const double> x, int y) {
    const Tensor row = Tensor::row(std::vector<double>(x.begin(), x.end()));
    const int labels[] = {y};
    return boundary_distances(net, row, labels).distance[0];
}

// 90th percentile of |distance| over finite entries (nearest-rank).
inline double distance_scale(const BoundaryDistances& d) {
    std::vector<double> mags;
    for (std::size_t i = 0; i < d.distance.size(); ++i)
        if (d.finite[i]) mags.push_back(std::fabs(d.distance[i]));
    if (mags.empty()) return 1.0;
    std::sort(mags.begin(), mags.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(mags.size())));
    const double p90 = mags[std::max<std::size_t>(rank, 1) - 1];
    return p90 > 0.0 ? p90 : 1.0;
}

inline double normalized_distance(double distance, double scale) {
    if (std::isinf(distance)) return distance > 0 ? 1.0 : -1.0;
    return std::clamp(distance / scale, -1.0, 1.0);
}

inline EigenEstimate group_hessian_lambda(const GatedNetwork& net, const GroupedDataset& group_data,
                                          const EigenOptions& opts = {}, const LossFn& loss = cross_entropy_loss()) {
    const ScalarFunction f = mean_loss_objective(net, group_data, loss);
    return top_eigenvalue(hessian_operator(f, net.parameters()), net.num_parameters(), opts.tol, opts.max_iters,
                          opts.seed);
}

inline GroupMetrics group_metrics(const GatedNetwork& net, const GroupedDataset& data,
                                  const LossFn& loss = cross_entropy_loss(), const MetricsOptions& opts = {}) {
    data.validate();
    if (data.size() == 0) throw PreconditionError("group_metrics: empty dataset");
    const auto sizes = data.group_sizes();
    for (std::size_t a = 0; a < sizes.size(); ++a)
        if (sizes[a] == 0) throw PreconditionError("group_metrics: group '" + data.group_names[a] + "' is empty");

    const auto predictions = net.predict(data.features);
    const BoundaryDistances dist = boundary_distances(net, data.features, data.labels);
    const double scale = distance_scale(dist);

    GroupMetrics out;
    std::size_t correct_total = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct_total += predictions[i] == data.labels[i];
    out.accuracy = static_cast<double>(correct_total) / static_cast<double>(data.size());
    out.mean_loss = mean_loss(net, data, loss);

    for (std::size_t a = 0; a < data.num_groups(); ++a) {
        const auto idx = data.group_indices(static_cast<int>(a));
        const GroupedDataset sub = data.subset(idx);
        GroupStats s;
        s.group = static_cast<int>(a);
        s.name = data.group_names[a];
        s.size = idx.size();
        std::size_t correct = 0;
        double dsum = 0.0;
        double nsum = 0.0;
        std::size_t finite = 0;
        for (std::size_t i : idx) {
            correct += predictions[i] == data.labels[i];
            if (!dist.finite[i]) {
                ++s.infinite_distances;
                continue;
            }
            dsum += dist.distance[i];
            nsum += normalized_distance(dist.distance[i], scale);
            ++finite;
        }
        s.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
        s.mean_boundary_distance = finite ? dsum / static_cast<double>(finite) : 0.0;
        s.mean_normalized_distance = finite ? nsum / static_cast<double>(finite) : 0.0;
        const ScalarFunction f = mean_loss_objective(net, sub, loss);
        auto [value, g] = value_and_grad(f, net.parameters());
        s.mean_loss = value;
        s.grad_norm = g.norm();
        if (opts.hessian) {
            const EigenEstimate est = group_hessian_lambda(net, sub, opts.eigen, loss);
            s.hessian_lambda = est.value;
            s.hessian_converged = est.converged;
        }
        out.parity_gap = std::max(out.parity_gap, std::fabs(s.accuracy - out.accuracy));
        out.groups.push_back(std::move(s));
    }
    return out;
}

// R(a) = J(theta~; S^a) - J(theta; S^a).
inline double residual_loss(const GatedNetwork& original, const GatedNetwork& linearized, const GroupedDataset& group_data,
                            const LossFn& loss = cross_entropy_loss()) {
    if (!(original.shape() == linearized.shape())) throw ShapeError("residual_loss: network shapes differ");
    if (group_data.size() == 0) throw PreconditionError("residual_loss: empty group");
    return mean_loss(linearized, group_data, loss) - mean_loss(original, group_data, loss);
}

struct TaylorBound {
    double lhs = 0.0;  // R(a)
    double grad_norm = 0.0;
    double distance = 0.0;
    double hessian_lambda = 0.0;
    bool reliable = true;  // power iteration converged
    double rhs_linear_term = 0.0;
    double rhs_quadratic_term = 0.0;
    double rhs_total = 0.0;
    // Second-order expansion along delta = theta~ - theta: g'delta and delta'H delta.
    double directional_gradient = 0.0;
    double directional_curvature = 0.0;

    // R(a) minus its second-order Taylor model; O(||delta||^3) when the gates agree.
    double remainder() const { return lhs - directional_gradient - 0.5 * directional_curvature; }
};

// Bound components for lhs = J~(theta~) - J(theta) with gradient, Hessian and
// expansion point taken from J at theta.
inline TaylorBound taylor_bound(const ScalarFunction& original, const ScalarFunction& linearized,
                                const ParameterVector& theta, const ParameterVector& theta_tilde,
                                const EigenOptions& opts = {}) {
    if (theta.size() != theta_tilde.size()) throw ShapeError("taylor_bound: parameter vectors differ in length");
    TaylorBound b;
    b.lhs = evaluate(linearized, theta_tilde) - evaluate(original, theta);
    const ParameterVector delta = theta_tilde - theta;
    const ParameterVector g = grad(original, theta);
    b.grad_norm = g.norm();
    b.distance = delta.norm();
    b.directional_gradient = g.dot(delta);
    if (b.distance > 0.0) {
        b.directional_curvature = hvp(original, theta, delta).dot(delta);
        const EigenEstimate est = top_eigenvalue(hessian_operator(original, theta), theta.size(), opts.tol,
                                                 opts.max_iters, opts.seed);
        b.hessian_lambda = est.value;
        b.reliable = est.converged;
    }
    b.rhs_linear_term = b.grad_norm * b.distance;
    b.rhs_quadratic_term = 0.5 * b.hessian_lambda * b.distance * b.distance;
    b.rhs_total = b.rhs_linear_term + b.rhs_quadratic_term;
    return b;
}

// Gradient, Hessian and expansion point all belong to the original network;
// lhs uses each network with its own gates.
inline TaylorBound taylor_bound(const GatedNetwork& original, const GatedNetwork& linearized,
                                const GroupedDataset& group_data, const LossFn& loss = cross_entropy_loss(),
                                const EigenOptions& opts = {}) {
    if (!(original.shape() == linearized.shape())) throw ShapeError("residual_loss: network shapes differ");
    if (group_data.size() == 0) throw PreconditionError("residual_loss: empty group");
    return taylor_bound(mean_loss_objective(original, group_data, loss),
                        mean_loss_objective(linearized, group_data, loss), original.parameters(),
                        linearized.parameters(), opts);
}

struct HessianBound {
    double lambda_h = 0.0;
    double z1 = 0.0;
    double z2 = 0.0;
    bool lambda_converged = true;
    bool holds = true;
};

// Binary cross-entropy on a sigmoid head with logit z: per-sample Hessian
// h(1-h) grad z grad z' + (h - y) hess z, so its top eigenvalue is at most
// h(1-h) ||grad z||^2 + |h - y| rho(hess z), rho the spectral radius. Z1 and Z2
// average these terms; lambda_h is the top eigenvalue of the averaged Hessian.
// Up to `dense_limit` parameters every eigenvalue comes from a dense solve.
inline HessianBound hessian_bound_z1z2(const GatedNetwork& net, const GroupedDataset& group_data, double tol = 1e-6,
                                       const EigenOptions& opts = {}, std::size_t dense_limit = 100) {
    if (net.shape().head != OutputHead::sigmoid || net.shape().num_classes != 2)
        throw PreconditionError("hessian_bound_z1z2: requires a binary network with a sigmoid head");
    if (group_data.size() == 0) throw PreconditionError("hessian_bound_z1z2: empty group");
    if (net.num_parameters() > 2000) throw PreconditionError("hessian_bound_z1z2: more than 2000 parameters");
    const std::size_t p = net.num_parameters();
    const ParameterVector theta = net.parameters();
    const bool dense = p <= dense_limit;

    auto top = [&](const ScalarFunction& f, bool radius) -> EigenEstimate {
        if (dense) {
            const auto eig = symmetric_eigenvalues(dense_hessian(f, theta), p);
            EigenEstimate e;
            e.value = radius ? std::max(std::fabs(eig.front()), std::fabs(eig.back())) : eig.back();
            e.converged = true;
            return e;
        }
        const LinearOperator op = hessian_operator(f, theta);
        return radius ? spectral_radius(op, p, opts.tol, opts.max_iters, opts.seed)
                      : top_eigenvalue(op, p, opts.tol, opts.max_iters, opts.seed);
    };

    HessianBound out;
    const EigenEstimate whole = top(mean_loss_objective(net, group_data), false);
    out.lambda_h = whole.value;
    out.lambda_converged = whole.converged;

    const Tensor logits = net.forward(group_data.features);
    double z1 = 0.0;
    double z2 = 0.0;
    for (std::size_t i = 0; i < group_data.size(); ++i) {
        const ad::Var xi = ad::constant(group_data.features.select_rows(std::vector<std::size_t>{i}));
        const ScalarFunction logit = [&net, xi](const ad::Var& th) {
            return ad::slice(net.logits(th, xi), 1, 1, 1);
        };
        const double h = ad::sigmoid_value(logits(i, 1));
        const double y = static_cast<double>(group_data.labels[i]);
        const double gz = grad(logit, theta).norm();
        z1 += h * (1.0 - h) * gz * gz;
        const double err = std::fabs(h - y);
        if (err > 0.0) {
            const EigenEstimate rho = top(logit, true);
            out.lambda_converged = out.lambda_converged && rho.converged;
            z2 += err * rho.value;
        }
    }
    out.z1 = z1 / static_cast<double>(group_data.size());
    out.z2 = z2 / static_cast<double>(group_data.size());
    out.holds = out.lambda_h <= out.z1 + out.z2 + tol;
    return out;
}

// --- reports -----------------------------------------------------------------

struct CandidateReport {
    std::string name;
    std::string model_id;
    std::size_t relu_count = 0;
    std::size_t total_units = 0;
    GroupMetrics eval;
    GroupMetrics train;
    std::vector<double> relative_drops;  // per group, percent, vs the base on eval
    std::vector<TaylorBound> taylor;     // per group, on train
    std::vector<HessianBound> hessian;   // per group, binary sigmoid networks only
};

struct AuditReport {
    std::string schema = "audit/1";
    std::vector<std::string> group_names;
    CandidateReport base;
    std::vector<CandidateReport> candidates;
};

struct ReportOptions {
    EigenOptions eigen;
    bool bounds = true;
    // Z1/Z2 use at most this many samples per group, taken in dataset order.
    std::size_t hessian_bound_samples = 64;
};

namespace detail {

inline CandidateReport describe(const std::string& name, const GatedNetwork& net, const GroupedDataset& eval,
                                const GroupedDataset& train, bool hessian, const EigenOptions& eigen) {
    CandidateReport c;
    c.name = name;
    c.relu_count = net.relu_count();
    c.total_units = net.total_units();
    c.eval = group_metrics(net, eval);
    MetricsOptions mopts;
    mopts.hessian = hessian;
    mopts.eigen = eigen;
    c.train = group_metrics(net, train, cross_entropy_loss(), mopts);
    return c;
}

} // namespace detail

inline AuditReport build_report(const GatedNetwork& base,
                                const std::vector<std::pair<std::string, GatedNetwork>>& candidates,
                                const GroupedDataset& data_eval, const GroupedDataset& data_train,
                                const ReportOptions& opts = {}) {
    for (const auto& [name, net] : candidates)
        if (!(net.shape() == base.shape()))
            throw ShapeError("build_report: candidate '" + name + "' differs in shape from the base");
    if (data_eval.group_names != data_train.group_names)
        throw PreconditionError("build_report: train and eval group vocabularies differ");

    AuditReport report;
    report.group_names = data_eval.group_names;
    report.base = detail::describe("base", base, data_eval, data_train, opts.bounds, opts.eigen);
    report.base.relative_drops.assign(data_eval.num_groups(), 0.0);

    const bool binary = base.shape().head == OutputHead::sigmoid && base.shape().num_classes == 2;
    std::vector<GroupedDataset> train_groups;
    for (std::size_t a = 0; a < data_train.num_groups(); ++a) train_groups.push_back(data_train.group(static_cast<int>(a)));

    if (opts.bounds && binary) {
        for (const GroupedDataset& g : train_groups) {
            std::vector<std::size_t> head(std::min(g.size(), opts.hessian_bound_samples));
            for (std::size_t i = 0; i < head.size(); ++i) head[i] = i;
            report.base.hessian.push_back(hessian_bound_z1z2(base, g.subset(head), 1e-6, opts.eigen));
        }
    }

    for (const auto& [name, net] : candidates) {
        CandidateReport c = detail::describe(name, net, data_eval, data_train, false, opts.eigen);
        for (std::size_t a = 0; a < c.eval.groups.size(); ++a) {
            const double base_acc = report.base.eval.groups[a].accuracy;
            c.relative_drops.push_back(base_acc > 0.0 ? relative_accuracy_drop(base_acc, c.eval.groups[a].accuracy)
                                                      : 0.0);
            if (opts.bounds) c.taylor.push_back(taylor_bound(base, net, train_groups[a], cross_entropy_loss(), opts.eigen));
        }
        c.hessian = report.base.hessian;
        report.candidates.push_back(std::move(c));
    }
    return report;
}

inline nlohmann::json to_json(const GroupStats& s) {
    nlohmann::json j = {{"group", s.group},
                        {"name", s.name},
                        {"size", s.size},
                        {"accuracy", s.accuracy},
                        {"mean_loss", s.mean_loss},
                        {"grad_norm", s.grad_norm},
                        {"mean_boundary_distance", s.mean_boundary_distance},
                        {"mean_normalized_distance", s.mean_normalized_distance},
                        {"infinite_distances", s.infinite_distances}};
    if (s.hessian_lambda) {
        j["hessian_lambda"] = *s.hessian_lambda;
        j["hessian_converged"] = s.hessian_converged;
    }
    return j;
}

inline nlohmann::json to_json(const GroupMetrics& m) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& s : m.groups) groups.push_back(to_json(s));
    return {{"accuracy", m.accuracy}, {"mean_loss", m.mean_loss}, {"parity_gap", m.parity_gap}, {"groups", groups}};
}

inline nlohmann::json to_json(const TaylorBound& b) {
    return {{"lhs", b.lhs},
            {"grad_norm", b.grad_norm},
            {"distance", b.distance},
            {"hessian_lambda", b.hessian_lambda},
            {"reliable", b.reliable},
            {"rhs_linear_term", b.rhs_linear_term},
            {"rhs_quadratic_term", b.rhs_quadratic_term},
            {"rhs_total", b.rhs_total}};
}

inline nlohmann::json to_json(const HessianBound& b) {
    return {{"lambda_h", b.lambda_h},
            {"z1", b.z1},
            {"z2", b.z2},
            {"rhs", b.z1 + b.z2},
            {"lambda_converged", b.lambda_converged},
            {"holds", b.holds}};
}

inline nlohmann::json to_json(const CandidateReport& c) {
    nlohmann::json j = {{"name", c.name},
                        {"model_id", c.model_id},
                        {"relu_count", c.relu_count},
                        {"total_units", c.total_units},
                        {"budget", static_cast<double>(c.relu_count) / static_cast<double>(c.total_units)},
                        {"eval", to_json(c.eval)},
                        {"train", to_json(c.train)},
                        {"relative_drops", c.relative_drops}};
    nlohmann::json taylor = nlohmann::json::array();
    for (const auto& t : c.taylor) taylor.push_back(to_json(t));
    j["taylor_bound"] = taylor;
    if (c.hessian.empty()) {
        j["hessian_bound"] = "not-applicable";
    } else {
        nlohmann::json hb = nlohmann::json::array();
        for (const auto& h : c.hessian) hb.push_back(to_json(h));
        j["hessian_bound"] = hb;
    }
    return j;
}

inline nlohmann::json to_json(const AuditReport& r) {
    nlohmann::json candidates = nlohmann::json::array();
    for (const auto& c : r.candidates) candidates.push_back(to_json(c));
    return {{"schema", r.schema}, {"group_names", r.group_names}, {"base", to_json(r.base)}, {"candidates", candidates}};
}

// One row per candidate x group.
inline std::string report_csv(const AuditReport& r) {
    std::ostringstream out;
    out << "candidate,model_id,relu_count,total_units,group,size,accuracy,base_accuracy,relative_drop,mean_loss,"
           "grad_norm,mean_boundary_distance,mean_normalized_distance,parity_gap,taylor_lhs,taylor_rhs\n";
    auto num = [](double v) { return io::format_double(v); };
    for (const auto& c : r.candidates) {
        for (std::size_t a = 0; a < c.eval.groups.size(); ++a) {
            const GroupStats& s = c.eval.groups[a];
            out << io::csv_escape(c.name) << ',' << io::csv_escape(c.model_id) << ',' << c.relu_count << ','
                << c.total_units << ',' << io::csv_escape(s.name) << ',' << s.size << ',' << num(s.accuracy) << ','
                << num(r.base.eval.groups[a].accuracy) << ',' << num(c.relative_drops[a]) << ',' << num(s.mean_loss)
                << ',' << num(c.train.groups[a].grad_norm) << ',' << num(s.mean_boundary_distance) << ','
                << num(s.mean_normalized_distance) << ',' << num(c.eval.parity_gap) << ',';
            if (a < c.taylor.size())
                out << num(c.taylor[a].lhs) << ',' << num(c.taylor[a].rhs_total);
            else
                out << ',';
            out << '\n';
        }
    }
    return out.str();
}

} // namespace relufair
