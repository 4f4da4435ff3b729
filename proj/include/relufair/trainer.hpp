#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "relufair/autodiff.hpp"
#include "relufair/data.hpp"
#include "relufair/error.hpp"
#include "relufair/io.hpp"
#include "relufair/losses.hpp"
#include "relufair/model.hpp"
#include "relufair/rng.hpp"

namespace relufair {

enum class OptimizerKind { sgd, sgd_momentum, adam };

inline std::string to_string(OptimizerKind kind) {
    switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::adam: return "adam";
    }
    return "sgd";
}

inline OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "sgd_momentum") return OptimizerKind::sgd_momentum;
    if (name == "adam") return OptimizerKind::adam;
    throw PreconditionError("unknown optimizer '" + name + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainConfig {
    int epochs = 60;
    std::size_t batch_size = 128;
    double learning_rate = 0.05;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const {
        if (!(learning_rate > 0.0)) throw PreconditionError("TrainConfig: learning_rate must be > 0");
        if (epochs < 0) throw PreconditionError("TrainConfig: epochs must be >= 0");
        if (batch_size < 1) throw PreconditionError("TrainConfig: batch_size must be >= 1");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// First-order update rule over a flat parameter vector.
class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, double learning_rate, std::size_t size)
        : cfg_(cfg), lr_(learning_rate), first_(size, 0.0), second_(size, 0.0) {}

    void step(std::span<double> params, std::span<const double> grads) {
        ++t_;
        switch (cfg_.kind) {
        case OptimizerKind::sgd:
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grads[i];
            break;
        case OptimizerKind::sgd_momentum:
            for (std::size_t i = 0; i < params.size(); ++i) {
                first_[i] = cfg_.momentum * first_[i] + grads[i];
                params[i] -= lr_ * first_[i];
            }
            break;
        case OptimizerKind::adam: {
            const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            for (std::size_t i = 0; i < params.size(); ++i) {
                first_[i] = cfg_.beta1 * first_[i] + (1.0 - cfg_.beta1) * grads[i];
                second_[i] = cfg_.beta2 * second_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
                params[i] -= lr_ * (first_[i] / c1) / (std::sqrt(second_[i] / c2) + cfg_.epsilon);
            }
            break;
        }
        }
    }

private:
    OptimizerConfig cfg_;
    double lr_;
    std::vector<double> first_;
    std::vector<double> second_;
    long t_ = 0;
};

// One row of a training history: group == -1 is the whole split.
struct EpochRecord {
    int epoch = 0;
    std::string split = "train";
    int group = -1;
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> lambdas;
};

using History = std::vector<EpochRecord>;

struct TrainResult {
    GatedNetwork net;
    History history;
};

struct FairResult {
    GatedNetwork net;
    // Multipliers after the update closing each epoch, one row per epoch.
    std::vector<std::vector<double>> multipliers;
    History history;
};

// State of the per-group Lagrange multipliers.
struct LagrangianState {
    std::vector<double> multipliers;
    double multiplier_step = 0.0;
    int epoch = 0;

    LagrangianState(std::size_t groups, double mu) : multipliers(groups, 0.0), multiplier_step(mu) {
        if (!(mu > 0.0)) throw PreconditionError("multiplier step mu must be > 0");
    }

    void update(std::span<const double> violations) {
        for (std::size_t a = 0; a < multipliers.size(); ++a) multipliers[a] += multiplier_step * violations[a];
        ++epoch;
    }
};

namespace detail {

// Visit order for one epoch. With shuffling, each group is shuffled and the
// groups are interleaved by relative position so every mini-batch holds close
// to the population's group proportions.
inline std::vector<std::size_t> epoch_order(std::span<const int> groups, std::size_t num_groups, bool shuffle,
                                            Rng& rng) {
    const std::size_t n = groups.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!shuffle) return order;
    std::vector<std::vector<std::size_t>> members(num_groups);
    for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(groups[i])].push_back(i);
    struct Slot {
        double key;
        std::size_t group;
        std::size_t index;
    };
    std::vector<Slot> slots;
    slots.reserve(n);
    for (std::size_t a = 0; a < num_groups; ++a) {
        rng.shuffle(std::span<std::size_t>(members[a]));
        const double m = static_cast<double>(members[a].size());
        for (std::size_t k = 0; k < members[a].size(); ++k)
            slots.push_back({(static_cast<double>(k) + rng.uniform()) / m, a, members[a][k]});
    }
    std::sort(slots.begin(), slots.end(), [](const Slot& x, const Slot& y) {
        return x.key != y.key ? x.key < y.key : x.group < y.group;
    });
    for (std::size_t i = 0; i < n; ++i) order[i] = slots[i].index;
    return order;
}

using BatchObjective = std::function<ad::Var(const ad::Var& theta, std::span<const std::size_t> batch)>;

// Mini-batch descent over a flat parameter vector. `after_step` may project
// the parameters; `after_epoch` receives the 1-based epoch index.
inline void descend(std::vector<double>& params, const GroupedDataset& data, const TrainConfig& cfg,
                    const BatchObjective& objective, const std::function<void(std::vector<double>&)>& after_step,
                    const std::function<void(int)>& after_epoch) {
    cfg.validate();
    Rng rng = Rng::derive(cfg.seed, 0x7EA1);
    Optimizer opt(cfg.optimizer, cfg.learning_rate, params.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = epoch_order(data.groups, data.num_groups(), cfg.shuffle, rng);
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> batch(order.data() + start, end - start);
            try {
                const ad::Var theta = ad::parameter(Tensor::row(params));
                const ad::Var loss = objective(theta, batch);
                if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
                const ad::Var g = ad::grad(loss, theta);
                opt.step(params, g.value().values());
                for (double v : params)
                    if (!std::isfinite(v)) throw NumericError("parameters diverged");
            } catch (const NumericError& e) {
                std::ostringstream msg;
                msg << "training aborted at epoch " << epoch << ", batch " << batch_index << ": " << e.what();
                throw NumericError(msg.str());
            }
            if (after_step) after_step(params);
        }
        if (after_epoch) after_epoch(epoch);
    }
}

inline ad::Var batch_features(const GroupedDataset& data, std::span<const std::size_t> batch) {
    return ad::constant(data.features.select_rows(batch));
}

inline std::vector<int> batch_labels(const GroupedDataset& data, std::span<const std::size_t> batch) {
    std::vector<int> out;
    out.reserve(batch.size());
    for (std::size_t i : batch) out.push_back(data.labels[i]);
    return out;
}

// Global and per-group mean of a per-sample column over a whole dataset.
inline std::vector<double> group_means(const Tensor& per_sample, const GroupedDataset& data, double& global) {
    const std::size_t m = data.num_groups();
    std::vector<double> sums(m, 0.0);
    std::vector<std::size_t> counts(m, 0);
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        total += per_sample[i];
        sums[static_cast<std::size_t>(data.groups[i])] += per_sample[i];
        ++counts[static_cast<std::size_t>(data.groups[i])];
    }
    global = total / static_cast<double>(data.size());
    for (std::size_t a = 0; a < m; ++a) sums[a] = counts[a] ? sums[a] / static_cast<double>(counts[a]) : 0.0;
    return sums;
}

inline void record_epoch(History& history, int epoch, const GatedNetwork& net, const GroupedDataset& data,
                         const Tensor& per_sample_loss, const std::vector<double>& lambdas = {}) {
    const auto predictions = net.predict(data.features);
    Tensor correct = Tensor::zeros(data.size(), 1);
    for (std::size_t i = 0; i < data.size(); ++i) correct[i] = predictions[i] == data.labels[i] ? 1.0 : 0.0;
    double global_loss = 0.0;
    double global_acc = 0.0;
    const auto losses = group_means(per_sample_loss, data, global_loss);
    const auto accs = group_means(correct, data, global_acc);
    history.push_back({epoch, "train", -1, global_loss, global_acc, lambdas});
    for (std::size_t a = 0; a < data.num_groups(); ++a)
        history.push_back({epoch, "train", static_cast<int>(a), losses[a], accs[a], lambdas});
}

inline Tensor per_sample_ce(const GatedNetwork& net, const GroupedDataset& data) {
    ad::GradModeGuard mode(false);
    const ad::Var logits = ad::constant(net.forward(data.features));
    return cross_entropy_per_sample(logits, data.labels).value();
}

inline Tensor per_sample_kd(const GatedNetwork& student, const Tensor& teacher_logits, const GroupedDataset& data,
                            const KDConfig& kd) {
    ad::GradModeGuard mode(false);
    const ad::Var logits = ad::constant(student.forward(data.features));
    return kd_loss_per_sample(logits, teacher_logits, data.labels, kd).value();
}

inline void require_trainable(const GatedNetwork& net, const GroupedDataset& data, const char* op) {
    if (net.gate_mode() != GateMode::frozen) throw ModeError(std::string(op) + ": gates must be frozen");
    if (data.size() == 0) throw PreconditionError(std::string(op) + ": empty training set");
    if (data.dim() != net.shape().input_dim) throw ShapeError(std::string(op) + ": feature dimension mismatch");
    if (data.num_classes > net.shape().num_classes)
        throw ShapeError(std::string(op) + ": dataset has more classes than the network");
}

} // namespace detail

// Empirical-risk training of weights and biases; gates are left as they are.
inline TrainResult train_base(const GatedNetwork& net, const GroupedDataset& data, const TrainConfig& cfg) {
    detail::require_trainable(net, data, "train_base");
    TrainResult result{net, {}};
    std::vector<double> params = net.parameters().vector();
    GatedNetwork& model = result.net;
    auto objective = [&model, &data](const ad::Var& theta, std::span<const std::size_t> batch) {
        const auto labels = detail::batch_labels(data, batch);
        const ad::Var logits = model.logits(theta, detail::batch_features(data, batch));
        return ad::mean(cross_entropy_per_sample(logits, labels));
    };
    auto after_epoch = [&](int epoch) {
        model.set_parameters(ParameterVector(params));
        detail::record_epoch(result.history, epoch, model, data, detail::per_sample_ce(model, data));
    };
    detail::descend(params, data, cfg, objective, nullptr, after_epoch);
    model.set_parameters(ParameterVector(params));
    return result;
}

// Knowledge-distillation fine-tuning of a linearized student against the
// original network. Only the student's weights and biases move.
inline TrainResult finetune_kd(const GatedNetwork& student, const GatedNetwork& teacher, const GroupedDataset& data,
                               const TrainConfig& cfg, const KDConfig& kd) {
    if (!(student.shape() == teacher.shape())) throw ShapeError("finetune_kd: student and teacher shapes differ");
    detail::require_trainable(student, data, "finetune_kd");
    kd.validate();
    const ParameterVector teacher_before = teacher.parameters();
    const Tensor teacher_logits = teacher.forward(data.features);

    TrainResult result{student, {}};
    GatedNetwork& model = result.net;
    std::vector<double> params = student.parameters().vector();
    auto objective = [&](const ad::Var& theta, std::span<const std::size_t> batch) {
        const auto labels = detail::batch_labels(data, batch);
        const ad::Var logits = model.logits(theta, detail::batch_features(data, batch));
        return ad::mean(kd_loss_per_sample(logits, teacher_logits.select_rows(batch), labels, kd));
    };
    auto after_epoch = [&](int epoch) {
        model.set_parameters(ParameterVector(params));
        detail::record_epoch(result.history, epoch, model, data,
                             detail::per_sample_kd(model, teacher_logits, data, kd));
    };
    detail::descend(params, data, cfg, objective, nullptr, after_epoch);
    model.set_parameters(ParameterVector(params));
    if (!(teacher.parameters() == teacher_before)) throw Error("finetune_kd: teacher parameters changed");
    return result;
}

// Fairness-constrained KD fine-tuning with per-group Lagrange multipliers.
// Each mini-batch minimizes L(B) + sum_a lambda_a * |L(B) - L_a(B)|; after each
// epoch lambda_a grows by mu * |L(S) - L_a(S)| over the full training set.
inline FairResult finetune_fair(const GatedNetwork& student, const GatedNetwork& teacher, const GroupedDataset& data,
                                const TrainConfig& cfg, const KDConfig& kd, double mu) {
    if (!(student.shape() == teacher.shape())) throw ShapeError("finetune_fair: student and teacher shapes differ");
    detail::require_trainable(student, data, "finetune_fair");
    kd.validate();
    const std::size_t m = data.num_groups();
    const auto sizes = data.group_sizes();
    for (std::size_t a = 0; a < m; ++a)
        if (sizes[a] == 0)
            throw PreconditionError("finetune_fair: group '" + data.group_names[a] + "' is absent from the training set");

    LagrangianState state(m, mu);
    const ParameterVector teacher_before = teacher.parameters();
    const Tensor teacher_logits = teacher.forward(data.features);

    FairResult result{student, {}, {}};
    GatedNetwork& model = result.net;
    std::vector<double> params = student.parameters().vector();

    auto objective = [&](const ad::Var& theta, std::span<const std::size_t> batch) {
        const auto labels = detail::batch_labels(data, batch);
        const ad::Var logits = model.logits(theta, detail::batch_features(data, batch));
        const ad::Var per_sample = kd_loss_per_sample(logits, teacher_logits.select_rows(batch), labels, kd);
        const ad::Var batch_loss = ad::scale(ad::sum(per_sample), 1.0 / static_cast<double>(batch.size()));
        ad::Var total = batch_loss;
        for (std::size_t a = 0; a < m; ++a) {
            if (state.multipliers[a] == 0.0) continue;
            Tensor mask = Tensor::zeros(batch.size(), 1);
            std::size_t count = 0;
            for (std::size_t i = 0; i < batch.size(); ++i)
                if (data.groups[batch[i]] == static_cast<int>(a)) {
                    mask[i] = 1.0;
                    ++count;
                }
            if (count == 0) continue;
            const ad::Var group_loss =
                ad::scale(ad::sum(ad::mul(per_sample, ad::constant(std::move(mask)))), 1.0 / static_cast<double>(count));
            total = ad::add(total, ad::scale(ad::abs(ad::sub(batch_loss, group_loss)), state.multipliers[a]));
        }
        return total;
    };
    auto after_epoch = [&](int epoch) {
        model.set_parameters(ParameterVector(params));
        const Tensor per_sample = detail::per_sample_kd(model, teacher_logits, data, kd);
        double global = 0.0;
        const auto group_losses = detail::group_means(per_sample, data, global);
        std::vector<double> violations(m);
        for (std::size_t a = 0; a < m; ++a) violations[a] = std::fabs(global - group_losses[a]);
        state.update(violations);
        result.multipliers.push_back(state.multipliers);
        detail::record_epoch(result.history, epoch, model, data, per_sample, state.multipliers);
    };
    detail::descend(params, data, cfg, objective, nullptr, after_epoch);
    model.set_parameters(ParameterVector(params));
    if (!(teacher.parameters() == teacher_before)) throw Error("finetune_fair: teacher parameters changed");
    return result;
}

struct ConvergeConfig {
    double grad_tol = 1e-4;
    int max_iters = 5000;
    std::size_t history = 10;
};

struct ConvergeResult {
    GatedNetwork net;
    double loss = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Full-batch L-BFGS on the mean cross-entropy, used to push a trained network
// to a stationary point before gradient-based diagnostics. Backtracking line
// search with the Armijo condition; curvature pairs with s'y <= 0 are dropped.
inline ConvergeResult converge(const GatedNetwork& net, const GroupedDataset& data, const ConvergeConfig& cfg = {}) {
    detail::require_trainable(net, data, "converge");
    if (!(cfg.grad_tol > 0.0)) throw PreconditionError("converge: grad_tol must be > 0");
    const ad::Var x = ad::constant(data.features);
    const ScalarFunction objective = [&net, &x, &data](const ad::Var& theta) {
        return ad::mean(cross_entropy_per_sample(net.logits(theta, x), data.labels));
    };

    ConvergeResult result{net};
    ParameterVector theta = net.parameters();
    auto [f, g] = value_and_grad(objective, theta);
    std::vector<ParameterVector> s_hist;
    std::vector<ParameterVector> y_hist;
    std::vector<double> rho_hist;
    int iter = 0;
    for (; iter < cfg.max_iters && g.norm() >= cfg.grad_tol; ++iter) {
        ParameterVector d = g;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t k = s_hist.size(); k-- > 0;) {
            alpha[k] = rho_hist[k] * s_hist[k].dot(d);
            d = d - y_hist[k] * alpha[k];
        }
        if (!s_hist.empty()) d = d * (s_hist.back().dot(y_hist.back()) / y_hist.back().dot(y_hist.back()));
        for (std::size_t k = 0; k < s_hist.size(); ++k) {
            const double beta = rho_hist[k] * y_hist[k].dot(d);
            d = d + s_hist[k] * (alpha[k] - beta);
        }
        d = d * -1.0;
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g * -1.0;
            slope = -g.dot(g);
        }
        double step = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
        ParameterVector next = theta;
        double f_next = f;
        bool accepted = false;
        for (int tries = 0; tries < 40; ++tries) {
            next = theta + d * step;
            f_next = evaluate(objective, next);
            if (std::isfinite(f_next) && f_next <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (s_hist.empty()) break;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            continue;
        }
        const ParameterVector g_next = grad(objective, next);
        const ParameterVector s = next - theta;
        const ParameterVector y = g_next - g;
        const double sy = s.dot(y);
        if (sy > 1e-12) {
            if (s_hist.size() == cfg.history) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
        }
        theta = next;
        f = f_next;
        g = g_next;
    }
    result.net.set_parameters(theta);
    result.loss = f;
    result.grad_norm = g.norm();
    result.iterations = iter;
    result.converged = result.grad_norm < cfg.grad_tol;
    return result;
}

// CSV with columns epoch, split, group, loss, accuracy, lambda_<group>...
inline std::string history_csv(const History& history, const std::vector<std::string>& group_names) {
    std::ostringstream out;
    out << "epoch,split,group,loss,accuracy";
    for (const auto& name : group_names) out << ",lambda_" << name;
    out << "\n";
    for (const EpochRecord& r : history) {
        out << r.epoch << "," << r.split << ","
            << (r.group < 0 ? std::string("all") : io::csv_escape(group_names[static_cast<std::size_t>(r.group)])) << ","
            << io::format_double(r.loss) << "," << io::format_double(r.accuracy);
        for (std::size_t a = 0; a < group_names.size(); ++a)
            out << "," << (a < r.lambdas.size() ? io::format_double(r.lambdas[a]) : std::string());
        out << "\n";
    }
    return out.str();
}

inline std::string multipliers_csv(const std::vector<std::vector<double>>& multipliers,
                                   const std::vector<std::string>& group_names) {
    std::ostringstream out;
    out << "epoch,group,lambda\n";
    for (std::size_t e = 0; e < multipliers.size(); ++e)
        for (std::size_t a = 0; a < multipliers[e].size(); ++a)
            out << e + 1 << "," << io::csv_escape(group_names[a]) << "," << io::format_double(multipliers[e][a]) << "\n";
    return out.str();
}

} // namespace relufair
