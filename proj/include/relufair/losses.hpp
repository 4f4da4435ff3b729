#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "relufair/autodiff.hpp"
#include "relufair/error.hpp"
#include "relufair/tensor.hpp"

namespace relufair {

struct KDConfig {
    double temperature = 4.0;
    double distill_weight = 0.9;

    void validate() const {
        if (!(temperature > 0.0)) throw PreconditionError("KDConfig: temperature must be > 0");
        if (!(distill_weight >= 0.0 && distill_weight <= 1.0))
            throw PreconditionError("KDConfig: distill_weight must lie in [0, 1]");
    }

    friend bool operator==(const KDConfig&, const KDConfig&) = default;
};

// Per-sample loss column (n x 1) from a batch of logits.
using LossFn = std::function<ad::Var(const ad::Var& logits, std::span<const int> labels)>;

inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor out = Tensor::zeros(labels.size(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw PreconditionError("one_hot: label out of range");
        out(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return out;
}

// -log softmax(logits)[y] for every row.
inline ad::Var cross_entropy_per_sample(const ad::Var& logits, std::span<const int> labels) {
    if (labels.size() != logits.rows()) throw ShapeError("cross_entropy: label count differs from batch size");
    const ad::Var picked = ad::mul(ad::log_softmax(logits), ad::constant(one_hot(labels, logits.cols())));
    return ad::neg(ad::sum_to(picked, logits.rows(), 1));
}

inline double cross_entropy(const Tensor& logits, int y) {
    ad::GradModeGuard mode(false);
    const int labels[] = {y};
    const Tensor row = Tensor::row(logits.to_vector());
    return cross_entropy_per_sample(ad::constant(row), labels).item();
}

// distill_weight * T^2 * KL(softmax(teacher / T) || softmax(student / T))
//   + (1 - distill_weight) * cross_entropy(student, y), per row.
inline ad::Var kd_loss_per_sample(const ad::Var& student_logits, const Tensor& teacher_logits,
                                  std::span<const int> labels, const KDConfig& kd) {
    if (!student_logits.value().same_shape(teacher_logits))
        throw ShapeError("kd_loss: student and teacher logits differ in shape");
    const std::size_t n = student_logits.rows();
    const double t = kd.temperature;
    ad::Var total;
    if (kd.distill_weight > 0.0) {
        Tensor teacher_log_probs;
        {
            ad::GradModeGuard mode(false);
            teacher_log_probs = ad::log_softmax(ad::constant(kernel::map(teacher_logits, [t](double v) {
                                                    return v / t;
                                                }))).value();
        }
        const Tensor teacher_probs = kernel::map(teacher_log_probs, [](double v) { return std::exp(v); });
        const ad::Var student_log_probs = ad::log_softmax(ad::scale(student_logits, 1.0 / t));
        const ad::Var diff = ad::sub(ad::constant(teacher_log_probs), student_log_probs);
        const ad::Var kl = ad::sum_to(ad::mul(diff, ad::constant(teacher_probs)), n, 1);
        total = ad::scale(kl, kd.distill_weight * t * t);
    }
    if (kd.distill_weight < 1.0) {
        const ad::Var ce = ad::scale(cross_entropy_per_sample(student_logits, labels), 1.0 - kd.distill_weight);
        total = total.defined() ? ad::add(total, ce) : ce;
    }
    return total;
}

inline double kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, int y, const KDConfig& kd) {
    ad::GradModeGuard mode(false);
    const int labels[] = {y};
    const Tensor s = Tensor::row(student_logits.to_vector());
    const Tensor t = Tensor::row(teacher_logits.to_vector());
    return kd_loss_per_sample(ad::constant(s), t, labels, kd).item();
}

inline LossFn cross_entropy_loss() { return cross_entropy_per_sample; }

} // namespace relufair
