#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "relufair/autodiff.hpp"
#include "relufair/error.hpp"
#include "relufair/rng.hpp"
#include "relufair/tensor.hpp"

namespace relufair {

// Matrix-free symmetric operator: returns A * v.
using LinearOperator = std::function<std::vector<double>(std::span<const double>)>;

struct EigenEstimate {
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
    // Dominant eigenvalue came out negative; it is still reported as is.
    bool negative_dominant = false;
};

// Power iteration for the eigenvalue of largest magnitude. Converged once two
// successive Rayleigh quotients differ by less than tol * max(1, |quotient|).
inline EigenEstimate max_eigenvalue(const LinearOperator& apply, std::size_t dim, double tol,
                                    int max_iters, std::uint64_t seed) {
    if (dim == 0) throw PreconditionError("max_eigenvalue: empty operator");
    if (!(tol > 0.0)) throw PreconditionError("max_eigenvalue: tol must be positive");

    Rng rng(seed);
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    double n0 = kernel::norm(v);
    for (double& x : v) x /= n0;

    EigenEstimate est;
    double previous = 0.0;
    for (int k = 1; k <= max_iters; ++k) {
        std::vector<double> w = apply(v);
        if (w.size() != dim) throw ShapeError("max_eigenvalue: operator changed dimension");
        const double quotient = kernel::dot(v, w);
        if (!std::isfinite(quotient)) throw NumericError("max_eigenvalue: non-finite Rayleigh quotient");
        est.value = quotient;
        est.iterations = k;
        const double w_norm = kernel::norm(w);
        if (w_norm == 0.0) {
            est.converged = true;
            break;
        }
        if (k > 1 && std::fabs(quotient - previous) < tol * std::max(1.0, std::fabs(quotient))) {
            est.converged = true;
            break;
        }
        previous = quotient;
        for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / w_norm;
    }
    est.negative_dominant = est.value < 0.0;
    return est;
}

// Largest (most positive) eigenvalue. When the dominant eigenvalue is negative
// a second pass runs on A - dominant * I, whose spectrum is nonnegative.
inline EigenEstimate top_eigenvalue(const LinearOperator& apply, std::size_t dim, double tol, int max_iters,
                                    std::uint64_t seed) {
    EigenEstimate first = max_eigenvalue(apply, dim, tol, max_iters, seed);
    if (!first.negative_dominant) return first;
    const double shift = first.value;
    LinearOperator shifted = [&apply, shift](std::span<const double> v) {
        std::vector<double> w = apply(v);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= shift * v[i];
        return w;
    };
    EigenEstimate second = max_eigenvalue(shifted, dim, tol, max_iters, seed + 1);
    second.value += shift;
    second.iterations += first.iterations;
    second.converged = second.converged && first.converged;
    second.negative_dominant = true;
    return second;
}

// Largest |eigenvalue| via power iteration on A^2, which is positive
// semidefinite, so equal-magnitude eigenvalues of opposite sign cannot stall it.
inline EigenEstimate spectral_radius(const LinearOperator& apply, std::size_t dim, double tol,
                                     int max_iters, std::uint64_t seed) {
    LinearOperator squared = [&apply](std::span<const double> v) {
        std::vector<double> once = apply(v);
        return apply(once);
    };
    EigenEstimate est = max_eigenvalue(squared, dim, tol, max_iters, seed);
    est.value = std::sqrt(std::max(0.0, est.value));
    est.negative_dominant = false;
    return est;
}

// All eigenvalues of a dense symmetric n x n matrix (row-major), ascending.
// Cyclic Jacobi rotations; intended for n up to a few hundred.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    if (a.size() != n * n) throw ShapeError("symmetric_eigenvalues: matrix is not n x n");
    auto at = [&a, n](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        double diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diag += at(i, i) * at(i, i);
            for (std::size_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        }
        if (off <= 1e-30 * std::max(diag, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = at(k, p);
                    const double akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = at(p, k);
                    const double aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
    std::sort(eig.begin(), eig.end());
    return eig;
}

// Dense Hessian of f at `at`, one exact HVP per column, symmetrized.
inline std::vector<double> dense_hessian(const ScalarFunction& f, const ParameterVector& at) {
    const std::size_t n = at.size();
    std::vector<double> h(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        ParameterVector e = ParameterVector::zeros(n);
        e[j] = 1.0;
        const ParameterVector col = hvp(f, at, e);
        for (std::size_t i = 0; i < n; ++i) h[i * n + j] = col[i];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = m;
            h[j * n + i] = m;
        }
    return h;
}

inline LinearOperator hessian_operator(const ScalarFunction& f, const ParameterVector& at) {
    return [f, at](std::span<const double> v) {
        return hvp(f, at, ParameterVector(std::vector<double>(v.begin(), v.end()))).vector();
    };
}

} // namespace relufair
