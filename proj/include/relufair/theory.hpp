#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "relufair/error.hpp"
#include "relufair/rng.hpp"

namespace relufair::theory {

enum class FnKind { square, exp, softplus, linear };

inline std::string to_string(FnKind kind) {
    switch (kind) {
    case FnKind::square: return "square";
    case FnKind::exp: return "exp";
    case FnKind::softplus: return "softplus";
    case FnKind::linear: return "linear";
    }
    return "square";
}

inline FnKind parse_fn(const std::string& name) {
    if (name == "square") return FnKind::square;
    if (name == "exp") return FnKind::exp;
    if (name == "softplus") return FnKind::softplus;
    if (name == "linear") return FnKind::linear;
    throw PreconditionError("unknown function '" + name + "' (expected square, exp, softplus or linear)");
}

// A named univariate function on [a, b]. `linear` (f(x) = x) is the
// degenerate, not strictly convex, case.
struct ConvexFn1D {
    FnKind kind = FnKind::square;
    double a = 0.0;
    double b = 1.0;

    ConvexFn1D() = default;
    ConvexFn1D(FnKind k, double lo, double hi) : kind(k), a(lo), b(hi) {
        if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi))
            throw PreconditionError("ConvexFn1D: domain must satisfy a < b");
    }

    double operator()(double x) const {
        switch (kind) {
        case FnKind::square: return x * x;
        case FnKind::exp: return std::exp(x);
        case FnKind::softplus: return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        case FnKind::linear: return x;
        }
        return 0.0;
    }

    double second_derivative(double x) const {
        switch (kind) {
        case FnKind::square: return 2.0;
        case FnKind::exp: return std::exp(x);
        case FnKind::softplus: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        }
        case FnKind::linear: return 0.0;
        }
        return 0.0;
    }

    // Point where f'(x) = slope. Only valid for slopes f' attains.
    double inverse_derivative(double slope) const {
        switch (kind) {
        case FnKind::square: return slope / 2.0;
        case FnKind::exp: return std::log(slope);
        case FnKind::softplus: return std::log(slope / (1.0 - slope));
        case FnKind::linear: return 0.0;
        }
        return 0.0;
    }

    // Sampled second differences on a uniform 1000-step grid.
    bool strictly_convex() const {
        const int steps = 1000;
        const double h = (b - a) / steps;
        for (int i = 1; i < steps; ++i) {
            const double x = a + i * h;
            const double d2 = (*this)(x - h) - 2.0 * (*this)(x) + (*this)(x + h);
            if (!(d2 > 0.0)) return false;
        }
        return true;
    }

    double max_second_derivative() const {
        return std::max(second_derivative(a), second_derivative(b));
    }
};

// Best uniform linear fit of convex f on [u, v]: the chord shifted down by half
// the largest chord-to-function gap. Returns that half gap.
inline double segment_error(const ConvexFn1D& f, double u, double v) {
    if (!(v > u)) return 0.0;
    if (f.kind == FnKind::linear) return 0.0;
    const double fu = f(u);
    const double fv = f(v);
    const double slope = (fv - fu) / (v - u);
    double x = f.inverse_derivative(slope);
    if (!std::isfinite(x)) x = 0.5 * (u + v);
    x = std::clamp(x, u, v);
    const double chord = fu + slope * (x - u);
    return 0.5 * std::max(0.0, chord - f(x));
}

// Continuous piecewise-linear function given by its values at increasing breakpoints.
struct PiecewiseLinear {
    std::vector<double> breakpoints;
    std::vector<double> values;

    PiecewiseLinear() = default;
    PiecewiseLinear(std::vector<double> xs, std::vector<double> ys) : breakpoints(std::move(xs)), values(std::move(ys)) {
        if (breakpoints.size() < 2 || breakpoints.size() != values.size())
            throw PreconditionError("PiecewiseLinear: need matching breakpoints and values, at least two");
        for (std::size_t i = 1; i < breakpoints.size(); ++i)
            if (!(breakpoints[i] > breakpoints[i - 1]))
                throw PreconditionError("PiecewiseLinear: breakpoints must be strictly increasing");
    }

    std::size_t segments() const { return breakpoints.size() - 1; }
    double lo() const { return breakpoints.front(); }
    double hi() const { return breakpoints.back(); }

    double operator()(double x) const {
        if (x < lo() || x > hi()) throw PreconditionError("PiecewiseLinear: point outside the domain");
        auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), x);
        std::size_t j = it == breakpoints.end() ? segments() : static_cast<std::size_t>(it - breakpoints.begin());
        j = std::clamp<std::size_t>(j, 1, segments());
        const double x0 = breakpoints[j - 1];
        const double x1 = breakpoints[j];
        const double t = (x - x0) / (x1 - x0);
        return values[j - 1] + t * (values[j] - values[j - 1]);
    }
};

// Sup-norm residual |pwl - f| over grid + 1 uniform points of f's domain.
inline double pwl_residual(const PiecewiseLinear& pwl, const ConvexFn1D& f, int grid) {
    if (grid < 1) throw PreconditionError("pwl_residual: grid must be >= 1");
    if (pwl.lo() > f.a || pwl.hi() < f.b) throw PreconditionError("pwl_residual: approximant does not cover the domain");
    double worst = 0.0;
    for (int i = 0; i <= grid; ++i) {
        const double x = i == grid ? f.b : f.a + (f.b - f.a) * i / grid;
        worst = std::max(worst, std::fabs(pwl(x) - f(x)));
    }
    return worst;
}

// Interpolant of f at n + 1 equally spaced points.
inline PiecewiseLinear interpolate(const ConvexFn1D& f, int n) {
    if (n < 1) throw PreconditionError("interpolate: n must be >= 1");
    std::vector<double> xs(static_cast<std::size_t>(n) + 1);
    std::vector<double> ys(xs.size());
    for (int i = 0; i <= n; ++i) {
        xs[static_cast<std::size_t>(i)] = i == n ? f.b : f.a + (f.b - f.a) * i / n;
        ys[static_cast<std::size_t>(i)] = f(xs[static_cast<std::size_t>(i)]);
    }
    return {xs, ys};
}

struct PwlFit {
    double error = 0.0;
    // Half-width of the band attributable to restricting breakpoints to the grid.
    double uncertainty = 0.0;
    bool strictly_convex = true;
    PiecewiseLinear approximant;
};

// Minimax fit with breakpoints restricted to grid + 1 uniform points. E[k][j] is
// the best error covering [x_0, x_j] with k segments. For fixed j the last
// segment's error falls as its start i grows while E[k-1][i] rises, so the
// optimum sits where the two cross, found by binary search.
inline PwlFit best_pwl_error_on_grid(const ConvexFn1D& f, int n, int grid) {
    if (n < 1) throw PreconditionError("best_pwl_error: n must be >= 1");
    if (grid < n) throw PreconditionError("best_pwl_error: grid has fewer points than segments");
    const auto g = static_cast<std::size_t>(grid);
    const auto segs = static_cast<std::size_t>(n);
    std::vector<double> xs(g + 1);
    for (std::size_t i = 0; i <= g; ++i) xs[i] = i == g ? f.b : f.a + (f.b - f.a) * static_cast<double>(i) / grid;
    auto err = [&](std::size_t i, std::size_t j) { return segment_error(f, xs[i], xs[j]); };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best(segs + 1, std::vector<double>(g + 1, inf));
    std::vector<std::vector<std::size_t>> from(segs + 1, std::vector<std::size_t>(g + 1, 0));
    for (std::size_t j = 1; j <= g; ++j) best[1][j] = err(0, j);
    for (std::size_t k = 2; k <= segs; ++k) {
        for (std::size_t j = k; j <= g; ++j) {
            // Smallest i in [k-1, j-1] with best[k-1][i] >= err(i, j); the optimum is
            // at that i or the one before it.
            std::size_t lo = k - 1;
            std::size_t hi = j - 1;
            while (lo < hi) {
                const std::size_t mid = lo + (hi - lo) / 2;
                if (best[k - 1][mid] >= err(mid, j))
                    hi = mid;
                else
                    lo = mid + 1;
            }
            double value = inf;
            std::size_t arg = lo;
            for (std::size_t i : {lo, lo > k - 1 ? lo - 1 : lo}) {
                const double v = std::max(best[k - 1][i], err(i, j));
                if (v < value) {
                    value = v;
                    arg = i;
                }
            }
            best[k][j] = value;
            from[k][j] = arg;
        }
    }

    PwlFit fit;
    fit.error = best[segs][g];
    const double h = (f.b - f.a) / grid;
    fit.uncertainty = f.max_second_derivative() * h * h;
    fit.strictly_convex = f.strictly_convex();
    std::vector<std::size_t> cut(segs + 1);
    cut[segs] = g;
    for (std::size_t k = segs; k >= 1; --k) cut[k - 1] = k == 1 ? 0 : from[k][cut[k]];
    std::vector<double> bx;
    std::vector<double> by;
    for (std::size_t idx : cut) {
        bx.push_back(xs[idx]);
        // Chord minus the common error keeps the approximant continuous and
        // within `error` on every segment.
        by.push_back(f(xs[idx]) - fit.error);
    }
    fit.approximant = PiecewiseLinear(bx, by);
    return fit;
}

inline PwlFit best_pwl_error(const ConvexFn1D& f, int n, int grid) {
    if (n < 1) throw PreconditionError("best_pwl_error: n must be >= 1");
    if (static_cast<long long>(grid) < 1000LL * n)
        throw PreconditionError("best_pwl_error: grid " + std::to_string(grid) + " is too coarse for n = " +
                                std::to_string(n) + " (need >= " + std::to_string(1000LL * n) + ")");
    return best_pwl_error_on_grid(f, n, grid);
}

struct RateCheck {
    double slope = 0.0;
    std::vector<int> ns;
    std::vector<double> errors;
};

// Least-squares slope of log(error) against log(n), with grid = 1000 n.
inline RateCheck rate_check(const ConvexFn1D& f, const std::vector<int>& ns) {
    if (ns.size() < 4) throw PreconditionError("rate_check: need at least 4 segment counts");
    for (std::size_t i = 1; i < ns.size(); ++i)
        if (ns[i] != 2 * ns[i - 1]) throw PreconditionError("rate_check: segment counts must double at each step");
    RateCheck out;
    out.ns = ns;
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (int n : ns) {
        const double e = best_pwl_error(f, n, 1000 * n).error;
        if (!(e > 0.0)) throw NumericError("rate_check: zero error, the rate is undefined");
        out.errors.push_back(e);
        const double lx = std::log(static_cast<double>(n));
        const double ly = std::log(e);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double m = static_cast<double>(ns.size());
    out.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    return out;
}

// R -> R network: input -> k gated hidden layers -> scalar output.
struct ScalarReluNet {
    std::vector<std::size_t> widths;
    // weights[l] is widths[l] x fan_in, row-major; fan_in is 1 for the first layer.
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
    std::vector<std::vector<int>> gates;  // 1 rectified, 0 linear
    std::vector<double> out_weights;
    double out_bias = 0.0;

    std::size_t total_units() const {
        std::size_t t = 0;
        for (std::size_t w : widths) t += w;
        return t;
    }

    void validate() const {
        if (widths.empty()) throw PreconditionError("ScalarReluNet: at least one hidden layer");
        if (weights.size() != widths.size() || biases.size() != widths.size() || gates.size() != widths.size())
            throw ShapeError("ScalarReluNet: per-layer arrays disagree with depth");
        std::size_t fan_in = 1;
        for (std::size_t l = 0; l < widths.size(); ++l) {
            if (widths[l] < 1) throw PreconditionError("ScalarReluNet: widths must be >= 1");
            if (weights[l].size() != widths[l] * fan_in || biases[l].size() != widths[l] || gates[l].size() != widths[l])
                throw ShapeError("ScalarReluNet: layer " + std::to_string(l) + " has inconsistent sizes");
            fan_in = widths[l];
        }
        if (out_weights.size() != fan_in) throw ShapeError("ScalarReluNet: output weights disagree with last width");
    }

    // Gaussian weights and biases, every unit rectified.
    static ScalarReluNet random(const std::vector<std::size_t>& widths, Rng& rng) {
        ScalarReluNet net;
        net.widths = widths;
        std::size_t fan_in = 1;
        for (std::size_t w : widths) {
            std::vector<double> wl(w * fan_in);
            std::vector<double> bl(w);
            for (double& v : wl) v = rng.normal();
            for (double& v : bl) v = rng.normal();
            net.weights.push_back(wl);
            net.biases.push_back(bl);
            net.gates.emplace_back(w, 1);
            fan_in = w;
        }
        net.out_weights.resize(fan_in);
        for (double& v : net.out_weights) v = rng.normal();
        net.out_bias = rng.normal();
        return net;
    }

    double operator()(double x) const {
        std::vector<double> h{x};
        for (std::size_t l = 0; l < widths.size(); ++l) {
            std::vector<double> z(widths[l]);
            for (std::size_t j = 0; j < widths[l]; ++j) {
                double s = biases[l][j];
                for (std::size_t k = 0; k < h.size(); ++k) s += weights[l][j * h.size() + k] * h[k];
                z[j] = gates[l][j] ? std::max(0.0, s) : s;
            }
            h = std::move(z);
        }
        double y = out_bias;
        for (std::size_t k = 0; k < h.size(); ++k) y += out_weights[k] * h[k];
        return y;
    }
};

inline constexpr std::size_t region_unit_budget = 64;

// Exact number of maximal affine pieces on [lo, hi]. Every layer's outputs are
// tracked by their values on a sorted breakpoint set; between breakpoints they
// are affine, so new zero crossings of rectified pre-activations are found and
// inserted by linear interpolation. Adjacent pieces whose slope and intercept
// agree within 1e-10 are merged.
inline std::size_t count_linear_regions(const ScalarReluNet& net, double lo, double hi) {
    net.validate();
    if (!(lo < hi)) throw PreconditionError("count_linear_regions: empty domain");
    if (net.total_units() > region_unit_budget)
        throw PreconditionError("count_linear_regions: " + std::to_string(net.total_units()) +
                                " units exceed the enumeration budget of " + std::to_string(region_unit_budget));

    std::vector<double> xs{lo, hi};
    std::vector<std::vector<double>> h{{lo}, {hi}};  // h[point][unit]

    auto interpolate_at = [](const std::vector<double>& x, const std::vector<std::vector<double>>& vals,
                             const std::vector<double>& new_x) {
        std::vector<std::vector<double>> out;
        out.reserve(new_x.size());
        std::size_t seg = 0;
        for (double p : new_x) {
            while (seg + 2 < x.size() && x[seg + 1] < p) ++seg;
            const double t = (x[seg + 1] == x[seg]) ? 0.0 : (p - x[seg]) / (x[seg + 1] - x[seg]);
            std::vector<double> row(vals[seg].size());
            for (std::size_t u = 0; u < row.size(); ++u)
                row[u] = p == x[seg] ? vals[seg][u]
                         : p == x[seg + 1] ? vals[seg + 1][u]
                                           : vals[seg][u] + t * (vals[seg + 1][u] - vals[seg][u]);
            out.push_back(std::move(row));
        }
        return out;
    };

    for (std::size_t l = 0; l < net.widths.size(); ++l) {
        const std::size_t width = net.widths[l];
        auto pre = [&](const std::vector<double>& in) {
            std::vector<double> z(width);
            for (std::size_t j = 0; j < width; ++j) {
                double s = net.biases[l][j];
                for (std::size_t k = 0; k < in.size(); ++k) s += net.weights[l][j * in.size() + k] * in[k];
                z[j] = s;
            }
            return z;
        };
        std::vector<std::vector<double>> z;
        for (const auto& row : h) z.push_back(pre(row));

        std::vector<double> extra;
        for (std::size_t i = 0; i + 1 < xs.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) {
                if (!net.gates[l][j]) continue;
                const double z0 = z[i][j];
                const double z1 = z[i + 1][j];
                if ((z0 < 0.0 && z1 > 0.0) || (z0 > 0.0 && z1 < 0.0)) {
                    const double p = xs[i] + (xs[i + 1] - xs[i]) * z0 / (z0 - z1);
                    if (p > xs[i] && p < xs[i + 1]) extra.push_back(p);
                }
            }
        if (!extra.empty()) {
            std::vector<double> merged = xs;
            merged.insert(merged.end(), extra.begin(), extra.end());
            std::sort(merged.begin(), merged.end());
            merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
            h = interpolate_at(xs, h, merged);
            xs = std::move(merged);
            z.clear();
            for (const auto& row : h) z.push_back(pre(row));
        }
        for (auto& row : z)
            for (std::size_t j = 0; j < width; ++j)
                if (net.gates[l][j]) row[j] = std::max(0.0, row[j]);
        h = std::move(z);
    }

    std::vector<double> ys;
    for (const auto& row : h) {
        double y = net.out_bias;
        for (std::size_t k = 0; k < row.size(); ++k) y += net.out_weights[k] * row[k];
        ys.push_back(y);
    }
    std::size_t regions = 0;
    double slope = 0.0;
    double intercept = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
        const double s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        const double c = ys[i] - s * xs[i];
        if (regions == 0 || std::fabs(s - slope) > 1e-10 || std::fabs(c - intercept) > 1e-10) {
            ++regions;
            slope = s;
            intercept = c;
        }
    }
    return regions;
}

// 2^(k-1) * (w_1 + 1) * w_2 * ... * w_k.
inline std::uint64_t region_upper_bound(const std::vector<std::size_t>& widths) {
    if (widths.empty()) throw PreconditionError("region_upper_bound: need k >= 1");
    std::uint64_t bound = std::uint64_t{1} << (widths.size() - 1);
    bound *= widths[0] + 1;
    for (std::size_t l = 1; l < widths.size(); ++l) bound *= widths[l];
    return bound;
}

} // namespace relufair::theory
