#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "relufair/error.hpp"

namespace relufair::svg {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct Axes {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool log_y = false;
};

namespace detail {

inline constexpr double width = 640.0;
inline constexpr double height = 420.0;
inline constexpr double left = 70.0;
inline constexpr double right = 150.0;
inline constexpr double top = 40.0;
inline constexpr double bottom = 60.0;

inline const char* color(std::size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return palette[i % 10];
}

// Fixed-format numbers keep the output byte-stable across platforms.
inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

inline Range range_of(const std::vector<double>& values, bool include_zero) {
    Range r{values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()),
            values.empty() ? 1.0 : *std::max_element(values.begin(), values.end())};
    if (include_zero) {
        r.lo = std::min(r.lo, 0.0);
        r.hi = std::max(r.hi, 0.0);
    }
    if (r.hi - r.lo < 1e-12) {
        r.lo -= 0.5;
        r.hi += 0.5;
    }
    const double pad = 0.05 * (r.hi - r.lo);
    if (!(include_zero && r.lo == 0.0)) r.lo -= pad;
    r.hi += pad;
    return r;
}

class Canvas {
public:
    explicit Canvas(const Axes& axes) : axes_(axes) {
        out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
             << "\" viewBox=\"0 0 " << num(width) << " " << num(height) << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
             << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
             << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
             << escape(axes.title) << "</text>\n";
    }

    double plot_w() const { return width - left - right; }
    double plot_h() const { return height - top - bottom; }

    void frame(Range yr, const std::vector<std::pair<double, std::string>>& x_ticks) {
        y_ = yr;
        out_ << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(plot_w()) << "\" height=\""
             << num(plot_h()) << "\" fill=\"none\" stroke=\"black\"/>\n";
        for (int k = 0; k <= 5; ++k) {
            const double v = yr.lo + (yr.hi - yr.lo) * k / 5.0;
            const double py = py_raw(v);
            out_ << "<line x1=\"" << num(left - 4) << "\" y1=\"" << num(py) << "\" x2=\"" << num(left) << "\" y2=\""
                 << num(py) << "\" stroke=\"black\"/>\n"
                 << "<text x=\"" << num(left - 7) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">"
                 << escape(label(v, axes_.log_y)) << "</text>\n";
        }
        for (const auto& [px, text] : x_ticks)
            out_ << "<line x1=\"" << num(px) << "\" y1=\"" << num(top + plot_h()) << "\" x2=\"" << num(px) << "\" y2=\""
                 << num(top + plot_h() + 4) << "\" stroke=\"black\"/>\n"
                 << "<text x=\"" << num(px) << "\" y=\"" << num(top + plot_h() + 18) << "\" text-anchor=\"middle\">"
                 << escape(text) << "</text>\n";
        out_ << "<text x=\"" << num(left + plot_w() / 2) << "\" y=\"" << num(height - 15)
             << "\" text-anchor=\"middle\">" << escape(axes_.x_label) << "</text>\n"
             << "<text transform=\"translate(18," << num(top + plot_h() / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
             << escape(axes_.y_label) << "</text>\n";
    }

    // Plot coordinate of an already transformed y value.
    double py_raw(double v) const { return top + plot_h() * (1.0 - (v - y_.lo) / (y_.hi - y_.lo)); }

    void legend(const std::vector<std::string>& names) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            const double y = top + 10 + 18.0 * static_cast<double>(i);
            out_ << "<rect x=\"" << num(width - right + 12) << "\" y=\"" << num(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
                 << color(i) << "\"/>\n"
                 << "<text x=\"" << num(width - right + 27) << "\" y=\"" << num(y) << "\">" << escape(names[i]) << "</text>\n";
        }
    }

    std::ostringstream& body() { return out_; }

    std::string finish() {
        out_ << "</svg>\n";
        return out_.str();
    }

    static std::string label(double v, bool log) { return log ? tick(std::pow(10.0, v)) : tick(v); }

private:
    Axes axes_;
    Range y_;
    std::ostringstream out_;
};

inline double transform(double v, bool log, const char* what) {
    if (!std::isfinite(v)) throw PreconditionError(std::string("svg: non-finite ") + what + " value");
    if (!log) return v;
    if (!(v > 0.0)) throw PreconditionError(std::string("svg: log axis needs positive ") + what + " values");
    return std::log10(v);
}

} // namespace detail

// values[g][c]: bar for group g within category c.
inline std::string grouped_bars(const Axes& axes, const std::vector<std::string>& categories,
                                const std::vector<std::string>& groups, const std::vector<std::vector<double>>& values) {
    if (values.size() != groups.size()) throw ShapeError("svg::grouped_bars: one value row per group");
    std::vector<double> all;
    for (const auto& row : values) {
        if (row.size() != categories.size()) throw ShapeError("svg::grouped_bars: one value per category");
        for (double v : row) all.push_back(detail::transform(v, false, "bar"));
    }
    detail::Canvas c(axes);
    const double slot = c.plot_w() / static_cast<double>(std::max<std::size_t>(categories.size(), 1));
    std::vector<std::pair<double, std::string>> ticks;
    for (std::size_t k = 0; k < categories.size(); ++k) ticks.emplace_back(detail::left + slot * (k + 0.5), categories[k]);
    const detail::Range yr = detail::range_of(all, true);
    c.frame(yr, ticks);
    const double bar = 0.8 * slot / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t k = 0; k < categories.size(); ++k) {
            const double x = detail::left + slot * k + 0.1 * slot + bar * g;
            const double y0 = c.py_raw(0.0);
            const double y1 = c.py_raw(values[g][k]);
            c.body() << "<rect x=\"" << detail::num(x) << "\" y=\"" << detail::num(std::min(y0, y1)) << "\" width=\""
                     << detail::num(bar) << "\" height=\"" << detail::num(std::fabs(y1 - y0)) << "\" fill=\""
                     << detail::color(g) << "\"/>\n";
        }
    c.legend(groups);
    return c.finish();
}

inline std::string bars(const Axes& axes, const std::vector<std::string>& categories, const std::vector<double>& values) {
    return grouped_bars(axes, categories, {axes.y_label}, {values});
}

// Polylines with markers; markers only when `lines` is false.
inline std::string plot(const Axes& axes, const std::vector<Series>& series, bool lines = true) {
    std::vector<double> xs;
    std::vector<double> ys;
    for (const Series& s : series) {
        if (s.x.size() != s.y.size()) throw ShapeError("svg::plot: series '" + s.name + "' has unequal x and y lengths");
        for (double v : s.x) xs.push_back(detail::transform(v, axes.log_x, "x"));
        for (double v : s.y) ys.push_back(detail::transform(v, axes.log_y, "y"));
    }
    detail::Canvas c(axes);
    const detail::Range xr = detail::range_of(xs, false);
    const detail::Range yr = detail::range_of(ys, false);
    auto px = [&](double v) { return detail::left + c.plot_w() * (v - xr.lo) / (xr.hi - xr.lo); };
    std::vector<std::pair<double, std::string>> ticks;
    for (int k = 0; k <= 5; ++k) {
        const double v = xr.lo + (xr.hi - xr.lo) * k / 5.0;
        ticks.emplace_back(px(v), detail::Canvas::label(v, axes.log_x));
    }
    c.frame(yr, ticks);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const Series& s = series[i];
        names.push_back(s.name);
        std::ostringstream pts;
        for (std::size_t k = 0; k < s.x.size(); ++k) {
            const double x = px(detail::transform(s.x[k], axes.log_x, "x"));
            const double y = c.py_raw(detail::transform(s.y[k], axes.log_y, "y"));
            if (k) pts << " ";
            pts << detail::num(x) << "," << detail::num(y);
            c.body() << "<circle cx=\"" << detail::num(x) << "\" cy=\"" << detail::num(y) << "\" r=\"3\" fill=\""
                     << detail::color(i) << "\"/>\n";
        }
        if (lines && s.x.size() > 1)
            c.body() << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << detail::color(i)
                     << "\" stroke-width=\"2\"/>\n";
    }
    c.legend(names);
    return c.finish();
}

inline std::string scatter(const Axes& axes, const std::vector<Series>& series) { return plot(axes, series, false); }

} // namespace relufair::svg
