#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "relufair/error.hpp"
#include "relufair/io.hpp"
#include "relufair/rng.hpp"
#include "relufair/tensor.hpp"

namespace relufair {

// Features, class labels and protected-group labels for N samples.
struct GroupedDataset {
    Tensor features;  // N x d
    std::vector<int> labels;
    std::vector<int> groups;
    std::vector<std::string> group_names;
    std::size_t num_classes = 0;
    nlohmann::json provenance = nlohmann::json::object();

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols(); }
    std::size_t num_groups() const { return group_names.size(); }

    void validate() const {
        if (features.rows() != labels.size() || labels.size() != groups.size())
            throw ShapeError("GroupedDataset: features, labels and groups disagree on N");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw PreconditionError("GroupedDataset: label out of range");
        for (int a : groups)
            if (a < 0 || static_cast<std::size_t>(a) >= num_groups())
                throw PreconditionError("GroupedDataset: group index out of range");
    }

    std::vector<std::size_t> group_indices(int group) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < groups.size(); ++i)
            if (groups[i] == group) idx.push_back(i);
        return idx;
    }

    std::vector<std::size_t> group_sizes() const {
        std::vector<std::size_t> sizes(num_groups(), 0);
        for (int a : groups) ++sizes[static_cast<std::size_t>(a)];
        return sizes;
    }

    std::vector<std::size_t> class_sizes() const {
        std::vector<std::size_t> sizes(num_classes, 0);
        for (int y : labels) ++sizes[static_cast<std::size_t>(y)];
        return sizes;
    }

    // Rows in the given order; group/class vocabularies are kept.
    GroupedDataset subset(std::span<const std::size_t> indices) const {
        GroupedDataset out;
        out.features = features.select_rows(indices);
        out.labels.reserve(indices.size());
        out.groups.reserve(indices.size());
        for (std::size_t i : indices) {
            out.labels.push_back(labels[i]);
            out.groups.push_back(groups[i]);
        }
        out.group_names = group_names;
        out.num_classes = num_classes;
        out.provenance = provenance;
        return out;
    }

    GroupedDataset group(int a) const {
        const auto idx = group_indices(a);
        return subset(idx);
    }
};

enum class Stratify { group, label, both };

inline Stratify parse_stratify(const std::string& name) {
    if (name == "group") return Stratify::group;
    if (name == "label") return Stratify::label;
    if (name == "both") return Stratify::both;
    throw PreconditionError("unknown stratification '" + name + "'");
}

inline std::string to_string(Stratify s) {
    switch (s) {
    case Stratify::group: return "group";
    case Stratify::label: return "label";
    case Stratify::both: return "both";
    }
    return "both";
}

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    Stratify stratify_by = Stratify::both;
};

struct GroupWeightPreset {
    std::string name;
    std::vector<double> weights;

    void validate() const {
        double total = 0.0;
        for (double w : weights) {
            if (!(w > 0.0)) throw PreconditionError("preset '" + name + "': weights must be positive");
            total += w;
        }
        if (std::fabs(total - 1.0) > 1e-9)
            throw PreconditionError("preset '" + name + "': weights must sum to 1");
    }
};

inline GroupWeightPreset group_weight_preset(const std::string& name) {
    // Group shares of the UTKFace age and race attributes.
    if (name == "utk-age") return {name, {0.1014, 0.0363, 0.7756, 0.0867}};
    if (name == "utk-race") return {name, {0.4251, 0.1909, 0.1449, 0.1677, 0.0714}};
    throw PreconditionError("unknown group weight preset '" + name + "'");
}

// Largest-remainder apportionment of n samples; ties go to the lower index.
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t n) {
    std::vector<std::size_t> sizes(weights.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double quota = weights[i] * static_cast<double>(n);
        double whole = std::floor(quota + 1e-9);
        sizes[i] = static_cast<std::size_t>(whole);
        assigned += sizes[i];
        // Round remainders so representation noise cannot reorder equal ones.
        remainders.emplace_back(std::round((quota - whole) * 1e9) / 1e9, i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n && k < remainders.size(); ++k, ++assigned)
        ++sizes[remainders[k].second];
    return sizes;
}

inline std::vector<std::size_t> preset_sizes(const GroupWeightPreset& preset, std::size_t n) {
    preset.validate();
    return apportion(preset.weights, n);
}

namespace detail {

// Distance from (x, y) to the parabola v = u^2: coarse scan then Newton.
inline double distance_to_parabola(double x, double y) {
    double best_t = 0.0;
    double best = 1e300;
    for (int k = 0; k <= 300; ++k) {
        const double t = -1.5 + 3.0 * k / 300.0;
        const double d = (t - x) * (t - x) + (t * t - y) * (t * t - y);
        if (d < best) {
            best = d;
            best_t = t;
        }
    }
    double t = best_t;
    for (int it = 0; it < 30; ++it) {
        const double g = 2.0 * (t - x) + 4.0 * t * (t * t - y);
        const double h = 2.0 + 12.0 * t * t - 4.0 * y;
        if (h <= 0.0) break;
        t -= g / h;
    }
    const double refined = (t - x) * (t - x) + (t * t - y) * (t * t - y);
    return std::sqrt(std::min(best, refined));
}

// Clearance from the curve before noise: the minority keeps a wider gap than the
// majority so that its accuracy depends on how closely the boundary follows the curve.
inline constexpr double toy_minority_margin = 0.04;
inline constexpr double toy_majority_margin = 0.01;
inline constexpr double toy_band = 0.10;

} // namespace detail

// Two-class task on [-1, 1]^2 split by the strictly convex curve y = x^2.
// Group coincides with class. The majority (class 0) fills the region below the
// curve; the minority (class 1) sits above it, concentrated close to the curve.
// Both classes keep a small margin from the curve before feature noise is added.
inline GroupedDataset make_toy_boundary(std::size_t n = 4000, double minority_fraction = 0.07,
                                        double noise = 0.03, std::uint64_t seed = 0) {
    if (n < 100) throw PreconditionError("make_toy_boundary: n must be >= 100");
    if (!(minority_fraction > 0.0 && minority_fraction < 0.5))
        throw PreconditionError("make_toy_boundary: minority_fraction must lie in (0, 0.5)");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw PreconditionError("make_toy_boundary: noise must be >= 0");

    const auto n_minority = static_cast<std::size_t>(std::llround(minority_fraction * static_cast<double>(n)));
    const std::size_t n_majority = n - n_minority;
    Rng rng = Rng::derive(seed, 0x70E);

    std::vector<double> xs;
    std::vector<int> ys;
    xs.reserve(2 * n);
    while (ys.size() < n_majority) {
        const double x = rng.uniform(-1.0, 1.0);
        const double y = rng.uniform(-1.0, 1.0);
        if (y >= x * x) continue;
        if (detail::distance_to_parabola(x, y) < detail::toy_majority_margin) continue;
        xs.insert(xs.end(), {x, y});
        ys.push_back(0);
    }
    while (ys.size() < n) {
        const double t = rng.uniform(-1.0, 1.0);
        const double depth = detail::toy_minority_margin + std::fabs(rng.normal(0.0, detail::toy_band));
        const double scale = std::sqrt(1.0 + 4.0 * t * t);
        const double x = t - depth * 2.0 * t / scale;
        const double y = t * t + depth / scale;
        if (x < -1.0 || x > 1.0 || y > 1.0) continue;
        xs.insert(xs.end(), {x, y});
        ys.push_back(1);
    }
    for (double& v : xs) v += noise * rng.normal();

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));

    GroupedDataset ds;
    std::vector<double> features(2 * n);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        features[2 * i] = xs[2 * order[i]];
        features[2 * i + 1] = xs[2 * order[i] + 1];
        ds.labels[i] = ys[order[i]];
    }
    ds.features = Tensor::matrix(n, 2, std::move(features));
    ds.groups = ds.labels;
    ds.group_names = {"majority", "minority"};
    ds.num_classes = 2;
    ds.provenance = {{"generator", "toy_boundary"},
                     {"seed", seed},
                     {"args", {{"n", n}, {"minority_fraction", minority_fraction}, {"noise", noise}}}};
    return ds;
}

// One isotropic Gaussian blob per class around a random center in [-1, 1]^dim.
// Each class is its own group.
inline GroupedDataset make_gaussian_mixture(std::size_t num_classes, std::size_t dim,
                                            const std::vector<std::size_t>& samples_per_class, double spread,
                                            std::uint64_t seed) {
    if (num_classes < 2) throw PreconditionError("make_gaussian_mixture: need at least two classes");
    if (dim < 1) throw PreconditionError("make_gaussian_mixture: dim must be >= 1");
    if (samples_per_class.size() != num_classes)
        throw PreconditionError("make_gaussian_mixture: samples_per_class length must equal num_classes");
    for (std::size_t s : samples_per_class)
        if (s < 10) throw PreconditionError("make_gaussian_mixture: every class needs >= 10 samples");
    if (!(spread >= 0.0) || !std::isfinite(spread))
        throw PreconditionError("make_gaussian_mixture: spread must be >= 0");

    Rng rng = Rng::derive(seed, 0x6A55);
    std::vector<std::vector<double>> centers(num_classes, std::vector<double>(dim));
    for (auto& c : centers)
        for (double& v : c) v = rng.uniform(-1.0, 1.0);

    GroupedDataset ds;
    std::vector<double> features;
    for (std::size_t k = 0; k < num_classes; ++k) {
        for (std::size_t i = 0; i < samples_per_class[k]; ++i) {
            for (std::size_t j = 0; j < dim; ++j) features.push_back(centers[k][j] + spread * rng.normal());
            ds.labels.push_back(static_cast<int>(k));
        }
    }
    const std::size_t n = ds.labels.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));

    std::vector<double> shuffled(n * dim);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(order[i] * dim), dim,
                    shuffled.begin() + static_cast<std::ptrdiff_t>(i * dim));
        labels[i] = ds.labels[order[i]];
    }
    ds.features = Tensor::matrix(n, dim, std::move(shuffled));
    ds.labels = labels;
    ds.groups = labels;
    for (std::size_t k = 0; k < num_classes; ++k) ds.group_names.push_back("class_" + std::to_string(k));
    ds.num_classes = num_classes;
    ds.provenance = {{"generator", "gaussian_mixture"},
                     {"seed", seed},
                     {"args",
                      {{"num_classes", num_classes},
                       {"dim", dim},
                       {"samples_per_class", samples_per_class},
                       {"spread", spread}}}};
    return ds;
}

// Uniformly subsample each class without replacement; row order is preserved.
inline GroupedDataset imbalance(const GroupedDataset& ds, const std::vector<double>& keep_fractions,
                                std::uint64_t seed) {
    if (keep_fractions.size() != ds.num_classes)
        throw PreconditionError("imbalance: need one keep fraction per class");
    for (double f : keep_fractions)
        if (!(f > 0.0 && f <= 1.0)) throw PreconditionError("imbalance: keep fractions must lie in (0, 1]");

    Rng rng = Rng::derive(seed, 0x1BA1);
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.labels[i] == static_cast<int>(c)) members.push_back(i);
        const auto count = static_cast<std::size_t>(
            std::floor(keep_fractions[c] * static_cast<double>(members.size()) + 1e-9));
        if (count < members.size() && count < 5)
            throw PreconditionError("imbalance: class " + std::to_string(c) + " would keep only " +
                                    std::to_string(count) + " samples (minimum 5)");
        rng.shuffle(std::span<std::size_t>(members));
        keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(count));
    }
    std::sort(keep.begin(), keep.end());
    GroupedDataset out = ds.subset(keep);
    out.provenance["imbalance"] = {{"keep_fractions", keep_fractions}, {"seed", seed}};
    return out;
}

// Deterministic stratified split; both halves keep the original row order.
inline std::pair<GroupedDataset, GroupedDataset> split(const GroupedDataset& ds, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
        throw PreconditionError("split: train_fraction must lie in (0, 1)");
    ds.validate();

    std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int g = spec.stratify_by == Stratify::label ? -1 : ds.groups[i];
        const int y = spec.stratify_by == Stratify::group ? -1 : ds.labels[i];
        strata[{g, y}].push_back(i);
    }

    Rng rng = Rng::derive(spec.seed, 0x5B17);
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> eval_idx;
    for (auto& [key, members] : strata) {
        if (members.size() < 2) {
            std::ostringstream msg;
            msg << "split: stratum (group=" << key.first << ", label=" << key.second << ") has only "
                << members.size() << " sample; cannot stratify";
            throw PreconditionError(msg.str());
        }
        rng.shuffle(std::span<std::size_t>(members));
        auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(members.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
        train_idx.insert(train_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        eval_idx.insert(eval_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(eval_idx.begin(), eval_idx.end());
    GroupedDataset train = ds.subset(train_idx);
    GroupedDataset eval = ds.subset(eval_idx);
    const auto sizes = train.group_sizes();
    for (std::size_t a = 0; a < sizes.size(); ++a)
        if (sizes[a] == 0 && ds.group_sizes()[a] > 0)
            throw PreconditionError("split: group '" + ds.group_names[a] + "' is empty in the training split");
    return {std::move(train), std::move(eval)};
}

// CSV ingestion. Labels must be non-negative integers or are coded by first
// appearance; groups are always coded by first appearance of their text.
inline GroupedDataset load_csv(const std::filesystem::path& path, const std::vector<std::string>& feature_cols,
                               const std::string& label_col, const std::string& group_col) {
    const std::string text = io::read_text(path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw IoError("load_csv: '" + path.string() + "' is empty");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
    const auto header = io::split_csv_line(line);
    auto column = [&header, &path](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw IoError("load_csv: column '" + name + "' not found in '" + path.string() + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    std::vector<std::size_t> feature_idx;
    for (const auto& name : feature_cols) feature_idx.push_back(column(name));
    const std::size_t label_idx = column(label_col);
    const std::size_t group_idx = column(group_col);

    std::vector<double> features;
    std::vector<std::string> raw_labels;
    std::vector<std::string> raw_groups;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto fields = io::split_csv_line(line);
        if (fields.size() != header.size())
            throw IoError("load_csv: row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                          " fields, header has " + std::to_string(header.size()));
        for (std::size_t j : feature_idx) {
            const std::string& cell = fields[j];
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size() || !std::isfinite(v))
                throw IoError("load_csv: non-numeric value '" + cell + "' in column '" + header[j] + "' at row " +
                              std::to_string(row));
            features.push_back(v);
        }
        raw_labels.push_back(fields[label_idx]);
        raw_groups.push_back(fields[group_idx]);
    }
    if (row == 0) throw IoError("load_csv: '" + path.string() + "' has no data rows");

    GroupedDataset ds;
    bool integer_labels = true;
    for (const auto& s : raw_labels) {
        char* end = nullptr;
        const long v = std::strtol(s.c_str(), &end, 10);
        if (s.empty() || end != s.c_str() + s.size() || v < 0) {
            integer_labels = false;
            break;
        }
    }
    if (integer_labels) {
        int top = 0;
        for (const auto& s : raw_labels) {
            ds.labels.push_back(static_cast<int>(std::strtol(s.c_str(), nullptr, 10)));
            top = std::max(top, ds.labels.back());
        }
        ds.num_classes = static_cast<std::size_t>(top) + 1;
    } else {
        std::vector<std::string> vocab;
        for (const auto& s : raw_labels) {
            auto it = std::find(vocab.begin(), vocab.end(), s);
            if (it == vocab.end()) {
                vocab.push_back(s);
                it = vocab.end() - 1;
            }
            ds.labels.push_back(static_cast<int>(it - vocab.begin()));
        }
        ds.num_classes = vocab.size();
    }
    for (const auto& s : raw_groups) {
        auto it = std::find(ds.group_names.begin(), ds.group_names.end(), s);
        if (it == ds.group_names.end()) {
            ds.group_names.push_back(s);
            it = ds.group_names.end() - 1;
        }
        ds.groups.push_back(static_cast<int>(it - ds.group_names.begin()));
    }
    ds.num_classes = std::max<std::size_t>(ds.num_classes, 2);
    ds.features = Tensor::matrix(row, feature_idx.size(), std::move(features));
    ds.provenance = {{"generator", "csv"}, {"seed", 0}, {"args", {{"path", path.string()}}}};
    ds.validate();
    return ds;
}

inline nlohmann::json dataset_sidecar(const GroupedDataset& ds) {
    return {{"group_names", ds.group_names},
            {"C", ds.num_classes},
            {"M", ds.num_groups()},
            {"N", ds.size()},
            {"provenance", ds.provenance}};
}

// Export as CSV (x0..x{d-1},label,group) plus a JSON sidecar next to it.
inline void write_dataset(const GroupedDataset& ds, const std::filesystem::path& csv_path) {
    std::ostringstream out;
    for (std::size_t j = 0; j < ds.dim(); ++j) out << "x" << j << ",";
    out << "label,group\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) out << io::format_double(ds.features(i, j)) << ",";
        out << ds.labels[i] << "," << io::csv_escape(ds.group_names[static_cast<std::size_t>(ds.groups[i])])
            << "\n";
    }
    io::atomic_write(csv_path, out.str());
    std::filesystem::path sidecar = csv_path;
    sidecar.replace_extension(".json");
    io::atomic_write(sidecar, dataset_sidecar(ds).dump(2) + "\n");
}

inline std::vector<std::string> default_feature_columns(std::size_t dim) {
    std::vector<std::string> cols;
    for (std::size_t j = 0; j < dim; ++j) cols.push_back("x" + std::to_string(j));
    return cols;
}

} // namespace relufair
