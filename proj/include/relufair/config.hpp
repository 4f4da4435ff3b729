#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "json.hpp"
#include "relufair/data.hpp"
#include "relufair/error.hpp"
#include "relufair/io.hpp"
#include "relufair/losses.hpp"
#include "relufair/model.hpp"
#include "relufair/trainer.hpp"

namespace relufair {

enum class Generator { toy_boundary, gaussian_mixture, csv };

inline std::string to_string(Generator g) {
    switch (g) {
    case Generator::toy_boundary: return "toy_boundary";
    case Generator::gaussian_mixture: return "gaussian_mixture";
    case Generator::csv: return "csv";
    }
    return "toy_boundary";
}

enum class Scheme { snl, dr };

inline std::string to_string(Scheme s) { return s == Scheme::snl ? "snl" : "dr"; }

struct DatasetConfig {
    Generator generator = Generator::toy_boundary;
    // toy_boundary
    std::size_t n = 4000;
    double minority_fraction = 0.07;
    double noise = 0.03;
    // gaussian_mixture
    std::size_t num_classes = 3;
    std::size_t dim = 2;
    std::vector<std::size_t> samples_per_class{600, 300, 100};
    double spread = 0.3;
    // csv
    std::string path;
    std::vector<std::string> features;
    std::string label = "label";
    std::string group = "group";
    // split
    double train_fraction = 0.8;
    Stratify stratify_by = Stratify::both;

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct LinearizationConfig {
    Scheme scheme = Scheme::snl;
    std::vector<double> budgets{0.5, 0.2, 0.1};
    double gate_l1_weight = 1e-3;
    int snl_epochs = 20;
    std::vector<std::size_t> dr_layers{0};

    friend bool operator==(const LinearizationConfig&, const LinearizationConfig&) = default;
};

// Input width and class count come from the dataset.
struct NetworkConfig {
    std::vector<std::size_t> hidden_widths{8, 8};
    OutputHead head = OutputHead::softmax;

    NetworkShape shape_for(const GroupedDataset& data) const {
        return NetworkShape{data.dim(), hidden_widths, data.num_classes, head};
    }

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct MitigationConfig {
    bool enabled = true;
    double mu = 0.1;

    friend bool operator==(const MitigationConfig&, const MitigationConfig&) = default;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    NetworkConfig network;
    TrainConfig train;
    LinearizationConfig linearization;
    TrainConfig finetune;
    KDConfig kd;
    MitigationConfig mitigation;
    std::vector<std::uint64_t> seeds{0};
    std::string output = "runs/default";

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline std::string where(const YAML::Node& node) {
    const YAML::Mark m = node.Mark();
    if (m.line < 0) return "";
    return " (line " + std::to_string(m.line + 1) + ")";
}

[[noreturn]] inline void config_fail(const std::string& field, const std::string& message, const YAML::Node& node) {
    throw ConfigError("config: " + field + ": " + message + where(node));
}

template <class T>
T scalar(const YAML::Node& node, const std::string& field, const char* expected) {
    if (!node.IsScalar()) config_fail(field, std::string("expected ") + expected, node);
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        config_fail(field, std::string("expected ") + expected + ", got '" + node.Scalar() + "'", node);
    }
}

inline double finite(const YAML::Node& node, const std::string& field) {
    const double v = scalar<double>(node, field, "a number");
    if (!std::isfinite(v)) config_fail(field, "must be finite", node);
    return v;
}

inline std::uint64_t count(const YAML::Node& node, const std::string& field) {
    const std::string text = scalar<std::string>(node, field, "a non-negative integer");
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
        config_fail(field, "expected a non-negative integer, got '" + text + "'", node);
    try {
        return std::stoull(text);
    } catch (const std::exception&) {
        config_fail(field, "integer out of range", node);
    }
}

template <class T, class Fn>
std::vector<T> list(const YAML::Node& node, const std::string& field, Fn&& item) {
    if (!node.IsSequence()) config_fail(field, "expected a list", node);
    std::vector<T> out;
    for (std::size_t i = 0; i < node.size(); ++i) out.push_back(item(node[i], field + "[" + std::to_string(i) + "]"));
    return out;
}

// Mapping whose keys must all come from `allowed`.
inline const YAML::Node& section(const YAML::Node& node, const std::string& field, std::set<std::string> allowed) {
    if (!node.IsMap()) config_fail(field, "expected a mapping", node);
    for (const auto& kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (!allowed.contains(key))
            config_fail(field.empty() ? key : field + "." + key, "unknown key", kv.first);
    }
    return node;
}

inline std::string join(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

inline TrainConfig parse_train(const YAML::Node& node, const std::string& field, TrainConfig cfg) {
    section(node, field, {"epochs", "batch_size", "learning_rate", "optimizer", "momentum", "shuffle"});
    if (node["epochs"]) cfg.epochs = static_cast<int>(count(node["epochs"], join(field, "epochs")));
    if (node["batch_size"]) {
        cfg.batch_size = count(node["batch_size"], join(field, "batch_size"));
        if (cfg.batch_size < 1) config_fail(join(field, "batch_size"), "must be >= 1", node["batch_size"]);
    }
    if (node["learning_rate"]) {
        cfg.learning_rate = finite(node["learning_rate"], join(field, "learning_rate"));
        if (!(cfg.learning_rate > 0.0)) config_fail(join(field, "learning_rate"), "must be > 0", node["learning_rate"]);
    }
    if (node["optimizer"]) {
        const std::string name = scalar<std::string>(node["optimizer"], join(field, "optimizer"), "a string");
        try {
            cfg.optimizer.kind = parse_optimizer(name);
        } catch (const PreconditionError&) {
            config_fail(join(field, "optimizer"), "expected sgd, sgd_momentum or adam, got '" + name + "'",
                        node["optimizer"]);
        }
    }
    if (node["momentum"]) {
        cfg.optimizer.momentum = finite(node["momentum"], join(field, "momentum"));
        if (!(cfg.optimizer.momentum >= 0.0 && cfg.optimizer.momentum < 1.0))
            config_fail(join(field, "momentum"), "must lie in [0, 1)", node["momentum"]);
    }
    if (node["shuffle"]) cfg.shuffle = scalar<bool>(node["shuffle"], join(field, "shuffle"), "true or false");
    return cfg;
}

inline void emit_train(std::ostream& out, const std::string& name, const TrainConfig& t) {
    out << name << ":\n"
        << "  epochs: " << t.epochs << "\n"
        << "  batch_size: " << t.batch_size << "\n"
        << "  learning_rate: " << io::format_double(t.learning_rate) << "\n"
        << "  optimizer: " << to_string(t.optimizer.kind) << "\n"
        << "  momentum: " << io::format_double(t.optimizer.momentum) << "\n"
        << "  shuffle: " << (t.shuffle ? "true" : "false") << "\n";
}

template <class T>
std::string flow(const std::vector<T>& items) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out << ", ";
        if constexpr (std::is_same_v<T, double>)
            out << io::format_double(items[i]);
        else if constexpr (std::is_same_v<T, std::string>)
            out << nlohmann::json(items[i]).dump();
        else
            out << items[i];
    }
    out << "]";
    return out.str();
}

} // namespace detail

// Defaults for fine-tuning after linearization.
inline TrainConfig default_finetune() {
    TrainConfig t;
    t.epochs = 30;
    t.learning_rate = 0.002;
    return t;
}

inline TrainConfig default_base_train() {
    TrainConfig t;
    t.epochs = 100;
    t.learning_rate = 0.01;
    t.optimizer.kind = OptimizerKind::adam;
    return t;
}

inline ExperimentConfig default_config() {
    ExperimentConfig c;
    c.train = default_base_train();
    c.finetune = default_finetune();
    return c;
}

// Parses a YAML document. Every validation failure names the offending field
// with its dotted path and, when known, its line.
inline ExperimentConfig parse_config(const std::string& text) {
    using namespace detail;
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(std::string("config: syntax error: ") + e.what());
    }
    if (!root.IsMap()) throw ConfigError("config: top level must be a mapping");
    section(root, "", {"dataset", "network", "train", "linearization", "finetune", "kd", "mitigation", "seeds", "output"});

    ExperimentConfig c = default_config();

    if (const YAML::Node d = root["dataset"]) {
        section(d, "dataset",
                {"generator", "n", "minority_fraction", "noise", "num_classes", "dim", "samples_per_class", "spread", "path",
                 "features", "label", "group", "train_fraction", "stratify_by"});
        DatasetConfig& ds = c.dataset;
        if (d["generator"]) {
            const std::string g = scalar<std::string>(d["generator"], "dataset.generator", "a string");
            if (g == "toy_boundary") ds.generator = Generator::toy_boundary;
            else if (g == "gaussian_mixture") ds.generator = Generator::gaussian_mixture;
            else if (g == "csv") ds.generator = Generator::csv;
            else config_fail("dataset.generator", "expected toy_boundary, gaussian_mixture or csv, got '" + g + "'", d["generator"]);
        }
        if (d["n"]) {
            ds.n = count(d["n"], "dataset.n");
            if (ds.n < 100) config_fail("dataset.n", "must be >= 100", d["n"]);
        }
        if (d["minority_fraction"]) {
            ds.minority_fraction = finite(d["minority_fraction"], "dataset.minority_fraction");
            if (!(ds.minority_fraction > 0.0 && ds.minority_fraction < 0.5))
                config_fail("dataset.minority_fraction", "must lie in (0, 0.5)", d["minority_fraction"]);
        }
        if (d["noise"]) {
            ds.noise = finite(d["noise"], "dataset.noise");
            if (ds.noise < 0.0) config_fail("dataset.noise", "must be >= 0", d["noise"]);
        }
        if (d["num_classes"]) {
            ds.num_classes = count(d["num_classes"], "dataset.num_classes");
            if (ds.num_classes < 2) config_fail("dataset.num_classes", "must be >= 2", d["num_classes"]);
        }
        if (d["dim"]) {
            ds.dim = count(d["dim"], "dataset.dim");
            if (ds.dim < 1) config_fail("dataset.dim", "must be >= 1", d["dim"]);
        }
        if (d["samples_per_class"])
            ds.samples_per_class = list<std::size_t>(d["samples_per_class"], "dataset.samples_per_class",
                                                     [](const YAML::Node& n, const std::string& f) {
                                                         const auto v = count(n, f);
                                                         if (v < 1) config_fail(f, "must be >= 1", n);
                                                         return static_cast<std::size_t>(v);
                                                     });
        if (d["spread"]) {
            ds.spread = finite(d["spread"], "dataset.spread");
            if (!(ds.spread > 0.0)) config_fail("dataset.spread", "must be > 0", d["spread"]);
        }
        if (d["path"]) ds.path = scalar<std::string>(d["path"], "dataset.path", "a string");
        if (d["features"])
            ds.features = list<std::string>(d["features"], "dataset.features", [](const YAML::Node& n, const std::string& f) {
                return scalar<std::string>(n, f, "a string");
            });
        if (d["label"]) ds.label = scalar<std::string>(d["label"], "dataset.label", "a string");
        if (d["group"]) ds.group = scalar<std::string>(d["group"], "dataset.group", "a string");
        if (d["train_fraction"]) {
            ds.train_fraction = finite(d["train_fraction"], "dataset.train_fraction");
            if (!(ds.train_fraction > 0.0 && ds.train_fraction < 1.0))
                config_fail("dataset.train_fraction", "must lie in (0, 1)", d["train_fraction"]);
        }
        if (d["stratify_by"]) {
            const std::string s = scalar<std::string>(d["stratify_by"], "dataset.stratify_by", "a string");
            try {
                ds.stratify_by = parse_stratify(s);
            } catch (const PreconditionError&) {
                config_fail("dataset.stratify_by", "expected group, label or both, got '" + s + "'", d["stratify_by"]);
            }
        }
        if (ds.generator == Generator::gaussian_mixture && ds.samples_per_class.size() != ds.num_classes)
            config_fail("dataset.samples_per_class", "length must equal dataset.num_classes", d);
        if (ds.generator == Generator::csv) {
            if (ds.path.empty()) config_fail("dataset.path", "required when generator is csv", d);
            if (ds.features.empty()) config_fail("dataset.features", "required when generator is csv", d);
        }
    }

    if (const YAML::Node n = root["network"]) {
        section(n, "network", {"hidden_widths", "head"});
        if (n["hidden_widths"]) {
            c.network.hidden_widths = list<std::size_t>(n["hidden_widths"], "network.hidden_widths",
                                                        [](const YAML::Node& v, const std::string& f) {
                                                            const auto w = count(v, f);
                                                            if (w < 1) config_fail(f, "must be >= 1", v);
                                                            return static_cast<std::size_t>(w);
                                                        });
            if (c.network.hidden_widths.empty())
                config_fail("network.hidden_widths", "must list at least one layer", n["hidden_widths"]);
        }
        if (n["head"]) {
            const std::string h = scalar<std::string>(n["head"], "network.head", "a string");
            if (h != "softmax" && h != "sigmoid")
                config_fail("network.head", "expected softmax or sigmoid, got '" + h + "'", n["head"]);
            c.network.head = parse_output_head(h);
        }
    }

    if (const YAML::Node t = root["train"]) c.train = parse_train(t, "train", c.train);
    if (const YAML::Node t = root["finetune"]) c.finetune = parse_train(t, "finetune", c.finetune);

    if (const YAML::Node l = root["linearization"]) {
        section(l, "linearization", {"scheme", "budgets", "gate_l1_weight", "snl_epochs", "dr_layers"});
        LinearizationConfig& lin = c.linearization;
        if (l["scheme"]) {
            const std::string s = scalar<std::string>(l["scheme"], "linearization.scheme", "a string");
            if (s == "snl") lin.scheme = Scheme::snl;
            else if (s == "dr") lin.scheme = Scheme::dr;
            else config_fail("linearization.scheme", "expected snl or dr, got '" + s + "'", l["scheme"]);
        }
        if (l["budgets"]) {
            lin.budgets = list<double>(l["budgets"], "linearization.budgets", [](const YAML::Node& v, const std::string& f) {
                const double b = finite(v, f);
                if (!(b > 0.0 && b <= 1.0)) config_fail(f, "budget must lie in (0, 1], got " + v.Scalar(), v);
                return b;
            });
            if (lin.budgets.empty()) config_fail("linearization.budgets", "must list at least one budget", l["budgets"]);
            for (std::size_t i = 1; i < lin.budgets.size(); ++i)
                if (!(lin.budgets[i] < lin.budgets[i - 1]))
                    config_fail("linearization.budgets[" + std::to_string(i) + "]", "budgets must be strictly decreasing",
                                l["budgets"][i]);
        }
        if (l["gate_l1_weight"]) {
            lin.gate_l1_weight = finite(l["gate_l1_weight"], "linearization.gate_l1_weight");
            if (lin.gate_l1_weight < 0.0) config_fail("linearization.gate_l1_weight", "must be >= 0", l["gate_l1_weight"]);
        }
        if (l["snl_epochs"]) lin.snl_epochs = static_cast<int>(count(l["snl_epochs"], "linearization.snl_epochs"));
        if (l["dr_layers"])
            lin.dr_layers = list<std::size_t>(l["dr_layers"], "linearization.dr_layers",
                                              [](const YAML::Node& v, const std::string& f) { return static_cast<std::size_t>(count(v, f)); });
    }
    if (c.linearization.scheme == Scheme::dr) {
        std::set<std::size_t> layers;
        for (std::size_t l : c.linearization.dr_layers) {
            if (l >= c.network.hidden_widths.size())
                config_fail("linearization.dr_layers", "layer index " + std::to_string(l) + " exceeds network depth",
                            root["linearization"] ? root["linearization"] : root);
            layers.insert(l);
        }
        if (layers.empty() || layers.size() == c.network.hidden_widths.size())
            config_fail("linearization.dr_layers", "must name at least one layer and leave one rectified layer",
                        root["linearization"] ? root["linearization"] : root);
    }

    if (const YAML::Node k = root["kd"]) {
        section(k, "kd", {"temperature", "distill_weight"});
        if (k["temperature"]) {
            c.kd.temperature = finite(k["temperature"], "kd.temperature");
            if (!(c.kd.temperature > 0.0)) config_fail("kd.temperature", "must be > 0", k["temperature"]);
        }
        if (k["distill_weight"]) {
            c.kd.distill_weight = finite(k["distill_weight"], "kd.distill_weight");
            if (!(c.kd.distill_weight >= 0.0 && c.kd.distill_weight <= 1.0))
                config_fail("kd.distill_weight", "must lie in [0, 1]", k["distill_weight"]);
        }
    }

    if (const YAML::Node m = root["mitigation"]) {
        section(m, "mitigation", {"enabled", "mu"});
        if (m["enabled"]) c.mitigation.enabled = scalar<bool>(m["enabled"], "mitigation.enabled", "true or false");
        if (m["mu"]) {
            c.mitigation.mu = finite(m["mu"], "mitigation.mu");
            if (!(c.mitigation.mu > 0.0)) config_fail("mitigation.mu", "multiplier step must be > 0", m["mu"]);
        }
    }

    if (const YAML::Node s = root["seeds"]) {
        c.seeds = list<std::uint64_t>(s, "seeds", [](const YAML::Node& v, const std::string& f) { return count(v, f); });
        if (c.seeds.empty()) config_fail("seeds", "must list at least one seed", s);
        std::set<std::uint64_t> unique(c.seeds.begin(), c.seeds.end());
        if (unique.size() != c.seeds.size()) config_fail("seeds", "seeds must be distinct", s);
    }
    if (const YAML::Node o = root["output"]) {
        c.output = scalar<std::string>(o, "output", "a string");
        if (c.output.empty()) config_fail("output", "must not be empty", o);
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = io::read_text(path);
    } catch (const IoError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config(text);
}

// Canonical YAML text. Every field is written, so parsing it back yields an
// equal configuration.
inline std::string serialize_config(const ExperimentConfig& c) {
    using detail::flow;
    std::ostringstream out;
    const DatasetConfig& d = c.dataset;
    out << "dataset:\n"
        << "  generator: " << to_string(d.generator) << "\n"
        << "  n: " << d.n << "\n"
        << "  minority_fraction: " << io::format_double(d.minority_fraction) << "\n"
        << "  noise: " << io::format_double(d.noise) << "\n"
        << "  num_classes: " << d.num_classes << "\n"
        << "  dim: " << d.dim << "\n"
        << "  samples_per_class: " << flow(d.samples_per_class) << "\n"
        << "  spread: " << io::format_double(d.spread) << "\n"
        << "  path: " << nlohmann::json(d.path).dump() << "\n"
        << "  features: " << flow(d.features) << "\n"
        << "  label: " << nlohmann::json(d.label).dump() << "\n"
        << "  group: " << nlohmann::json(d.group).dump() << "\n"
        << "  train_fraction: " << io::format_double(d.train_fraction) << "\n"
        << "  stratify_by: " << to_string(d.stratify_by) << "\n";
    out << "network:\n"
        << "  hidden_widths: " << flow(c.network.hidden_widths) << "\n"
        << "  head: " << to_string(c.network.head) << "\n";
    detail::emit_train(out, "train", c.train);
    const LinearizationConfig& l = c.linearization;
    out << "linearization:\n"
        << "  scheme: " << to_string(l.scheme) << "\n"
        << "  budgets: " << flow(l.budgets) << "\n"
        << "  gate_l1_weight: " << io::format_double(l.gate_l1_weight) << "\n"
        << "  snl_epochs: " << l.snl_epochs << "\n"
        << "  dr_layers: " << flow(l.dr_layers) << "\n";
    detail::emit_train(out, "finetune", c.finetune);
    out << "kd:\n"
        << "  temperature: " << io::format_double(c.kd.temperature) << "\n"
        << "  distill_weight: " << io::format_double(c.kd.distill_weight) << "\n";
    out << "mitigation:\n"
        << "  enabled: " << (c.mitigation.enabled ? "true" : "false") << "\n"
        << "  mu: " << io::format_double(c.mitigation.mu) << "\n";
    out << "seeds: " << flow(c.seeds) << "\n";
    out << "output: " << nlohmann::json(c.output).dump() << "\n";
    return out.str();
}

// Per-seed train and eval splits described by the dataset section.
inline std::pair<GroupedDataset, GroupedDataset> materialize(const DatasetConfig& d, std::uint64_t seed) {
    GroupedDataset full;
    switch (d.generator) {
    case Generator::toy_boundary: full = make_toy_boundary(d.n, d.minority_fraction, d.noise, seed); break;
    case Generator::gaussian_mixture:
        full = make_gaussian_mixture(d.num_classes, d.dim, d.samples_per_class, d.spread, seed);
        break;
    case Generator::csv: full = load_csv(d.path, d.features, d.label, d.group); break;
    }
    return split(full, SplitSpec{d.train_fraction, seed, d.stratify_by});
}

} // namespace relufair
