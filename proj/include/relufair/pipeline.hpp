#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "relufair/audit.hpp"
#include "relufair/checkpoint.hpp"
#include "relufair/config.hpp"
#include "relufair/hash.hpp"
#include "relufair/io.hpp"
#include "relufair/linearize.hpp"
#include "relufair/svg.hpp"
#include "relufair/theory.hpp"
#include "relufair/trainer.hpp"

namespace relufair::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* tool_version = "relufair 0.3.0";

struct RunContext {
    ExperimentConfig config;
    fs::path out;
    std::vector<std::uint64_t> seeds;
    unsigned jobs = 1;
    bool finetune = true;
    std::ostream* log = nullptr;
};

inline RunContext make_context(ExperimentConfig config, std::optional<fs::path> out,
                               std::optional<std::vector<std::uint64_t>> seeds, unsigned jobs, bool finetune) {
    RunContext ctx;
    ctx.out = out ? *out : fs::path(config.output);
    if (seeds) {
        if (seeds->empty()) throw ConfigError("config: seeds: must list at least one seed");
        config.seeds = *seeds;
    }
    ctx.seeds = config.seeds;
    ctx.config = std::move(config);
    ctx.jobs = std::max(1u, jobs);
    ctx.finetune = finetune;
    return ctx;
}

// Effective configuration digest; the output directory does not contribute.
inline std::string config_hash(const ExperimentConfig& config) {
    ExperimentConfig c = config;
    c.output.clear();
    return sha256_hex(serialize_config(c));
}

// --- layout ------------------------------------------------------------------

struct Variant {
    std::string tag;
    double budget = 1.0;  // snl only
    std::set<std::size_t> layers;  // dr only
};

inline std::vector<Variant> variants(const ExperimentConfig& c) {
    std::vector<Variant> out;
    if (c.linearization.scheme == Scheme::snl) {
        for (double b : c.linearization.budgets) out.push_back({"snl-b" + io::format_double(b), b, {}});
    } else {
        std::set<std::size_t> layers(c.linearization.dr_layers.begin(), c.linearization.dr_layers.end());
        std::string tag = "dr-l";
        bool first = true;
        for (std::size_t l : layers) {
            tag += (first ? "" : "-") + std::to_string(l);
            first = false;
        }
        out.push_back({tag, 0.0, layers});
    }
    return out;
}

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed-" + std::to_string(seed)); }
inline fs::path ckpt(const fs::path& dir, const std::string& tag) { return dir / (tag + ".ckpt.json"); }
inline fs::path history(const fs::path& dir, const std::string& tag) { return dir / (tag + ".history.csv"); }

// File name stem of a checkpoint path without the ".ckpt.json" suffix.
inline std::string ckpt_tag(const fs::path& path) {
    std::string name = path.filename().string();
    const std::string suffix = ".ckpt.json";
    if (name.size() > suffix.size() && name.ends_with(suffix)) return name.substr(0, name.size() - suffix.size());
    return path.stem().string();
}

// --- manifest ------------------------------------------------------------------

struct Artifact {
    std::string kind;
    fs::path path;  // absolute or relative to the working directory
    std::optional<std::uint64_t> seed;
};

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline nlohmann::json strip_timestamps(nlohmann::json doc) {
    doc.erase("content_hash");
    doc.erase("updated_at");
    if (doc.contains("stages"))
        for (auto& [name, stage] : doc["stages"].items()) {
            stage.erase("started_at");
            stage.erase("finished_at");
        }
    return doc;
}

// Digest of the manifest with timestamps removed; equal across identical reruns.
inline std::string manifest_hash(const nlohmann::json& manifest) {
    return sha256_hex(canonical_text(strip_timestamps(manifest)));
}

// Merges one stage into out/manifest.json. Stages recorded under a different
// configuration are discarded. Every referenced file must exist.
inline nlohmann::json record_stage(const RunContext& ctx, const std::string& stage, std::vector<Artifact> artifacts,
                                   const std::string& started_at) {
    const fs::path path = ctx.out / "manifest.json";
    const std::string hash = config_hash(ctx.config);
    nlohmann::json manifest;
    if (fs::exists(path)) {
        try {
            manifest = nlohmann::json::parse(io::read_text(path));
        } catch (const nlohmann::json::parse_error&) {
            manifest = nlohmann::json();
        }
        if (!manifest.is_object() || manifest.value("config_hash", "") != hash) manifest = nlohmann::json();
    }
    if (manifest.is_null())
        manifest = {{"config_hash", hash}, {"stages", nlohmann::json::object()}};
    manifest["tool_version"] = tool_version;
    manifest["config"] = serialize_config(ctx.config);

    std::sort(artifacts.begin(), artifacts.end(), [](const Artifact& a, const Artifact& b) { return a.path < b.path; });
    nlohmann::json list = nlohmann::json::array();
    for (const Artifact& a : artifacts) {
        if (!fs::exists(a.path)) throw IoError("manifest: artifact '" + a.path.string() + "' does not exist");
        nlohmann::json entry = {{"kind", a.kind},
                                {"path", fs::relative(a.path, ctx.out).generic_string()},
                                {"sha256", sha256_file(a.path)}};
        if (a.seed) entry["seed"] = *a.seed;
        list.push_back(entry);
    }
    manifest["stages"][stage] = {{"artifacts", list}, {"started_at", started_at}, {"finished_at", utc_now()}};
    for (const auto& [name, st] : manifest["stages"].items())
        for (const auto& a : st["artifacts"])
            if (!fs::exists(ctx.out / a["path"].get<std::string>()))
                throw IoError("manifest: stage '" + name + "' references missing '" + a["path"].get<std::string>() + "'");
    manifest["content_hash"] = manifest_hash(manifest);
    io::atomic_write(path, manifest.dump(2) + "\n");
    return manifest;
}

// --- jobs ----------------------------------------------------------------------

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results land by index,
// so output order never depends on scheduling. The lowest-index failure is
// rethrown after every job has finished.
template <class T>
std::vector<T> parallel_map(std::size_t n, unsigned jobs, const std::function<T(std::size_t)>& fn) {
    std::vector<std::optional<T>> results(n);
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                results[i] = fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        const unsigned threads = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<T> out;
    out.reserve(n);
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
}

inline void note(const RunContext& ctx, const std::string& message) {
    static std::mutex mu;
    if (ctx.log == nullptr) return;
    std::lock_guard lock(mu);
    *ctx.log << message << "\n";
}

inline TrainConfig seeded(TrainConfig cfg, std::uint64_t seed) {
    cfg.seed = seed;
    return cfg;
}

inline void require_files(const std::vector<fs::path>& paths) {
    for (const fs::path& p : paths)
        if (!fs::is_regular_file(p)) throw IoError("missing checkpoint '" + p.string() + "'");
}

inline std::vector<Artifact> flatten(std::vector<std::vector<Artifact>> parts) {
    std::vector<Artifact> out;
    for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

// --- train -----------------------------------------------------------------------

inline std::vector<fs::path> cmd_train(const RunContext& ctx) {
    const std::string started = utc_now();
    auto per_seed = parallel_map<std::vector<Artifact>>(ctx.seeds.size(), ctx.jobs, [&](std::size_t i) {
        const std::uint64_t seed = ctx.seeds[i];
        const auto [train, eval] = materialize(ctx.config.dataset, seed);
        const GatedNetwork init = GatedNetwork::initialized(ctx.config.network.shape_for(train), seed);
        note(ctx, "train: seed " + std::to_string(seed));
        const TrainResult res = train_base(init, train, seeded(ctx.config.train, seed));
        const fs::path dir = seed_dir(ctx.out, seed);
        save_checkpoint(ckpt(dir, "base"), res.net, {seed, "train", 1.0});
        io::atomic_write(history(dir, "base"), history_csv(res.history, train.group_names));
        return std::vector<Artifact>{{"checkpoint", ckpt(dir, "base"), seed}, {"history", history(dir, "base"), seed}};
    });
    auto artifacts = flatten(per_seed);
    record_stage(ctx, "train", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts)
        if (a.kind == "checkpoint") out.push_back(a.path);
    return out;
}

// --- linearize -------------------------------------------------------------------

inline GatedNetwork apply_variant(const RunContext& ctx, const Variant& v, const GatedNetwork& base,
                                  const GroupedDataset& train, std::uint64_t seed) {
    if (ctx.config.linearization.scheme == Scheme::dr) return linearize_dr(base, v.layers);
    return linearize_snl(base, ReluBudget::from_fraction(v.budget, base.total_units()),
                         ctx.config.linearization.gate_l1_weight, ctx.config.linearization.snl_epochs, train, seed,
                         seeded(ctx.config.train, seed));
}

inline double budget_of(const GatedNetwork& net) {
    return static_cast<double>(net.relu_count()) / static_cast<double>(net.total_units());
}

// Linearizes one base checkpoint into every configured variant. With
// fine-tuning on, "<tag>" is KD-finetuned and "<tag>-raw" keeps the frozen mask
// output; without it "<tag>" is the raw output.
inline std::vector<Artifact> linearize_one(const RunContext& ctx, const fs::path& base_path, const fs::path& dir) {
    const Checkpoint base = load_checkpoint(base_path);
    const std::uint64_t seed = base.meta.seed;
    const auto [train, eval] = materialize(ctx.config.dataset, seed);
    std::vector<Artifact> out;
    for (const Variant& v : variants(ctx.config)) {
        note(ctx, "linearize: seed " + std::to_string(seed) + " " + v.tag);
        const GatedNetwork raw = apply_variant(ctx, v, base.net, train, seed);
        const CheckpointMeta meta{seed, "linearize", budget_of(raw)};
        if (ctx.finetune) {
            const TrainResult ft = finetune_kd(raw, base.net, train, seeded(ctx.config.finetune, seed), ctx.config.kd);
            save_checkpoint(ckpt(dir, v.tag + "-raw"), raw, meta);
            save_checkpoint(ckpt(dir, v.tag), ft.net, meta);
            io::atomic_write(history(dir, v.tag), history_csv(ft.history, train.group_names));
            out.push_back({"checkpoint", ckpt(dir, v.tag + "-raw"), seed});
            out.push_back({"history", history(dir, v.tag), seed});
        } else {
            save_checkpoint(ckpt(dir, v.tag), raw, meta);
        }
        out.push_back({"checkpoint", ckpt(dir, v.tag), seed});
    }
    return out;
}

inline std::vector<fs::path> cmd_linearize(const RunContext& ctx, const std::optional<fs::path>& checkpoint = {}) {
    const std::string started = utc_now();
    std::vector<Artifact> artifacts;
    if (checkpoint) {
        require_files({*checkpoint});
        const Checkpoint base = load_checkpoint(*checkpoint);
        artifacts = linearize_one(ctx, *checkpoint, seed_dir(ctx.out, base.meta.seed));
    } else {
        std::vector<fs::path> bases;
        for (std::uint64_t s : ctx.seeds) bases.push_back(ckpt(seed_dir(ctx.out, s), "base"));
        require_files(bases);
        artifacts = flatten(parallel_map<std::vector<Artifact>>(ctx.seeds.size(), ctx.jobs, [&](std::size_t i) {
            return linearize_one(ctx, bases[i], seed_dir(ctx.out, ctx.seeds[i]));
        }));
    }
    record_stage(ctx, "linearize", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts)
        if (a.kind == "checkpoint") out.push_back(a.path);
    return out;
}

// --- mitigate --------------------------------------------------------------------

inline std::vector<Artifact> mitigate_one(const RunContext& ctx, const fs::path& student_path) {
    const Checkpoint student = load_checkpoint(student_path);
    const std::uint64_t seed = student.meta.seed;
    const fs::path dir = seed_dir(ctx.out, seed);
    const fs::path teacher_path = ckpt(dir, "base");
    require_files({teacher_path});
    const Checkpoint teacher = load_checkpoint(teacher_path);
    const auto [train, eval] = materialize(ctx.config.dataset, seed);

    std::string tag = ckpt_tag(student_path);
    if (tag.ends_with("-raw")) tag.resize(tag.size() - 4);
    tag += "-fair";
    note(ctx, "mitigate: seed " + std::to_string(seed) + " " + tag);
    const FairResult res = finetune_fair(student.net, teacher.net, train, seeded(ctx.config.finetune, seed),
                                         ctx.config.kd, ctx.config.mitigation.mu);
    save_checkpoint(ckpt(dir, tag), res.net, {seed, "mitigate", budget_of(res.net)});
    const fs::path lambdas = dir / (tag + ".lambda.csv");
    io::atomic_write(lambdas, multipliers_csv(res.multipliers, train.group_names));
    io::atomic_write(history(dir, tag), history_csv(res.history, train.group_names));
    return {{"checkpoint", ckpt(dir, tag), seed}, {"lambda", lambdas, seed}, {"history", history(dir, tag), seed}};
}

inline std::vector<fs::path> cmd_mitigate(const RunContext& ctx, const std::optional<fs::path>& checkpoint = {}) {
    if (!ctx.config.mitigation.enabled) throw ConfigError("config: mitigation.enabled: must be true to run mitigate");
    const std::string started = utc_now();
    std::vector<fs::path> students;
    if (checkpoint) {
        students.push_back(*checkpoint);
    } else {
        for (std::uint64_t s : ctx.seeds)
            for (const Variant& v : variants(ctx.config))
                students.push_back(ckpt(seed_dir(ctx.out, s), ctx.finetune ? v.tag + "-raw" : v.tag));
    }
    require_files(students);
    auto artifacts = flatten(parallel_map<std::vector<Artifact>>(
        students.size(), ctx.jobs, [&](std::size_t i) { return mitigate_one(ctx, students[i]); }));
    record_stage(ctx, "mitigate", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts)
        if (a.kind == "checkpoint") out.push_back(a.path);
    return out;
}

// --- audit -----------------------------------------------------------------------

inline std::vector<Artifact> write_audit_plots(const AuditReport& r, const fs::path& dir, std::optional<std::uint64_t> seed) {
    std::vector<const CandidateReport*> all{&r.base};
    for (const auto& c : r.candidates) all.push_back(&c);

    std::vector<std::string> names;
    for (const auto* c : all) names.push_back(c->name);
    std::vector<std::vector<double>> acc(r.group_names.size()), grad(r.group_names.size());
    for (std::size_t a = 0; a < r.group_names.size(); ++a)
        for (const auto* c : all) {
            acc[a].push_back(100.0 * c->eval.groups[a].accuracy);
            grad[a].push_back(c->train.groups[a].grad_norm);
        }

    std::vector<Artifact> out;
    auto put = [&](const std::string& file, const std::string& text) {
        io::atomic_write(dir / file, text);
        out.push_back({"plot", dir / file, seed});
    };
    put("accuracy_by_budget.svg",
        svg::grouped_bars({"Group accuracy by model", "model", "accuracy (%)"}, names, r.group_names, acc));
    put("grad_norm.svg", svg::grouped_bars({"Group gradient norm by model", "model", "gradient norm"}, names,
                                           r.group_names, grad));

    // One line per group and fine-tuning kind; the base anchors every line at budget 1.
    std::vector<svg::Series> drops;
    for (const bool fair : {false, true}) {
        std::vector<const CandidateReport*> members;
        for (const auto& c : r.candidates)
            if (c.name.ends_with("-fair") == fair) members.push_back(&c);
        if (fair && members.empty()) continue;
        std::stable_sort(members.begin(), members.end(), [](const auto* x, const auto* y) {
            return x->relu_count > y->relu_count;
        });
        for (std::size_t a = 0; a < r.group_names.size(); ++a) {
            svg::Series s{r.group_names[a] + (fair ? " (fair)" : ""), {1.0}, {0.0}};
            for (const auto* c : members) {
                s.x.push_back(static_cast<double>(c->relu_count) / static_cast<double>(c->total_units));
                s.y.push_back(c->relative_drops[a]);
            }
            drops.push_back(std::move(s));
        }
    }
    put("relative_drop.svg", svg::plot({"Relative accuracy drop vs ReLU budget", "ReLU budget", "relative drop (%)"}, drops));

    std::vector<svg::Series> by_grad, by_dist;
    for (std::size_t a = 0; a < r.group_names.size(); ++a) {
        svg::Series g{r.group_names[a], {}, {}};
        svg::Series d{r.group_names[a], {}, {}};
        for (const auto* c : all) {
            g.x.push_back(c->train.groups[a].grad_norm);
            g.y.push_back(100.0 * c->eval.groups[a].accuracy);
            d.x.push_back(c->eval.groups[a].mean_boundary_distance);
            d.y.push_back(100.0 * c->eval.groups[a].accuracy);
        }
        by_grad.push_back(std::move(g));
        by_dist.push_back(std::move(d));
    }
    put("acc_vs_gradnorm.svg", svg::scatter({"Accuracy vs gradient norm", "gradient norm", "accuracy (%)"}, by_grad));
    put("acc_vs_distance.svg",
        svg::scatter({"Accuracy vs decision-boundary distance", "mean boundary distance", "accuracy (%)"}, by_dist));
    return out;
}

inline std::vector<Artifact> audit_one(const RunContext& ctx, const fs::path& base_path,
                                       const std::vector<fs::path>& candidate_paths, const fs::path& dir) {
    const Checkpoint base = load_checkpoint(base_path);
    const auto [train, eval] = materialize(ctx.config.dataset, base.meta.seed);
    std::vector<std::pair<std::string, GatedNetwork>> candidates;
    std::vector<std::string> ids;
    for (const fs::path& p : candidate_paths) {
        candidates.emplace_back(ckpt_tag(p), load_checkpoint(p).net);
        ids.push_back(sha256_file(p));
    }
    note(ctx, "audit: seed " + std::to_string(base.meta.seed) + ", " + std::to_string(candidates.size()) + " candidates");
    AuditReport report = build_report(base.net, candidates, eval, train);
    report.base.model_id = sha256_file(base_path);
    for (std::size_t i = 0; i < ids.size(); ++i) report.candidates[i].model_id = ids[i];

    std::vector<Artifact> out;
    io::atomic_write(dir / "report.json", to_json(report).dump(2) + "\n");
    io::atomic_write(dir / "report.csv", report_csv(report));
    out.push_back({"report", dir / "report.json", base.meta.seed});
    out.push_back({"report", dir / "report.csv", base.meta.seed});
    auto plots = write_audit_plots(report, dir, base.meta.seed);
    out.insert(out.end(), plots.begin(), plots.end());
    return out;
}

// Explicit paths: the first is the base, the rest are candidates. Without
// paths every seed's base is audited against its linearized and mitigated
// checkpoints that exist on disk.
inline std::vector<fs::path> cmd_audit(const RunContext& ctx, const std::vector<fs::path>& explicit_paths = {}) {
    const std::string started = utc_now();
    std::vector<Artifact> artifacts;
    if (!explicit_paths.empty()) {
        require_files(explicit_paths);
        const std::vector<fs::path> cands(explicit_paths.begin() + 1, explicit_paths.end());
        artifacts = audit_one(ctx, explicit_paths.front(), cands, ctx.out / "audit");
    } else {
        std::vector<fs::path> bases;
        std::vector<std::vector<fs::path>> cands;
        for (std::uint64_t s : ctx.seeds) {
            const fs::path dir = seed_dir(ctx.out, s);
            bases.push_back(ckpt(dir, "base"));
            std::vector<fs::path> list;
            for (const Variant& v : variants(ctx.config))
                for (const std::string& tag : {v.tag, v.tag + "-fair"})
                    if (fs::exists(ckpt(dir, tag))) list.push_back(ckpt(dir, tag));
            cands.push_back(list);
        }
        require_files(bases);
        artifacts = flatten(parallel_map<std::vector<Artifact>>(ctx.seeds.size(), ctx.jobs, [&](std::size_t i) {
            return audit_one(ctx, bases[i], cands[i], seed_dir(ctx.out, ctx.seeds[i]) / "audit");
        }));
    }
    record_stage(ctx, "audit", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts) out.push_back(a.path);
    return out;
}

// --- report ----------------------------------------------------------------------

// Seed-averaged view over every seed's audit report.
inline std::vector<fs::path> cmd_report(const RunContext& ctx) {
    const std::string started = utc_now();
    std::vector<nlohmann::json> reports;
    for (std::uint64_t s : ctx.seeds) {
        const fs::path p = seed_dir(ctx.out, s) / "audit" / "report.json";
        if (!fs::is_regular_file(p)) throw IoError("missing audit report '" + p.string() + "'; run audit first");
        try {
            reports.push_back(nlohmann::json::parse(io::read_text(p)));
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError("audit report '" + p.string() + "': " + e.what());
        }
        if (reports.back().value("schema", "") != "audit/1")
            throw IoError("audit report '" + p.string() + "' does not carry schema audit/1");
    }
    const auto group_names = reports.front().at("group_names").get<std::vector<std::string>>();

    struct Acc {
        double budget = 0.0;
        std::size_t count = 0;
        std::vector<double> accuracy, drop, grad, distance;
        double worst_drop = 0.0;
    };
    std::map<std::string, Acc> rows;
    std::vector<std::string> order;
    auto add = [&](const nlohmann::json& c) {
        const std::string name = c.at("name").get<std::string>();
        if (!rows.contains(name)) {
            order.push_back(name);
            rows[name] = Acc{c.at("budget").get<double>(), 0, std::vector<double>(group_names.size()),
                             std::vector<double>(group_names.size()), std::vector<double>(group_names.size()),
                             std::vector<double>(group_names.size()), 0.0};
        }
        Acc& acc = rows[name];
        ++acc.count;
        double worst = 0.0;
        for (std::size_t a = 0; a < group_names.size(); ++a) {
            acc.accuracy[a] += c.at("eval").at("groups")[a].at("accuracy").get<double>();
            const double d = c.at("relative_drops")[a].get<double>();
            acc.drop[a] += d;
            worst = std::max(worst, d);
            acc.grad[a] += c.at("train").at("groups")[a].at("grad_norm").get<double>();
            acc.distance[a] += c.at("eval").at("groups")[a].at("mean_boundary_distance").get<double>();
        }
        acc.worst_drop += worst;
    };
    for (const auto& r : reports) {
        if (r.at("group_names").get<std::vector<std::string>>() != group_names)
            throw IoError("audit reports disagree on group names");
        add(r.at("base"));
        for (const auto& c : r.at("candidates")) add(c);
    }

    std::ostringstream csv;
    csv << "model,budget,seeds,group,accuracy,relative_drop,grad_norm,mean_boundary_distance,worst_group_drop\n";
    nlohmann::json summary = {{"schema", "report/1"}, {"seeds", ctx.seeds}, {"group_names", group_names},
                              {"models", nlohmann::json::array()}};
    for (const std::string& name : order) {
        Acc& acc = rows[name];
        const double n = static_cast<double>(acc.count);
        nlohmann::json groups = nlohmann::json::array();
        for (std::size_t a = 0; a < group_names.size(); ++a) {
            acc.accuracy[a] /= n;
            acc.drop[a] /= n;
            acc.grad[a] /= n;
            acc.distance[a] /= n;
            csv << io::csv_escape(name) << ',' << io::format_double(acc.budget) << ',' << acc.count << ','
                << io::csv_escape(group_names[a]) << ',' << io::format_double(acc.accuracy[a]) << ','
                << io::format_double(acc.drop[a]) << ',' << io::format_double(acc.grad[a]) << ','
                << io::format_double(acc.distance[a]) << ',' << io::format_double(acc.worst_drop / n) << '\n';
            groups.push_back({{"name", group_names[a]},
                              {"accuracy", acc.accuracy[a]},
                              {"relative_drop", acc.drop[a]},
                              {"grad_norm", acc.grad[a]},
                              {"mean_boundary_distance", acc.distance[a]}});
        }
        summary["models"].push_back({{"name", name},
                                     {"budget", acc.budget},
                                     {"seeds", acc.count},
                                     {"worst_group_drop", acc.worst_drop / n},
                                     {"groups", groups}});
    }

    const fs::path dir = ctx.out / "report";
    std::vector<Artifact> artifacts;
    io::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
    io::atomic_write(dir / "summary.csv", csv.str());
    artifacts.push_back({"report", dir / "summary.json", {}});
    artifacts.push_back({"report", dir / "summary.csv", {}});

    std::vector<std::vector<double>> acc_rows(group_names.size());
    for (std::size_t a = 0; a < group_names.size(); ++a)
        for (const std::string& name : order) acc_rows[a].push_back(100.0 * rows[name].accuracy[a]);
    io::atomic_write(dir / "accuracy_by_budget.svg",
                     svg::grouped_bars({"Seed-mean group accuracy", "model", "accuracy (%)"}, order, group_names, acc_rows));
    artifacts.push_back({"plot", dir / "accuracy_by_budget.svg", {}});

    std::vector<svg::Series> worst;
    for (const bool fair : {false, true}) {
        svg::Series s{fair ? "worst group (fair)" : "worst group", {}, {}};
        std::vector<std::pair<double, double>> pts;
        for (const std::string& name : order) {
            const bool is_fair = name.ends_with("-fair");
            if (name == "base" || is_fair == fair)
                pts.emplace_back(rows[name].budget, rows[name].worst_drop / static_cast<double>(rows[name].count));
        }
        std::stable_sort(pts.begin(), pts.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
        if (pts.size() < 2) continue;
        for (const auto& [x, y] : pts) {
            s.x.push_back(x);
            s.y.push_back(y);
        }
        worst.push_back(std::move(s));
    }
    if (!worst.empty()) {
        io::atomic_write(dir / "worst_group_drop.svg",
                         svg::plot({"Seed-mean worst-group relative drop", "ReLU budget", "relative drop (%)"}, worst));
        artifacts.push_back({"plot", dir / "worst_group_drop.svg", {}});
    }
    record_stage(ctx, "report", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts) out.push_back(a.path);
    return out;
}

// --- theory ----------------------------------------------------------------------

struct TheoryOptions {
    std::vector<theory::FnKind> fns{theory::FnKind::square, theory::FnKind::exp, theory::FnKind::softplus};
    std::vector<int> ns{1, 2, 4, 8, 16};
    double lo = 0.0;
    double hi = 1.0;
    std::size_t random_nets = 200;
    std::uint64_t seed = 0;
};

// Both sides of the pair: two units whose kinks at -1/2 and 1/2 give three
// pieces on [-1, 1]; linearizing the second unit leaves two.
inline std::pair<theory::ScalarReluNet, theory::ScalarReluNet> region_pair() {
    theory::ScalarReluNet full;
    full.widths = {2};
    full.weights = {{1.0, -1.0}};
    full.biases = {{0.5, 0.5}};
    full.gates = {{1, 1}};
    full.out_weights = {1.0, 1.0};
    theory::ScalarReluNet reduced = full;
    reduced.gates = {{1, 0}};
    return {full, reduced};
}

// Least-squares slope of log(error) on log(n); needs two distinct ns.
inline std::optional<double> loglog_slope(const std::vector<int>& ns, const std::vector<double>& errors) {
    std::set<int> distinct(ns.begin(), ns.end());
    if (distinct.size() < 2) return std::nullopt;
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < ns.size(); ++i) {
        if (!(errors[i] > 0.0)) return std::nullopt;
        const double lx = std::log(static_cast<double>(ns[i]));
        const double ly = std::log(errors[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double m = static_cast<double>(ns.size());
    return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

inline std::vector<fs::path> cmd_theory(const RunContext& ctx, const TheoryOptions& opts) {
    if (opts.ns.empty()) throw ConfigError("theory: --ns must list at least one segment count");
    for (int n : opts.ns)
        if (n < 1) throw ConfigError("theory: --ns entries must be >= 1");
    const std::string started = utc_now();
    const fs::path dir = ctx.out / "theory";
    std::vector<Artifact> artifacts;

    std::ostringstream rates;
    rates << "fn,n,grid,error,uncertainty,strictly_convex\n";
    std::ostringstream slopes;
    slopes << "fn,slope\n";
    nlohmann::json summary = {{"schema", "theory/1"}};
    std::vector<svg::Series> series;
    for (theory::FnKind kind : opts.fns) {
        const theory::ConvexFn1D f(kind, opts.lo, opts.hi);
        note(ctx, "theory: rates for " + theory::to_string(kind));
        auto fits = parallel_map<theory::PwlFit>(opts.ns.size(), ctx.jobs, [&](std::size_t i) {
            return theory::best_pwl_error(f, opts.ns[i], 1000 * opts.ns[i]);
        });
        svg::Series s{theory::to_string(kind), {}, {}};
        std::vector<double> errors;
        for (std::size_t i = 0; i < opts.ns.size(); ++i) {
            rates << theory::to_string(kind) << ',' << opts.ns[i] << ',' << 1000 * opts.ns[i] << ','
                  << io::format_double(fits[i].error) << ',' << io::format_double(fits[i].uncertainty) << ','
                  << (fits[i].strictly_convex ? "true" : "false") << '\n';
            errors.push_back(fits[i].error);
            if (fits[i].error > 0.0) {
                s.x.push_back(opts.ns[i]);
                s.y.push_back(fits[i].error);
            }
        }
        const auto slope = loglog_slope(opts.ns, errors);
        slopes << theory::to_string(kind) << ',' << (slope ? io::format_double(*slope) : std::string("nan")) << '\n';
        summary["slopes"][theory::to_string(kind)] = slope ? nlohmann::json(*slope) : nlohmann::json();
        if (!s.x.empty()) series.push_back(std::move(s));
    }
    io::atomic_write(dir / "rates.csv", rates.str());
    io::atomic_write(dir / "slopes.csv", slopes.str());
    artifacts.push_back({"table", dir / "rates.csv", {}});
    artifacts.push_back({"table", dir / "slopes.csv", {}});
    if (!series.empty()) {
        svg::Axes axes{"Best piecewise-linear error vs segments", "segments n", "sup error", true, true};
        io::atomic_write(dir / "rates.svg", svg::plot(axes, series));
        artifacts.push_back({"plot", dir / "rates.svg", {}});
    }

    std::ostringstream regions;
    regions << "net,widths,rectified,regions,bound,within_bound\n";
    auto widths_text = [](const std::vector<std::size_t>& w) {
        std::string t;
        for (std::size_t i = 0; i < w.size(); ++i) t += (i ? "x" : "") + std::to_string(w[i]);
        return t;
    };
    auto rectified = [](const theory::ScalarReluNet& net) {
        std::size_t r = 0;
        for (const auto& layer : net.gates)
            for (int g : layer) r += static_cast<std::size_t>(g != 0);
        return r;
    };
    std::size_t violations = 0;
    auto row = [&](const std::string& id, const theory::ScalarReluNet& net, std::size_t count) {
        const std::uint64_t bound = theory::region_upper_bound(net.widths);
        violations += count > bound ? 1 : 0;
        regions << id << ',' << widths_text(net.widths) << ',' << rectified(net) << ',' << count << ',' << bound << ','
                << (count <= bound ? "true" : "false") << '\n';
    };
    const auto [full, reduced] = region_pair();
    const std::size_t full_count = theory::count_linear_regions(full, -1.0, 1.0);
    const std::size_t reduced_count = theory::count_linear_regions(reduced, -1.0, 1.0);
    row("pair-full", full, full_count);
    row("pair-reduced", reduced, reduced_count);

    Rng rng(opts.seed);
    svg::Series pts{"random nets", {}, {}};
    for (std::size_t k = 0; k < opts.random_nets; ++k) {
        const std::size_t depth = 1 + rng.next() % 3;
        std::vector<std::size_t> widths;
        for (std::size_t l = 0; l < depth; ++l) widths.push_back(1 + rng.next() % 8);
        const theory::ScalarReluNet net = theory::ScalarReluNet::random(widths, rng);
        const std::size_t count = theory::count_linear_regions(net, -3.0, 3.0);
        row("random-" + std::to_string(k), net, count);
        pts.x.push_back(static_cast<double>(theory::region_upper_bound(widths)));
        pts.y.push_back(static_cast<double>(count));
    }
    io::atomic_write(dir / "regions.csv", regions.str());
    artifacts.push_back({"table", dir / "regions.csv", {}});
    if (!pts.x.empty()) {
        io::atomic_write(dir / "regions.svg",
                         svg::scatter({"Linear regions vs upper bound", "upper bound", "regions counted", true, true}, {pts}));
        artifacts.push_back({"plot", dir / "regions.svg", {}});
    }
    summary["pair"] = {{"full", full_count}, {"reduced", reduced_count}};
    summary["random_nets"] = opts.random_nets;
    summary["violations"] = violations;
    io::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
    artifacts.push_back({"report", dir / "summary.json", {}});

    record_stage(ctx, "theory", artifacts, started);
    std::vector<fs::path> out;
    for (const Artifact& a : artifacts) out.push_back(a.path);
    return out;
}

} // namespace relufair::pipeline
