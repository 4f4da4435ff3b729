#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relufair/config.hpp"
#include "relufair/error.hpp"
#include "relufair/pipeline.hpp"

namespace fs = std::filesystem;
using namespace relufair;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError("--seeds: expected a comma-separated list of non-negative integers, got '" + text + "'");
        seeds.push_back(std::stoull(item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return seeds;
}

std::vector<int> parse_ns(const std::string& text) {
    std::vector<int> ns;
    for (std::uint64_t v : parse_seeds(text)) {
        if (v < 1 || v > 4096) throw ConfigError("--ns: segment counts must lie in [1, 4096]");
        ns.push_back(static_cast<int>(v));
    }
    return ns;
}

struct Globals {
    std::string config;
    std::string out;
    std::string seeds;
    unsigned jobs = 1;
    bool no_finetune = false;
    bool quiet = false;
};

// Without --config, a command that does not need one adopts the configuration
// recorded in the output directory's manifest, so its stage joins that run.
pipeline::RunContext context(const Globals& g, bool config_required) {
    std::optional<fs::path> out;
    if (!g.out.empty()) out = fs::path(g.out);
    if (const char* env = std::getenv("RELUFAIR_OUT"); env != nullptr && *env != '\0') out = fs::path(env);
    ExperimentConfig cfg = default_config();
    if (!g.config.empty()) {
        cfg = load_config(g.config);
    } else if (config_required) {
        throw ConfigError("config: --config is required for this command");
    } else if (const fs::path manifest = out.value_or(fs::path(cfg.output)) / "manifest.json"; fs::exists(manifest)) {
        try {
            cfg = parse_config(nlohmann::json::parse(io::read_text(manifest)).at("config").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest '" + manifest.string() + "': " + e.what());
        }
        if (!out) out = fs::path(cfg.output);
    }
    std::optional<std::vector<std::uint64_t>> seeds;
    if (!g.seeds.empty()) seeds = parse_seeds(g.seeds);
    auto ctx = pipeline::make_context(std::move(cfg), out, seeds, g.jobs, !g.no_finetune);
    if (!g.quiet) ctx.log = &std::cerr;
    return ctx;
}

void print(const std::vector<fs::path>& paths) {
    for (const fs::path& p : paths) std::cout << p.string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Group-fairness audit of ReLU linearization"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Experiment configuration (YAML)");
    app.add_option("--out", g.out, "Output directory (RELUFAIR_OUT overrides)");
    app.add_option("--seeds", g.seeds, "Comma-separated seeds overriding the config");
    app.add_option("--jobs", g.jobs, "Parallel seed jobs")->check(CLI::Range(1u, 256u));
    app.add_flag("--no-finetune", g.no_finetune, "Skip KD fine-tuning after linearization");
    app.add_flag("--quiet", g.quiet, "Suppress progress messages");

    auto* train = app.add_subcommand("train", "Train the all-ReLU base model per seed");
    auto* linearize = app.add_subcommand("linearize", "Linearize base checkpoints at every configured budget");
    std::string lin_ckpt;
    linearize->add_option("checkpoint", lin_ckpt, "Base checkpoint (default: every seed's base)");
    auto* mitigate = app.add_subcommand("mitigate", "Fairness-constrained fine-tuning of linearized checkpoints");
    std::string mit_ckpt;
    mitigate->add_option("checkpoint", mit_ckpt, "Linearized checkpoint (default: every seed and budget)");
    auto* audit = app.add_subcommand("audit", "Per-group audit report and plots");
    std::vector<std::string> audit_paths;
    audit->add_option("checkpoints", audit_paths, "Base checkpoint followed by candidates");
    auto* theory_cmd = app.add_subcommand("theory", "Approximation-rate and region-count tables");
    std::vector<std::string> fns;
    std::string ns;
    std::size_t nets = 200;
    std::uint64_t theory_seed = 0;
    theory_cmd->add_option("--fn", fns, "Convex function(s): square, exp, softplus");
    theory_cmd->add_option("--ns", ns, "Comma-separated segment counts");
    theory_cmd->add_option("--nets", nets, "Random networks for the region check");
    theory_cmd->add_option("--seed", theory_seed, "Seed for the random networks");
    auto* report = app.add_subcommand("report", "Seed-averaged summary of the audit reports");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_code::ok : exit_code::config;
    }

    try {
        if (*train) print(pipeline::cmd_train(context(g, true)));
        if (*linearize)
            print(pipeline::cmd_linearize(context(g, true),
                                          lin_ckpt.empty() ? std::nullopt : std::optional<fs::path>(lin_ckpt)));
        if (*mitigate)
            print(pipeline::cmd_mitigate(context(g, true),
                                         mit_ckpt.empty() ? std::nullopt : std::optional<fs::path>(mit_ckpt)));
        if (*audit) print(pipeline::cmd_audit(context(g, true), {audit_paths.begin(), audit_paths.end()}));
        if (*theory_cmd) {
            pipeline::TheoryOptions opts;
            if (!fns.empty()) {
                opts.fns.clear();
                for (const std::string& f : fns) {
                    try {
                        opts.fns.push_back(theory::parse_fn(f));
                    } catch (const PreconditionError& e) {
                        throw ConfigError(std::string("--fn: ") + e.what());
                    }
                }
            }
            if (!ns.empty()) opts.ns = parse_ns(ns);
            opts.random_nets = nets;
            opts.seed = theory_seed;
            print(pipeline::cmd_theory(context(g, false), opts));
        }
        if (*report) print(pipeline::cmd_report(context(g, true)));
        return exit_code::ok;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code::config;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return exit_code::numeric;
    } catch (const IoError& e) {
        std::cerr << "i/o failure: " << e.what() << "\n";
        return exit_code::io;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o failure: " << e.what() << "\n";
        return exit_code::io;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code::generic;
    }
}
