#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>

#include "memtrace/cli/experiment.hpp"

namespace mc = memtrace::cli;

namespace {

struct CommonOpts {
    std::string config_path;
    int jobs = 1;
    std::optional<uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "experiment config (JSON)")
        ->required();
    cmd->add_option("--jobs", o.jobs, "worker pool size for train/indicate");
    cmd->add_option("--seed-override", o.seed_override,
                    "replace the config's master_seed");
}

int execute(const CommonOpts& o, const mc::StageSet& stages) {
    try {
        mc::ExperimentConfig cfg = mc::load_experiment_config(o.config_path);
        if (o.seed_override) {
            // re-derive per-paradigm seeds from the override
            cfg.master_seed = *o.seed_override;
            for (auto& p : cfg.paradigms)
                p.master_seed = memtrace::stable_hash(
                    {cfg.master_seed,
                     memtrace::diffcore::fnv1a64(to_string(p.kind))});
        }
        mc::run_experiment(cfg, stages, o.jobs);
        return 0;
    } catch (const memtrace::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return mc::kExitConfig;
    } catch (const mc::UpstreamError& e) {
        std::cerr << "missing upstream artifacts: " << e.what() << "\n";
        return mc::kExitUpstream;
    } catch (const std::exception& e) {
        std::cerr << "run failed: " << e.what() << "\n";
        return mc::kExitPartial;
    }
}

int inspect_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        std::cerr << "cannot open manifest: " << path << "\n";
        return mc::kExitUpstream;
    }
    try {
        auto j = nlohmann::ordered_json::parse(is);
        std::cout << j.dump(2) << "\n";
        return 0;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "invalid manifest JSON: " << e.what() << "\n";
        return mc::kExitConfig;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-dynamics analysis pipeline"};
    app.require_subcommand(1);

    CommonOpts run_opts;
    std::string stages_csv = "train,indicate,profile,export,introspect";
    auto* run = app.add_subcommand("run", "execute pipeline stages in order");
    add_common(run, run_opts);
    run->add_option("--stages", stages_csv,
                    "comma list from {train,indicate,profile,export,introspect}");

    CommonOpts train_opts, indicate_opts, profile_opts, introspect_opts;
    auto* train = app.add_subcommand("train", "train the configured ensembles");
    add_common(train, train_opts);
    auto* indicate =
        app.add_subcommand("indicate", "evaluate recognition indicators");
    add_common(indicate, indicate_opts);
    auto* profile =
        app.add_subcommand("profile", "build profiles, baselines, and alignment");
    add_common(profile, profile_opts);
    auto* introspect = app.add_subcommand(
        "introspect", "export embeddings and activation-maximization images");
    add_common(introspect, introspect_opts);

    std::string manifest_path;
    auto* inspect = app.add_subcommand("inspect-manifest", "pretty-print a manifest");
    inspect->add_option("path", manifest_path, "manifest file")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        try {
            return execute(run_opts, mc::parse_stages(stages_csv));
        } catch (const memtrace::ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return mc::kExitConfig;
        }
    }
    if (train->parsed()) return execute(train_opts, {.train = true});
    if (indicate->parsed()) return execute(indicate_opts, {.indicate = true});
    if (profile->parsed()) return execute(profile_opts, {.profile = true});
    if (introspect->parsed())
        return execute(introspect_opts,
                       {.export_embeddings = true, .introspect = true});
    if (inspect->parsed()) return inspect_manifest(manifest_path);
    return 0;
}
