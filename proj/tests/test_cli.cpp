#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include "memtrace/cli/experiment.hpp"
#include "memtrace/data/dataset.hpp"

using namespace memtrace;
using namespace memtrace::cli;
namespace fs = std::filesystem;

namespace {

void write_file(const std::string& path, const std::string& body) {
    std::ofstream os(path, std::ios::trunc);
    REQUIRE(os);
    os << body;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

// every regular file under root, keyed by relative path
std::map<std::string, std::string> snapshot(const std::string& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file())
            out[fs::relative(e.path(), root).string()] = slurp(e.path().string());
    return out;
}

const char* kTinyConfig = R"({
  "schema_version": 1,
  "output_root": "%ROOT%",
  "master_seed": 11,
  "dataset": {"kind": "synthetic", "size": 30, "seed": 3},
  "eval": {"subset_size": 8, "batch": 4, "augmentations": 2},
  "paradigms": [
    {"kind": "supervised", "t_max": 2, "batch_size": 8, "ensemble_size": 2,
     "checkpoint_epochs": [1, 2]},
    {"kind": "random_labels_aug", "t_max": 1, "batch_size": 8, "ensemble_size": 1,
     "checkpoint_epochs": [1]}
  ],
  "introspect": {"layers": [0], "channels": [0], "steps": 3, "step_size": 0.05}
})";

ExperimentConfig tiny_config(const std::string& root) {
    std::string body = kTinyConfig;
    body.replace(body.find("%ROOT%"), 6, root);
    write_file("tiny_cfg.json", body);
    auto cfg = load_experiment_config("tiny_cfg.json");
    fs::remove("tiny_cfg.json");
    return cfg;
}

}  // namespace

TEST_CASE("stage parsing") {
    auto s = parse_stages("train,indicate");
    CHECK(s.train);
    CHECK(s.indicate);
    CHECK(!s.profile);
    CHECK(!s.export_embeddings);
    CHECK(!s.introspect);
    auto all = parse_stages("train,indicate,profile,export,introspect");
    CHECK(all.export_embeddings);
    CHECK(all.introspect);
    CHECK_THROWS_AS(parse_stages("train,paint"), ConfigError);
    CHECK_THROWS_AS(parse_stages(""), ConfigError);
}

TEST_CASE("config parsing accepts valid files and applies defaults") {
    auto cfg = tiny_config("cfg_out");
    CHECK(cfg.output_root == "cfg_out");
    CHECK(cfg.master_seed == 11);
    CHECK(cfg.dataset.kind == "synthetic");
    REQUIRE(cfg.paradigms.size() == 2);
    CHECK(cfg.paradigms[0].kind == paradigms::ParadigmKind::supervised);
    CHECK(cfg.paradigms[0].t_max == 2);
    CHECK(cfg.paradigms[0].eval_augmentations == 2);  // flows from eval block
    CHECK(cfg.paradigms[0].master_seed != cfg.paradigms[1].master_seed);
    CHECK(cfg.introspect.steps == 3);
    CHECK(cfg.hash() == tiny_config("cfg_out").hash());  // stable content hash
    CHECK(cfg.hash() != tiny_config("other_out").hash());
}

TEST_CASE("config schema violations are rejected") {
    SUBCASE("unknown top-level key") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o","surprise":1,
            "paradigms":[{"kind":"supervised"}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("unknown nested key") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o",
            "dataset":{"kind":"synthetic","flavour":"mint"},
            "paradigms":[{"kind":"supervised"}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("unknown paradigm key") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o",
            "paradigms":[{"kind":"supervised","epochz":3}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("missing paradigms") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o"})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("bad schema version") {
        write_file("bad.json", R"({"schema_version":9,"output_root":"o",
            "paradigms":[{"kind":"supervised"}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("duplicate paradigm") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o",
            "paradigms":[{"kind":"supervised"},{"kind":"supervised"}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("eval subset larger than dataset") {
        write_file("bad.json", R"({"schema_version":1,"output_root":"o",
            "dataset":{"kind":"synthetic","size":20},
            "eval":{"subset_size":100},
            "paradigms":[{"kind":"supervised"}]})");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("not JSON at all") {
        write_file("bad.json", "t_max: 50\n");
        CHECK_THROWS_AS(load_experiment_config("bad.json"), ConfigError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_experiment_config("no_such_config.json"), ConfigError);
    }
    fs::remove("bad.json");
}

TEST_CASE("stage composition equals a single full run") {
    const std::string root = "cli_out_staged";
    fs::remove_all(root);
    auto cfg = tiny_config(root);
    run_experiment(cfg, parse_stages("train,indicate"), 2);
    run_experiment(cfg, parse_stages("profile"), 1);
    run_experiment(cfg, parse_stages("export,introspect"), 1);
    auto staged = snapshot(root);

    fs::remove_all(root);
    run_experiment(cfg, StageSet::all(), 1);
    auto full = snapshot(root);
    CHECK(staged == full);
    CHECK(full.count("analysis/profile.csv") == 1);
    CHECK(full.count("analysis/alignment.csv") == 1);
    CHECK(full.count("supervised/indicators.memp") == 1);
    CHECK(full.count("supervised/embeddings.csv") == 1);
    CHECK(full.count("random_labels_aug/actmax_l0_c0.ppm") == 1);
    CHECK(full.count("random_labels.csv") == 1);

    SUBCASE("re-running completed stages changes no bytes") {
        run_experiment(cfg, StageSet::all(), 2);
        CHECK(snapshot(root) == full);
    }
    SUBCASE("a different master seed invalidates and retrains") {
        auto cfg2 = cfg;
        cfg2.master_seed = 12;
        for (auto& p : cfg2.paradigms)
            p.master_seed =
                stable_hash({cfg2.master_seed, diffcore::fnv1a64(to_string(p.kind))});
        run_experiment(cfg2, StageSet::all(), 1);
        auto changed = snapshot(root);
        CHECK(changed.at("supervised/model1_epoch2.ck") !=
              full.at("supervised/model1_epoch2.ck"));
    }
    fs::remove_all(root);
}

TEST_CASE("downstream stages demand upstream artifacts") {
    const std::string root = "cli_out_upstream";
    fs::remove_all(root);
    auto cfg = tiny_config(root);
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("indicate"), 1), UpstreamError);
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("profile"), 1), UpstreamError);
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("export"), 1), UpstreamError);
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("introspect"), 1), UpstreamError);
    run_experiment(cfg, parse_stages("train"), 2);
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("profile"), 1), UpstreamError);
    run_experiment(cfg, parse_stages("indicate"), 1);
    run_experiment(cfg, parse_stages("profile"), 1);  // now satisfied
    CHECK(fs::exists(root + "/analysis/deviation.csv"));
    fs::remove_all(root);
}

TEST_CASE("MEMTRACE_DATA resolves cifar-style dataset paths") {
    fs::create_directories("fake_data_root");
    auto ds = data::generate_synthetic(20, 5);
    ds.source = data::DatasetSource::cifar10;
    data::save_cifar10(ds, "fake_data_root/batch_1.bin");
    setenv("MEMTRACE_DATA", "fake_data_root", 1);

    const std::string root = "cli_out_env";
    fs::remove_all(root);
    write_file("env_cfg.json", R"({
      "schema_version": 1, "output_root": ")" + root + R"(", "master_seed": 4,
      "dataset": {"kind": "cifar10"},
      "eval": {"subset_size": 5, "batch": 4, "augmentations": 1},
      "paradigms": [{"kind": "supervised", "t_max": 1, "batch_size": 10,
                     "ensemble_size": 1, "checkpoint_epochs": [1]}],
      "introspect": {"layers": [0], "channels": [0], "steps": 2, "step_size": 0.05}
    })");
    auto cfg = load_experiment_config("env_cfg.json");
    run_experiment(cfg, parse_stages("train,indicate"), 1);
    CHECK(fs::exists(root + "/supervised/indicators.memp"));

    unsetenv("MEMTRACE_DATA");
    // without the env var a pathless cifar10 config cannot resolve data
    CHECK_THROWS_AS(run_experiment(cfg, parse_stages("train"), 1), ConfigError);
    fs::remove("env_cfg.json");
    fs::remove_all(root);
    fs::remove_all("fake_data_root");
}

TEST_CASE("cli binary exit codes") {
    std::string bin;
    for (const char* cand : {"./memtrace", "build/memtrace", "../build/memtrace"})
        if (fs::exists(cand)) {
            bin = cand;
            break;
        }
    if (bin.empty()) {
        MESSAGE("memtrace binary not found next to the test; skipping");
        return;
    }
    auto run_cmd = [&](const std::string& args) {
        const int rc = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(rc);
    };
    SUBCASE("invalid config key exits 2 and writes nothing") {
        write_file("cli_bad.json", R"({"schema_version":1,"output_root":"cli_noexist",
            "mystery":true,"paradigms":[{"kind":"supervised"}]})");
        CHECK(run_cmd("run --config cli_bad.json") == 2);
        CHECK(!fs::exists("cli_noexist"));
        fs::remove("cli_bad.json");
    }
    SUBCASE("missing upstream exits 3") {
        const std::string root = "cli_out_bin";
        fs::remove_all(root);
        std::string body = kTinyConfig;
        body.replace(body.find("%ROOT%"), 6, root);
        write_file("cli_ok.json", body);
        CHECK(run_cmd("profile --config cli_ok.json") == 3);
        SUBCASE("and a staged binary run completes") {
            CHECK(run_cmd("run --config cli_ok.json --stages train,indicate --jobs 2") == 0);
            CHECK(run_cmd("run --config cli_ok.json --stages profile") == 0);
            CHECK(fs::exists(root + "/analysis/profile.csv"));
            CHECK(run_cmd("inspect-manifest " + root + "/supervised/manifest.json") == 0);
        }
        fs::remove("cli_ok.json");
        fs::remove_all(root);
    }
    SUBCASE("unknown stage exits 2") {
        write_file("cli_min.json", R"({"schema_version":1,"output_root":"x",
            "paradigms":[{"kind":"supervised"}]})");
        CHECK(run_cmd("run --config cli_min.json --stages fly") == 2);
        fs::remove("cli_min.json");
    }
    SUBCASE("inspect-manifest on a missing file exits 3") {
        CHECK(run_cmd("inspect-manifest nowhere.json") == 3);
    }
}
