#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memtrace/errors.hpp"
#include "memtrace/paradigms/train.hpp"

namespace memtrace::cli {

// A required stage input (earlier-stage artifact) is absent or stale.
struct UpstreamError : RunError {
    using RunError::RunError;
};

struct DatasetSpec {
    std::string kind = "synthetic";  // "synthetic" | "cifar10"
    std::string path;                // cifar10 file/dir; MEMTRACE_DATA fallback
    int size = 500;                  // synthetic image count
    uint64_t seed = 1;               // synthetic generator seed
    int train_subset = 0;            // 0 = use every image
};

struct EvalSpec {
    int subset_size = 100;  // |X|
    int batch = 64;
    int augmentations = 10;  // M
};

struct IntrospectSpec {
    std::vector<int> layers = {0};
    std::vector<int> channels = {0};
    int steps = 200;
    double step_size = 0.05;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::string output_root;
    uint64_t master_seed = 0;
    DatasetSpec dataset;
    EvalSpec eval;
    std::vector<paradigms::ParadigmConfig> paradigms;
    IntrospectSpec introspect;

    void validate() const;  // ConfigError on violation
    uint64_t hash() const;  // content hash over the canonical JSON form
};

struct StageSet {
    bool train = false;
    bool indicate = false;
    bool profile = false;
    bool export_embeddings = false;
    bool introspect = false;

    static StageSet all();
};

// "train,indicate" -> StageSet; unknown names are configuration errors.
StageSet parse_stages(const std::string& csv);

// Strict parse: unknown keys anywhere are rejected.
ExperimentConfig load_experiment_config(const std::string& path);

// Executes the requested stages in pipeline order. Completed stages are
// skipped when their manifests carry the current config hash; a missing or
// stale upstream artifact raises UpstreamError.
void run_experiment(const ExperimentConfig& cfg, const StageSet& stages, int jobs = 1);

// Exit-code policy shared by every subcommand.
constexpr int kExitConfig = 2;    // schema violation / bad config
constexpr int kExitUpstream = 3;  // missing upstream artifacts
constexpr int kExitPartial = 4;   // partial run, resumable manifest left behind

}  // namespace memtrace::cli
