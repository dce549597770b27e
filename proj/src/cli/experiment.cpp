#include "memtrace/cli/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "memtrace/data/augment.hpp"
#include "memtrace/diffcore/checkpoint.hpp"
#include "memtrace/indicators/indicators.hpp"
#include "memtrace/introspect/introspect.hpp"
#include "memtrace/profiles/profiles.hpp"
#include "memtrace/rng.hpp"

namespace memtrace::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr uint64_t kTagTrainSubset = 0x5452414eULL;  // "TRAN"
constexpr uint64_t kTagEvalSubset = 0x4556414cULL;   // "EVAL"
constexpr uint64_t kTagRelabel = 0x524c424cULL;      // "RLBL"
constexpr uint64_t kTagFixedAug = 0x46495841ULL;     // "FIXA"

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key))
            throw ConfigError("unknown key \"" + key + "\" in " + where);
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for \"" + key + "\"");
    }
}

paradigms::ParadigmConfig parse_paradigm(const json& j, uint64_t master_seed,
                                         int eval_augmentations) {
    require_keys(j, "paradigms[]",
                 {"kind", "batch_size", "tau", "proj_dim", "lr", "weight_decay",
                  "momentum", "optimizer", "t_max", "checkpoint_epochs",
                  "ensemble_size"});
    if (!j.contains("kind")) throw ConfigError("paradigm entry missing \"kind\"");
    auto cfg = paradigms::default_config(
        paradigms::paradigm_from_string(j.at("kind").get<std::string>()));
    cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
    cfg.tau = get_or(j, "tau", cfg.tau);
    cfg.proj_dim = get_or(j, "proj_dim", cfg.proj_dim);
    cfg.lr = get_or(j, "lr", cfg.lr);
    cfg.weight_decay = get_or(j, "weight_decay", cfg.weight_decay);
    cfg.momentum = get_or(j, "momentum", cfg.momentum);
    if (j.contains("optimizer")) {
        const std::string o = j.at("optimizer").get<std::string>();
        if (o == "adam")
            cfg.optimizer = diffcore::OptimizerKind::adam;
        else if (o == "sgd_momentum")
            cfg.optimizer = diffcore::OptimizerKind::sgd_momentum;
        else
            throw ConfigError("unknown optimizer: " + o);
    }
    if (j.contains("t_max")) {
        cfg.t_max = j.at("t_max").get<int>();
        cfg.checkpoint_epochs = paradigms::default_checkpoint_schedule(cfg.t_max);
    }
    if (j.contains("checkpoint_epochs"))
        cfg.checkpoint_epochs = j.at("checkpoint_epochs").get<std::vector<int>>();
    cfg.ensemble_size = get_or(j, "ensemble_size", cfg.ensemble_size);
    cfg.eval_augmentations = eval_augmentations;
    // distinct seed streams per paradigm, derived from the experiment seed
    cfg.master_seed =
        stable_hash({master_seed, diffcore::fnv1a64(to_string(cfg.kind))});
    return cfg;
}

json experiment_to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["output_root"] = c.output_root;
    j["master_seed"] = c.master_seed;
    j["dataset"] = {{"kind", c.dataset.kind},
                    {"path", c.dataset.path},
                    {"size", c.dataset.size},
                    {"seed", c.dataset.seed},
                    {"train_subset", c.dataset.train_subset}};
    j["eval"] = {{"subset_size", c.eval.subset_size},
                 {"batch", c.eval.batch},
                 {"augmentations", c.eval.augmentations}};
    j["paradigms"] = json::array();
    for (const auto& p : c.paradigms)
        j["paradigms"].push_back(paradigms::config_hash(p));
    j["introspect"] = {{"layers", c.introspect.layers},
                       {"channels", c.introspect.channels},
                       {"steps", c.introspect.steps},
                       {"step_size", c.introspect.step_size}};
    return j;
}

bool is_random_labels(paradigms::ParadigmKind k) {
    return k == paradigms::ParadigmKind::random_labels_aug ||
           k == paradigms::ParadigmKind::random_labels_noaug;
}

std::string paradigm_dir(const ExperimentConfig& cfg,
                         const paradigms::ParadigmConfig& p) {
    return cfg.output_root + "/" + to_string(p.kind);
}

// Reads a stage manifest and reports whether it carries `hash` complete.
bool manifest_current(const std::string& path, uint64_t hash) {
    std::ifstream is(path);
    if (!is) return false;
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception&) {
        return false;
    }
    return j.value("complete", false) && j.value("config_hash", uint64_t{0}) == hash;
}

void write_stage_manifest(const std::string& path, const std::string& stage,
                          uint64_t hash, bool complete) {
    json j;
    j["schema_version"] = 1;
    j["stage"] = stage;
    j["config_hash"] = hash;
    j["complete"] = complete;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw RunError("cannot write manifest: " + path);
    os << j.dump(2) << "\n";
}

data::ImageDataset load_dataset(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    data::ImageDataset ds;
    if (d.kind == "synthetic") {
        ds = data::generate_synthetic(static_cast<size_t>(d.size), d.seed);
    } else {
        std::string path = d.path;
        const char* root = std::getenv("MEMTRACE_DATA");
        if (path.empty()) {
            if (!root)
                throw ConfigError(
                    "cifar10 dataset needs \"path\" or the MEMTRACE_DATA variable");
            path = root;
        } else if (fs::path(path).is_relative() && !fs::exists(path) && root) {
            path = std::string(root) + "/" + path;
        }
        ds = data::load_cifar10(path);
    }
    if (d.train_subset > 0 && static_cast<size_t>(d.train_subset) < ds.size()) {
        auto keep = data::sample_indices(ds.size(), d.train_subset,
                                         stable_hash({cfg.master_seed, kTagTrainSubset}));
        data::ImageDataset sub;
        sub.source = ds.source;
        sub.pixels.resize(static_cast<size_t>(d.train_subset) * data::kImageBytes);
        sub.labels.resize(d.train_subset);
        for (int i = 0; i < d.train_subset; ++i) {
            std::copy(ds.image(keep[i]), ds.image(keep[i]) + data::kImageBytes,
                      sub.pixels.begin() + static_cast<size_t>(i) * data::kImageBytes);
            sub.labels[i] = ds.labels[keep[i]];
        }
        ds = std::move(sub);
    }
    return ds;
}

struct PipelineContext {
    data::ImageDataset ds;
    data::LabelMap label_map;  // shared across random-label paradigms
    bool has_label_map = false;
    std::vector<int> eval_subset;
    uint64_t hash = 0;
};

std::string indicators_path(const std::string& dir) { return dir + "/indicators.memp"; }
std::string stage_manifest_path(const std::string& dir, const std::string& stage) {
    return dir + "/" + stage + "_manifest.json";
}

void stage_train(const ExperimentConfig& cfg, PipelineContext& ctx, int jobs) {
    if (ctx.has_label_map)
        data::save_label_map(ctx.label_map, cfg.output_root + "/random_labels.csv");
    for (const auto& p : cfg.paradigms) {
        const std::string dir = paradigm_dir(cfg, p);
        paradigms::RunDirectory run{dir};
        if (manifest_current(run.manifest_path(), paradigms::config_hash(p))) continue;
        const data::LabelMap* lm = is_random_labels(p.kind) ? &ctx.label_map : nullptr;
        paradigms::train_ensemble(p, ctx.ds, lm, dir, jobs);
    }
}

void stage_indicate(const ExperimentConfig& cfg, PipelineContext& ctx, int jobs) {
    for (const auto& p : cfg.paradigms) {
        const std::string dir = paradigm_dir(cfg, p);
        paradigms::RunDirectory run{dir};
        if (!manifest_current(run.manifest_path(), paradigms::config_hash(p)))
            throw UpstreamError("train artifacts missing or stale for " +
                                to_string(p.kind) + "; run the train stage first");
        const std::string man = stage_manifest_path(dir, "indicate");
        if (manifest_current(man, ctx.hash) && fs::exists(indicators_path(dir)))
            continue;
        auto fixed = data::draw_fixed_augmentations(
            ctx.ds.size(), cfg.eval.augmentations,
            stable_hash({cfg.master_seed, kTagFixedAug}),
            p.kind == paradigms::ParadigmKind::simclr);
        const data::LabelMap* lm = is_random_labels(p.kind) ? &ctx.label_map : nullptr;
        auto ind = indicators::evaluate_indicators(p, run, ctx.ds, lm, ctx.eval_subset,
                                                   fixed, cfg.eval.batch, jobs);
        ind.save(indicators_path(dir));
        write_stage_manifest(man, "indicate", ctx.hash, true);
    }
}

// p~ over image-augmentation pairs: the M fixed-slot curves concatenated.
indicators::ProbabilityCurve pooled_fixed_curve(const indicators::IndicatorTensor& ind,
                                                int epoch) {
    indicators::ProbabilityCurve c;
    c.epoch = epoch;
    c.kind = indicators::CurveKind::fixed;
    c.n_models = ind.n_models();
    c.n_augmentations = 1;
    for (int j = 0; j < ind.n_slots(); ++j) {
        auto slot = indicators::estimate_p_fixed(ind, epoch, j);
        c.values.insert(c.values.end(), slot.values.begin(), slot.values.end());
    }
    return c;
}

void stage_profile(const ExperimentConfig& cfg, PipelineContext& ctx) {
    const std::string adir = cfg.output_root + "/analysis";
    const std::string man = stage_manifest_path(adir, "profile");
    if (manifest_current(man, ctx.hash)) return;
    fs::create_directories(adir);
    profiles::CsvExporter ex;
    for (const auto& p : cfg.paradigms) {
        const std::string dir = paradigm_dir(cfg, p);
        if (!manifest_current(stage_manifest_path(dir, "indicate"), ctx.hash) ||
            !fs::exists(indicators_path(dir)))
            throw UpstreamError("indicators missing or stale for " + to_string(p.kind) +
                                "; run the indicate stage first");
        auto ind = indicators::IndicatorTensor::load(indicators_path(dir));
        const std::string name = to_string(p.kind);
        std::vector<profiles::MemorizationProfile> avg_profiles, fixed_profiles;
        for (int epoch : ind.epochs()) {
            auto avg = profiles::build_profile(indicators::estimate_p_avg(ind, epoch));
            avg.paradigm = name;
            auto fixed = profiles::build_profile(pooled_fixed_curve(ind, epoch));
            fixed.paradigm = name;
            for (const auto* prof : {&avg, &fixed}) {
                ex.add_profile(*prof);
                auto base = profiles::binomial_baseline(
                    ind.n_models(), prof->area, prof->values.size(),
                    profiles::BaselineMode::quantile);
                ex.add_baseline(name, prof->kind, epoch, base);
                ex.add_deviation(profiles::profile_deviation(*prof, base));
            }
            avg_profiles.push_back(std::move(avg));
            fixed_profiles.push_back(std::move(fixed));
        }
        auto aligned = profiles::align_epochs(avg_profiles);
        ex.add_alignment(name, indicators::CurveKind::averaged, aligned);
        ex.add_alignment(name, indicators::CurveKind::fixed,
                         profiles::align_epochs(fixed_profiles));
        // per-pair scatter at the area-0.5 epoch of the averaged curves
        const int mid_epoch = aligned.entries[1].epoch;
        for (int j = 0; j < ind.n_slots(); ++j) {
            auto slot = indicators::estimate_p_fixed(ind, mid_epoch, j);
            for (int i = 0; i < ind.n_examples(); ++i)
                ex.add_scatter(name, mid_epoch, ctx.eval_subset[i], j, slot.values[i]);
        }
    }
    ex.write(adir);
    write_stage_manifest(man, "profile", ctx.hash, true);
}

void stage_export(const ExperimentConfig& cfg, PipelineContext& ctx) {
    for (const auto& p : cfg.paradigms) {
        const std::string dir = paradigm_dir(cfg, p);
        paradigms::RunDirectory run{dir};
        if (!manifest_current(run.manifest_path(), paradigms::config_hash(p)))
            throw UpstreamError("train artifacts missing or stale for " +
                                to_string(p.kind) + "; run the train stage first");
        const std::string man = stage_manifest_path(dir, "export");
        const std::string out = dir + "/embeddings.csv";
        if (manifest_current(man, ctx.hash) && fs::exists(out)) continue;
        diffcore::Network net(paradigms::network_for(p));
        auto state =
            diffcore::load_checkpoint(run.checkpoint_path(1, p.checkpoint_epochs.back()));
        introspect::export_embeddings(net, state, ctx.ds, out, cfg.eval.batch);
        write_stage_manifest(man, "export", ctx.hash, true);
    }
}

void stage_introspect(const ExperimentConfig& cfg, PipelineContext& ctx) {
    for (const auto& p : cfg.paradigms) {
        const std::string dir = paradigm_dir(cfg, p);
        paradigms::RunDirectory run{dir};
        if (!manifest_current(run.manifest_path(), paradigms::config_hash(p)))
            throw UpstreamError("train artifacts missing or stale for " +
                                to_string(p.kind) + "; run the train stage first");
        const std::string man = stage_manifest_path(dir, "introspect");
        if (manifest_current(man, ctx.hash)) continue;
        diffcore::Network net(paradigms::network_for(p));
        auto state =
            diffcore::load_checkpoint(run.checkpoint_path(1, p.checkpoint_epochs.back()));
        std::ofstream os(dir + "/actmax.csv", std::ios::trunc);
        if (!os) throw RunError("cannot write actmax.csv");
        os << "layer,channel,initial_activation,final_activation,zero_variance\n";
        char buf[40];
        for (int layer : cfg.introspect.layers)
            for (int channel : cfg.introspect.channels) {
                introspect::ActMaxConfig ac;
                ac.layer = layer;
                ac.channel = channel;
                ac.steps = cfg.introspect.steps;
                ac.step_size = cfg.introspect.step_size;
                // keyed by seed + paradigm, not the config hash, so reruns
                // in a different output root stay bit-identical
                ac.seed = stable_hash({cfg.master_seed,
                                       diffcore::fnv1a64(to_string(p.kind)),
                                       static_cast<uint64_t>(layer),
                                       static_cast<uint64_t>(channel)});
                auto res = introspect::activation_maximization(net, state, ac);
                introspect::save_ppm(res.image, dir + "/actmax_l" +
                                                    std::to_string(layer) + "_c" +
                                                    std::to_string(channel) + ".ppm");
                os << layer << "," << channel;
                std::snprintf(buf, sizeof(buf), "%.9g", res.initial_activation);
                os << "," << buf;
                std::snprintf(buf, sizeof(buf), "%.9g", res.final_activation);
                os << "," << buf << "," << (res.zero_variance ? 1 : 0) << "\n";
            }
        write_stage_manifest(man, "introspect", ctx.hash, true);
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    if (schema_version != 1)
        throw ConfigError("unsupported schema_version " +
                          std::to_string(schema_version));
    if (output_root.empty()) throw ConfigError("output_root must be set");
    if (dataset.kind != "synthetic" && dataset.kind != "cifar10")
        throw ConfigError("dataset kind must be \"synthetic\" or \"cifar10\"");
    if (dataset.kind == "synthetic" && dataset.size < 10)
        throw ConfigError("synthetic dataset size must be >= 10");
    if (dataset.train_subset < 0) throw ConfigError("train_subset must be >= 0");
    if (eval.subset_size < 1 || eval.batch < 1 || eval.augmentations < 1)
        throw ConfigError("eval subset, batch, and augmentations must be >= 1");
    if (paradigms.empty()) throw ConfigError("at least one paradigm is required");
    for (const auto& p : paradigms) p.validate();
    std::set<paradigms::ParadigmKind> kinds;
    for (const auto& p : paradigms)
        if (!kinds.insert(p.kind).second)
            throw ConfigError("duplicate paradigm: " + to_string(p.kind));
    if (introspect.steps < 1 || introspect.step_size < 0)
        throw ConfigError("introspect needs steps >= 1, step_size >= 0");
    const int n_train = dataset.train_subset > 0
                            ? std::min(dataset.train_subset, dataset.size)
                            : dataset.size;
    if (dataset.kind == "synthetic" && eval.subset_size > n_train)
        throw ConfigError("eval subset larger than the training set");
}

uint64_t ExperimentConfig::hash() const {
    return diffcore::fnv1a64(experiment_to_json(*this).dump());
}

StageSet StageSet::all() { return {true, true, true, true, true}; }

StageSet parse_stages(const std::string& csv) {
    StageSet s;
    std::stringstream ss(csv);
    std::string name;
    bool any = false;
    while (std::getline(ss, name, ',')) {
        if (name.empty()) continue;
        any = true;
        if (name == "train")
            s.train = true;
        else if (name == "indicate")
            s.indicate = true;
        else if (name == "profile")
            s.profile = true;
        else if (name == "export")
            s.export_embeddings = true;
        else if (name == "introspect")
            s.introspect = true;
        else
            throw ConfigError("unknown stage: " + name);
    }
    if (!any) throw ConfigError("empty stage list");
    return s;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    require_keys(j, "config",
                 {"schema_version", "output_root", "master_seed", "dataset", "eval",
                  "paradigms", "introspect"});
    ExperimentConfig cfg;
    cfg.schema_version = get_or(j, "schema_version", -1);
    cfg.output_root = get_or<std::string>(j, "output_root", "");
    cfg.master_seed = get_or<uint64_t>(j, "master_seed", 0);
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        require_keys(d, "dataset", {"kind", "path", "size", "seed", "train_subset"});
        cfg.dataset.kind = get_or<std::string>(d, "kind", cfg.dataset.kind);
        cfg.dataset.path = get_or<std::string>(d, "path", cfg.dataset.path);
        cfg.dataset.size = get_or(d, "size", cfg.dataset.size);
        cfg.dataset.seed = get_or<uint64_t>(d, "seed", cfg.dataset.seed);
        cfg.dataset.train_subset = get_or(d, "train_subset", cfg.dataset.train_subset);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        require_keys(e, "eval", {"subset_size", "batch", "augmentations"});
        cfg.eval.subset_size = get_or(e, "subset_size", cfg.eval.subset_size);
        cfg.eval.batch = get_or(e, "batch", cfg.eval.batch);
        cfg.eval.augmentations = get_or(e, "augmentations", cfg.eval.augmentations);
    }
    if (!j.contains("paradigms") || !j.at("paradigms").is_array())
        throw ConfigError("config needs a \"paradigms\" array");
    for (const json& p : j.at("paradigms"))
        cfg.paradigms.push_back(
            parse_paradigm(p, cfg.master_seed, cfg.eval.augmentations));
    if (j.contains("introspect")) {
        const json& t = j.at("introspect");
        require_keys(t, "introspect", {"layers", "channels", "steps", "step_size"});
        cfg.introspect.layers = get_or(t, "layers", cfg.introspect.layers);
        cfg.introspect.channels = get_or(t, "channels", cfg.introspect.channels);
        cfg.introspect.steps = get_or(t, "steps", cfg.introspect.steps);
        cfg.introspect.step_size = get_or(t, "step_size", cfg.introspect.step_size);
    }
    cfg.validate();
    return cfg;
}

void run_experiment(const ExperimentConfig& cfg, const StageSet& stages, int jobs) {
    cfg.validate();
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    fs::create_directories(cfg.output_root);

    PipelineContext ctx;
    ctx.hash = cfg.hash();
    ctx.ds = load_dataset(cfg);
    for (const auto& p : cfg.paradigms)
        if (is_random_labels(p.kind)) ctx.has_label_map = true;
    if (ctx.has_label_map)
        ctx.label_map = data::assign_random_labels(
            ctx.ds.size(), stable_hash({cfg.master_seed, kTagRelabel}));
    if (static_cast<size_t>(cfg.eval.subset_size) > ctx.ds.size())
        throw ConfigError("eval subset larger than the loaded dataset");
    ctx.eval_subset = data::sample_indices(ctx.ds.size(), cfg.eval.subset_size,
                                           stable_hash({cfg.master_seed, kTagEvalSubset}));

    if (stages.train) stage_train(cfg, ctx, jobs);
    if (stages.indicate) stage_indicate(cfg, ctx, jobs);
    if (stages.profile) stage_profile(cfg, ctx);
    if (stages.export_embeddings) stage_export(cfg, ctx);
    if (stages.introspect) stage_introspect(cfg, ctx);
}

}  // namespace memtrace::cli
