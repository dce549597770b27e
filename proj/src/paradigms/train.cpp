#include "memtrace/paradigms/train.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <thread>

#include "memtrace/diffcore/checkpoint.hpp"
#include "memtrace/errors.hpp"
#include "memtrace/paradigms/loss.hpp"
#include "memtrace/rng.hpp"

namespace memtrace::paradigms {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(ParadigmKind k) {
    switch (k) {
        case ParadigmKind::supervised: return "supervised";
        case ParadigmKind::random_labels_aug: return "random_labels_aug";
        case ParadigmKind::random_labels_noaug: return "random_labels_noaug";
        case ParadigmKind::simclr: return "simclr";
    }
    throw UsageError("unreachable");
}

ParadigmKind paradigm_from_string(const std::string& s) {
    if (s == "supervised") return ParadigmKind::supervised;
    if (s == "random_labels_aug") return ParadigmKind::random_labels_aug;
    if (s == "random_labels_noaug") return ParadigmKind::random_labels_noaug;
    if (s == "simclr") return ParadigmKind::simclr;
    throw ConfigError("unknown paradigm kind: " + s);
}

void ParadigmConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (kind == ParadigmKind::simclr && batch_size < 2)
        throw ConfigError("simclr needs batch size >= 2 (no negatives otherwise)");
    if (tau <= 0) throw ConfigError("tau must be positive");
    if (t_max < 1) throw ConfigError("t_max must be >= 1");
    if (ensemble_size < 1 || eval_augmentations < 1)
        throw ConfigError("ensemble size N and augmentation count M must be >= 1");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    for (int e : checkpoint_epochs)
        if (e < 1 || e > t_max)
            throw ConfigError("checkpoint epoch " + std::to_string(e) +
                              " outside [1, t_max]");
}

std::vector<int> default_checkpoint_schedule(int t_max) {
    std::vector<int> eps;
    for (int e = 1; e <= t_max; e *= 2) eps.push_back(e);
    for (int i = 1; i <= 10; ++i) {
        int e = static_cast<int>(std::lround(static_cast<double>(i) * t_max / 10.0));
        if (e >= 1 && e <= t_max) eps.push_back(e);
    }
    std::sort(eps.begin(), eps.end());
    eps.erase(std::unique(eps.begin(), eps.end()), eps.end());
    return eps;
}

ParadigmConfig default_config(ParadigmKind kind) {
    ParadigmConfig c;
    c.kind = kind;
    switch (kind) {
        case ParadigmKind::supervised:
            c.t_max = 50;
            break;
        case ParadigmKind::random_labels_aug:
        case ParadigmKind::random_labels_noaug:
            c.t_max = 150;
            break;
        case ParadigmKind::simclr:
            c.t_max = 200;
            c.tau = 0.07;
            c.optimizer = diffcore::OptimizerKind::adam;
            break;
    }
    c.checkpoint_epochs = default_checkpoint_schedule(c.t_max);
    return c;
}

diffcore::NetworkSpec network_for(const ParadigmConfig& cfg) {
    if (cfg.kind == ParadigmKind::simclr)
        return diffcore::small_convnet(diffcore::ProjectionHead{128, cfg.proj_dim});
    return diffcore::small_convnet(diffcore::ClassifierHead{data::kNumClasses});
}

data::AugmentationPolicy training_policy(ParadigmKind kind) {
    switch (kind) {
        case ParadigmKind::supervised:
        case ParadigmKind::random_labels_aug:
            return data::AugmentationPolicy::weak_policy();
        case ParadigmKind::random_labels_noaug:
            return data::AugmentationPolicy::none_policy(true);
        case ParadigmKind::simclr:
            return data::AugmentationPolicy::strong_policy();
    }
    throw UsageError("unreachable");
}

namespace {

constexpr uint64_t kTagModel = 0x4d4f44454cULL;    // "MODEL"
constexpr uint64_t kTagShuffle = 0x53485546ULL;    // "SHUF"
constexpr uint64_t kTagAug = 0x415547ULL;          // "AUG"
constexpr uint64_t kTagBatch = 0x4241544348ULL;    // "BATCH"

void copy_image(Tensor& batch, int row, const TensorT<float>& img) {
    std::memcpy(batch.ptr() + static_cast<size_t>(row) * data::kImageBytes, img.ptr(),
                sizeof(float) * data::kImageBytes);
}

json config_to_json(const ParadigmConfig& c) {
    json j;
    j["paradigm"] = to_string(c.kind);
    j["batch_size"] = c.batch_size;
    j["tau"] = c.tau;
    j["proj_dim"] = c.proj_dim;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["momentum"] = c.momentum;
    j["optimizer"] =
        c.optimizer == diffcore::OptimizerKind::adam ? "adam" : "sgd_momentum";
    j["t_max"] = c.t_max;
    j["checkpoint_epochs"] = c.checkpoint_epochs;
    j["ensemble_size"] = c.ensemble_size;
    j["eval_augmentations"] = c.eval_augmentations;
    j["master_seed"] = c.master_seed;
    return j;
}

struct ModelResult {
    std::vector<double> epoch_loss;  // index epoch-1
    std::string error;               // nonempty on failure
};

ModelResult train_one_model(const ParadigmConfig& cfg, const data::ImageDataset& ds,
                            const data::LabelMap* label_map, const RunDirectory& run,
                            int model_index) {
    ModelResult result;
    try {
        const uint64_t mseed = model_seed(cfg.master_seed, model_index);
        diffcore::Network net(network_for(cfg));
        diffcore::ModelState state = net.init(mseed);
        diffcore::OptimizerState opt;
        opt.kind = cfg.optimizer;
        opt.momentum = cfg.momentum;
        opt.weight_decay = cfg.weight_decay;
        const data::AugmentationPolicy policy = training_policy(cfg.kind);
        const diffcore::ScheduleConfig sched{cfg.lr, cfg.t_max};
        const size_t n = ds.size();
        const bool contrastive = cfg.kind == ParadigmKind::simclr;
        std::vector<int> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);

        for (int epoch = 1; epoch <= cfg.t_max; ++epoch) {
            const double lr = diffcore::cosine_lr(epoch - 1, sched);
            Rng shuf(stable_hash({mseed, kTagShuffle, static_cast<uint64_t>(epoch)}));
            shuf.shuffle(order);
            double loss_sum = 0;
            size_t seen = 0;
            for (size_t pos = 0; pos < n; pos += cfg.batch_size) {
                const size_t bend = std::min(pos + cfg.batch_size, n);
                const int b = static_cast<int>(bend - pos);
                if (contrastive && b < 2) break;  // no negatives in a 1-image tail
                double batch_loss;
                if (contrastive) {
                    Tensor views({2 * b, 3, 32, 32});
                    std::vector<int> pairing(2 * b);
                    for (int i = 0; i < b; ++i) {
                        const int idx = order[pos + i];
                        for (int v = 0; v < 2; ++v) {
                            auto img = data::augment(
                                ds.image(idx), policy,
                                stable_hash({mseed, kTagAug,
                                             static_cast<uint64_t>(epoch),
                                             static_cast<uint64_t>(idx),
                                             static_cast<uint64_t>(v)}));
                            copy_image(views, 2 * i + v, img);
                        }
                        pairing[2 * i] = 2 * i + 1;
                        pairing[2 * i + 1] = 2 * i;
                    }
                    Tensor proj = net.forward(state, views, diffcore::Mode::train);
                    auto loss = nt_xent_loss(proj, pairing, cfg.tau);
                    batch_loss = loss.loss;
                    auto grads = net.backward(state, loss.grad);
                    diffcore::optimizer_step(opt, state, grads, lr);
                } else {
                    Tensor batch({b, 3, 32, 32});
                    std::vector<int> labels(b);
                    for (int i = 0; i < b; ++i) {
                        const int idx = order[pos + i];
                        auto img = data::augment(
                            ds.image(idx), policy,
                            stable_hash({mseed, kTagAug, static_cast<uint64_t>(epoch),
                                         static_cast<uint64_t>(idx), 0}));
                        copy_image(batch, i, img);
                        labels[i] = label_map ? label_map->labels[idx] : ds.labels[idx];
                    }
                    Tensor logits = net.forward(state, batch, diffcore::Mode::train);
                    auto loss = supervised_loss(logits, labels, cfg.tau);
                    batch_loss = loss.loss;
                    auto grads = net.backward(state, loss.grad);
                    diffcore::optimizer_step(opt, state, grads, lr);
                }
                if (!std::isfinite(batch_loss))
                    throw NumericError("non-finite loss at model " +
                                       std::to_string(model_index) + " epoch " +
                                       std::to_string(epoch));
                loss_sum += batch_loss * b;
                seen += b;
            }
            result.epoch_loss.push_back(seen ? loss_sum / static_cast<double>(seen) : 0.0);
            if (std::find(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end(),
                          epoch) != cfg.checkpoint_epochs.end())
                diffcore::save_checkpoint(state, run.checkpoint_path(model_index, epoch));
        }
    } catch (const std::exception& e) {
        result.error = e.what();
    }
    return result;
}

void write_manifest(const RunDirectory& run, const ParadigmConfig& cfg, bool complete,
                    const std::vector<std::string>& errors) {
    json j;
    j["schema_version"] = 1;
    j["format_versions"] = {{"checkpoint", 1}, {"indicator", 1}};
    j["config"] = config_to_json(cfg);
    j["config_hash"] = config_hash(cfg);
    std::vector<uint64_t> seeds;
    for (int i = 1; i <= cfg.ensemble_size; ++i)
        seeds.push_back(model_seed(cfg.master_seed, i));
    j["model_seeds"] = seeds;
    j["complete"] = complete;
    if (!errors.empty()) j["errors"] = errors;
    std::ofstream os(run.manifest_path(), std::ios::trunc);
    if (!os) throw RunError("cannot write manifest: " + run.manifest_path());
    os << j.dump(2) << "\n";
}

}  // namespace

uint64_t model_seed(uint64_t master_seed, int model_index) {
    return stable_hash({master_seed, kTagModel, static_cast<uint64_t>(model_index)});
}

uint64_t config_hash(const ParadigmConfig& cfg) {
    return diffcore::fnv1a64(config_to_json(cfg).dump());
}

RunDirectory train_ensemble(const ParadigmConfig& cfg, const data::ImageDataset& ds,
                            const data::LabelMap* label_map, const std::string& out_dir,
                            int jobs) {
    cfg.validate();
    if ((cfg.kind == ParadigmKind::random_labels_aug ||
         cfg.kind == ParadigmKind::random_labels_noaug)) {
        if (!label_map) throw ConfigError("random-labels paradigm needs a label map");
        if (label_map->labels.size() != ds.size())
            throw ConfigError("label map size does not match dataset");
    }
    RunDirectory run{out_dir};
    fs::create_directories(out_dir);
    write_manifest(run, cfg, false, {});

    const int n_models = cfg.ensemble_size;
    std::vector<ModelResult> results(n_models);
    std::atomic<int> next{1};
    auto worker = [&] {
        for (;;) {
            int i = next.fetch_add(1);
            if (i > n_models) return;
            results[i - 1] = train_one_model(cfg, ds, label_map, run, i);
        }
    };
    const int nthreads = std::max(1, std::min(jobs, n_models));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::vector<std::string> errors;
    for (int i = 0; i < n_models; ++i)
        if (!results[i].error.empty())
            errors.push_back("model " + std::to_string(i + 1) + ": " + results[i].error);

    {
        std::ofstream os(run.loss_log_path(), std::ios::trunc);
        if (!os) throw RunError("cannot write loss log");
        os << "model,epoch,loss\n";
        char buf[64];
        for (int i = 0; i < n_models; ++i)
            for (size_t e = 0; e < results[i].epoch_loss.size(); ++e) {
                std::snprintf(buf, sizeof(buf), "%.9g", results[i].epoch_loss[e]);
                os << (i + 1) << "," << (e + 1) << "," << buf << "\n";
            }
    }
    write_manifest(run, cfg, errors.empty(), errors);
    if (!errors.empty())
        throw RunError("partial run (" + std::to_string(errors.size()) +
                       " model(s) failed); manifest flagged");
    return run;
}

PairedBatch build_paired_views(const data::ImageDataset& ds,
                               const std::vector<int>& indices,
                               const data::AugmentationPolicy& policy,
                               const std::vector<uint64_t>& seeds) {
    const int b = static_cast<int>(indices.size());
    if (b < 2) throw ConfigError("contrastive batch needs >= 2 source images");
    if (seeds.size() != static_cast<size_t>(2 * b))
        throw InputError("build_paired_views: need 2 seeds per source image");
    PairedBatch pb;
    pb.views = Tensor({2 * b, 3, 32, 32});
    pb.pairing.resize(2 * b);
    pb.source.resize(2 * b);
    for (int i = 0; i < b; ++i) {
        for (int v = 0; v < 2; ++v) {
            auto img = data::augment(ds.image(indices[i]), policy, seeds[2 * i + v]);
            copy_image(pb.views, 2 * i + v, img);
            pb.source[2 * i + v] = indices[i];
        }
        pb.pairing[2 * i] = 2 * i + 1;
        pb.pairing[2 * i + 1] = 2 * i;
    }
    return pb;
}

PairedBatch build_contrastive_batch(const data::ImageDataset& ds,
                                    const std::vector<int>& indices,
                                    const data::AugmentationPolicy& policy,
                                    uint64_t seed) {
    std::vector<uint64_t> seeds;
    seeds.reserve(indices.size() * 2);
    for (size_t i = 0; i < indices.size(); ++i)
        for (int v = 0; v < 2; ++v)
            seeds.push_back(stable_hash({seed, kTagBatch, static_cast<uint64_t>(i),
                                         static_cast<uint64_t>(v)}));
    return build_paired_views(ds, indices, policy, seeds);
}

}  // namespace memtrace::paradigms
