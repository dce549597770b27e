#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memtrace/data/augment.hpp"
#include "memtrace/data/dataset.hpp"
#include "memtrace/diffcore/network.hpp"
#include "memtrace/diffcore/optim.hpp"
#include "memtrace/tensor.hpp"

namespace memtrace::paradigms {

enum class ParadigmKind { supervised, random_labels_aug, random_labels_noaug, simclr };

std::string to_string(ParadigmKind k);
ParadigmKind paradigm_from_string(const std::string& s);

struct ParadigmConfig {
    ParadigmKind kind = ParadigmKind::supervised;
    int batch_size = 256;       // B
    double tau = 1.0;           // softmax temperature
    int proj_dim = 128;         // d (simclr)
    double lr = 3e-4;           // eta
    double weight_decay = 1e-4; // lambda
    double momentum = 0.9;      // m
    diffcore::OptimizerKind optimizer = diffcore::OptimizerKind::sgd_momentum;
    int t_max = 50;
    std::vector<int> checkpoint_epochs;
    int ensemble_size = 1;       // N
    int eval_augmentations = 10; // M
    uint64_t master_seed = 0;

    void validate() const;
};

// {1,2,4,8,...} up to t_max, merged with a uniform 10-point grid.
std::vector<int> default_checkpoint_schedule(int t_max);

// Desk-scale defaults per paradigm: optimizer, tau, and t_max
// (supervised 50, random labels 150, simclr 200).
ParadigmConfig default_config(ParadigmKind kind);

// Network used by a paradigm: SmallConvNet with a classifier head for
// label-based kinds, projection head (128 -> relu -> d) for simclr.
diffcore::NetworkSpec network_for(const ParadigmConfig& cfg);

// Augmentation distribution used both in training and for indicator
// evaluation.
data::AugmentationPolicy training_policy(ParadigmKind kind);

struct PairedBatch {
    Tensor views;               // (2B, 3, 32, 32); views 2i, 2i+1 from source i
    std::vector<int> pairing;   // involution, pairing[k] = k ^ 1
    std::vector<int> source;    // per view: source image index
};

// Two independent strong-augmentation draws per source image; view seeds
// derived from (seed, source position, view).
PairedBatch build_contrastive_batch(const data::ImageDataset& ds,
                                    const std::vector<int>& indices,
                                    const data::AugmentationPolicy& policy,
                                    uint64_t seed);

// Same pairing layout but with explicitly provided per-view seeds
// (seeds[2*i], seeds[2*i+1] for source i) — used for fixed augmentations.
PairedBatch build_paired_views(const data::ImageDataset& ds,
                               const std::vector<int>& indices,
                               const data::AugmentationPolicy& policy,
                               const std::vector<uint64_t>& seeds);

struct RunDirectory {
    std::string path;
    std::string manifest_path() const { return path + "/manifest.json"; }
    std::string loss_log_path() const { return path + "/loss.csv"; }
    std::string checkpoint_path(int model, int epoch) const {
        return path + "/model" + std::to_string(model) + "_epoch" +
               std::to_string(epoch) + ".ck";
    }
};

uint64_t model_seed(uint64_t master_seed, int model_index);

// Content hash of the canonical JSON form, as recorded in run manifests.
uint64_t config_hash(const ParadigmConfig& cfg);

// Trains N models (seeds derived from master_seed), checkpointing at each
// configured epoch. `label_map` is required for the random-labels kinds.
// `jobs` bounds the worker pool; outputs are identical for any job count.
RunDirectory train_ensemble(const ParadigmConfig& cfg, const data::ImageDataset& ds,
                            const data::LabelMap* label_map, const std::string& out_dir,
                            int jobs = 1);

}  // namespace memtrace::paradigms
