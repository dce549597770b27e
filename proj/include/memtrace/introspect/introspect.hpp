#pragma once

#include <cstdint>
#include <string>

#include "memtrace/data/dataset.hpp"
#include "memtrace/diffcore/network.hpp"

namespace memtrace::introspect {

struct ActMaxConfig {
    int layer = 0;    // spec layer index (node in the encoder)
    int channel = 0;
    int steps = 200;
    double step_size = 0.05;
    uint64_t seed = 0;
};

struct ActMaxResult {
    Tensor image;            // {3,32,32}, values in (0,1)
    double initial_activation = 0.0;
    double final_activation = 0.0;  // pre-postprocessing target value
    bool zero_variance = false;     // flagged when the raw result was constant
};

// Gradient ascent in pixel space on the mean activation of one channel,
// starting from seeded uniform noise in [0,1]. The raw result is shifted
// and scaled to zero mean / unit variance, then squashed element-wise with
// the logistic sigma(y) = 1 / (1 + exp(-y)).
ActMaxResult activation_maximization(diffcore::Network& net,
                                     diffcore::ModelState& state,
                                     const ActMaxConfig& cfg);

// Standardize-then-logistic post-processing, exposed for verification.
Tensor postprocess_actmax(const Tensor& raw, bool* zero_variance = nullptr);

// One row per image: index, true label, encoder features (pre-head).
void export_embeddings(diffcore::Network& net, diffcore::ModelState& state,
                       const data::ImageDataset& ds, const std::string& out_path,
                       int batch = 256);

// Binary portable pixmap (P6).
void save_ppm(const Tensor& image, const std::string& path);

}  // namespace memtrace::introspect
