#pragma once

#include <cstdint>
#include <optional>

#include "memtrace/data/dataset.hpp"
#include "memtrace/rng.hpp"
#include "memtrace/tensor.hpp"

namespace memtrace::data {

struct NormalizationConstants {
    float mu[3] = {0.4914f, 0.4822f, 0.4465f};
    float sigma[3] = {0.2023f, 0.1994f, 0.2010f};
};

enum class AugKind { none, weak, strong };

struct AugmentationPolicy {
    AugKind kind = AugKind::none;
    // weak: zero-pad + crop + flip + normalize
    int crop_padding = 4;
    double flip_prob = 0.5;
    // strong (SimCLR recipe at 32x32)
    double scale_min = 0.2, scale_max = 1.0;
    double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
    double jitter_prob = 0.8;
    double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    int blur_kernel = 3;
    double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
    std::optional<NormalizationConstants> normalization;

    void validate() const;

    static AugmentationPolicy none_policy(bool normalize = false);
    static AugmentationPolicy weak_policy();
    static AugmentationPolicy strong_policy();
};

// Normalizes a [0,1] float image in place with per-channel constants.
void normalize_image(TensorT<float>& img, const NormalizationConstants& nc);

// Pure function of (image bytes, policy, seed); output shape {3,32,32}.
TensorT<float> augment(const uint8_t* image, const AugmentationPolicy& policy,
                       uint64_t seed);

// Fixed-augmentation bookkeeping: slot seeds are a stable hash of
// (master_seed, image index, slot, view). A paired set (contrastive)
// carries two views per slot.
struct FixedAugSet {
    uint64_t master_seed = 0;
    size_t dataset_size = 0;
    int num_slots = 0;  // M
    bool paired = false;

    uint64_t seed_for(size_t image_index, int slot, int view = 0) const;
};

FixedAugSet draw_fixed_augmentations(size_t dataset_size, int M, uint64_t master_seed,
                                     bool paired);

}  // namespace memtrace::data
