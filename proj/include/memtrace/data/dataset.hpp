#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memtrace/tensor.hpp"

namespace memtrace::data {

constexpr int kImageChannels = 3;
constexpr int kImageSide = 32;
constexpr int kImageBytes = kImageChannels * kImageSide * kImageSide;  // 3072
constexpr int kRecordBytes = kImageBytes + 1;                          // 3073
constexpr int kNumClasses = 10;

enum class DatasetSource { cifar10, synthetic };

// Images stored in CIFAR-10 plane order (CHW): R plane, G plane, B plane.
struct ImageDataset {
    std::vector<uint8_t> pixels;  // n * 3072
    std::vector<int> labels;      // n, values in [0, 9]
    DatasetSource source = DatasetSource::cifar10;

    size_t size() const { return labels.size(); }
    const uint8_t* image(size_t i) const { return pixels.data() + i * kImageBytes; }
};

// Loads CIFAR-10 binary records (1 label byte + 3072 pixel bytes). `path`
// may be a single file or a directory, in which case every *.bin file is
// loaded in lexicographic order.
ImageDataset load_cifar10(const std::string& path);

// Writes a dataset back out in the same record layout.
void save_cifar10(const ImageDataset& ds, const std::string& path);

// Procedural 10-class corpus: 5 shapes x 2 colors on noise backgrounds,
// labels balanced (label = index mod 10). Deterministic in seed.
ImageDataset generate_synthetic(size_t n, uint64_t seed);

struct LabelMap {
    std::vector<int> labels;
    uint64_t seed = 0;
};

// i.i.d. uniform labels over {0..9}; one draw shared by a whole ensemble.
LabelMap assign_random_labels(size_t n, uint64_t seed);

void save_label_map(const LabelMap& lm, const std::string& path);
LabelMap load_label_map(const std::string& path);

// Deterministic sample of `k` distinct indices from [0, n), sorted.
std::vector<int> sample_indices(size_t n, size_t k, uint64_t seed);

}  // namespace memtrace::data
