#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memtrace/data/augment.hpp"
#include "memtrace/data/dataset.hpp"
#include "memtrace/diffcore/network.hpp"
#include "memtrace/paradigms/train.hpp"

namespace memtrace::indicators {

// Packed binary recognition outcomes over (model, checkpoint epoch,
// example, augmentation slot), row-major in (i, t, x, j).
class IndicatorTensor {
public:
    IndicatorTensor() = default;
    IndicatorTensor(int n_models, std::vector<int> epochs, int n_examples, int n_slots);

    int n_models() const { return n_; }
    int n_epochs() const { return static_cast<int>(epochs_.size()); }
    int n_examples() const { return x_; }
    int n_slots() const { return m_; }
    const std::vector<int>& epochs() const { return epochs_; }
    int epoch_index(int epoch) const;  // RangeError if absent

    bool get(int i, int t, int x, int j) const;
    void set(int i, int t, int x, int j, bool v);

    // File layout: magic "MEMP", version u16, dims N,T,X,M u32, epoch list
    // u32 x T, then bits MSB-first in row-major (i,t,x,j) order.
    void save(const std::string& path) const;
    static IndicatorTensor load(const std::string& path);

    bool operator==(const IndicatorTensor& o) const = default;

private:
    int n_ = 0, x_ = 0, m_ = 0;
    std::vector<int> epochs_;
    std::vector<uint8_t> bits_;

    size_t bit_index(int i, int t, int x, int j) const;
};

enum class CurveKind { averaged, fixed };

struct ProbabilityCurve {
    int epoch = 0;
    std::vector<double> values;
    CurveKind kind = CurveKind::averaged;
    int n_models = 0;
    int n_augmentations = 0;
};

// argmax with ties broken by lowest index
int argmax_lowest(const float* v, int n);

// 1 iff argmax(logits) == target
int recognize_supervised(const float* logits, int n_classes, int target);

// model-level wrapper: single augmented image through the classifier
int recognize_supervised(diffcore::Network& net, diffcore::ModelState& state,
                         const Tensor& image, int target);

// Per-anchor retrieval outcomes from a projection batch: hit iff the
// cosine-similarity argmax over the other 2B-1 rows is the paired view
// (ties to lowest view index, anchor itself excluded).
std::vector<uint8_t> contrastive_hits(const Tensor& projections,
                                      const std::vector<int>& pairing);

int recognize_contrastive(diffcore::Network& net, diffcore::ModelState& state,
                          const paradigms::PairedBatch& batch, int anchor);

// p_t(x) = mean over all (model, slot) cells at epoch t
ProbabilityCurve estimate_p_avg(const IndicatorTensor& ind, int epoch);

// p~_t(x~) = mean over models at epoch t for one fixed slot
ProbabilityCurve estimate_p_fixed(const IndicatorTensor& ind, int epoch, int slot);

// Evaluates recognition for every (model, epoch, example, slot) cell of a
// finished run. Fixed augmentations follow the training distribution of
// the paradigm; simclr slots are view pairs evaluated with the first view
// as anchor, in fixed sorted batches of eval_batch images.
IndicatorTensor evaluate_indicators(const paradigms::ParadigmConfig& cfg,
                                    const paradigms::RunDirectory& run,
                                    const data::ImageDataset& ds,
                                    const data::LabelMap* label_map,
                                    const std::vector<int>& eval_subset,
                                    const data::FixedAugSet& fixed_aug,
                                    int eval_batch, int jobs = 1);

}  // namespace memtrace::indicators
