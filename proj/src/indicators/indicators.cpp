#include "memtrace/indicators/indicators.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <thread>

#include "memtrace/diffcore/checkpoint.hpp"
#include "memtrace/errors.hpp"

namespace memtrace::indicators {

IndicatorTensor::IndicatorTensor(int n_models, std::vector<int> epochs, int n_examples,
                                 int n_slots)
    : n_(n_models), x_(n_examples), m_(n_slots), epochs_(std::move(epochs)) {
    if (n_ < 1 || x_ < 1 || m_ < 1 || epochs_.empty())
        throw ConfigError("indicator tensor dims must be positive");
    const size_t nbits = static_cast<size_t>(n_) * epochs_.size() * x_ * m_;
    bits_.assign((nbits + 7) / 8, 0);
}

int IndicatorTensor::epoch_index(int epoch) const {
    for (size_t t = 0; t < epochs_.size(); ++t)
        if (epochs_[t] == epoch) return static_cast<int>(t);
    throw RangeError("epoch " + std::to_string(epoch) + " not in indicator tensor");
}

size_t IndicatorTensor::bit_index(int i, int t, int x, int j) const {
    if (i < 0 || i >= n_ || t < 0 || t >= n_epochs() || x < 0 || x >= x_ || j < 0 ||
        j >= m_)
        throw RangeError("indicator index out of range");
    return ((static_cast<size_t>(i) * epochs_.size() + t) * x_ + x) * m_ + j;
}

bool IndicatorTensor::get(int i, int t, int x, int j) const {
    const size_t b = bit_index(i, t, x, j);
    return (bits_[b >> 3] >> (7 - (b & 7))) & 1;
}

void IndicatorTensor::set(int i, int t, int x, int j, bool v) {
    const size_t b = bit_index(i, t, x, j);
    const uint8_t mask = static_cast<uint8_t>(1u << (7 - (b & 7)));
    if (v)
        bits_[b >> 3] |= mask;
    else
        bits_[b >> 3] &= static_cast<uint8_t>(~mask);
}

namespace {
constexpr char kMagic[4] = {'M', 'E', 'M', 'P'};
constexpr uint16_t kVersion = 1;
}  // namespace

void IndicatorTensor::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RunError("cannot write indicator tensor: " + path);
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(&kVersion), 2);
    uint32_t dims[4] = {static_cast<uint32_t>(n_),
                        static_cast<uint32_t>(epochs_.size()),
                        static_cast<uint32_t>(x_), static_cast<uint32_t>(m_)};
    os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    for (int e : epochs_) {
        uint32_t v = static_cast<uint32_t>(e);
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
    os.write(reinterpret_cast<const char*>(bits_.data()),
             static_cast<std::streamsize>(bits_.size()));
    if (!os) throw RunError("indicator write failed: " + path);
}

IndicatorTensor IndicatorTensor::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RunError("cannot open indicator tensor: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad indicator magic: " + path);
    uint16_t version = 0;
    is.read(reinterpret_cast<char*>(&version), 2);
    if (!is || version != kVersion)
        throw FormatError("unsupported indicator version: " + path);
    uint32_t dims[4];
    is.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!is) throw FormatError("truncated indicator file: " + path);
    std::vector<int> epochs(dims[1]);
    for (auto& e : epochs) {
        uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        e = static_cast<int>(v);
    }
    IndicatorTensor t(static_cast<int>(dims[0]), std::move(epochs),
                      static_cast<int>(dims[2]), static_cast<int>(dims[3]));
    is.read(reinterpret_cast<char*>(t.bits_.data()),
            static_cast<std::streamsize>(t.bits_.size()));
    if (!is) throw FormatError("truncated indicator file: " + path);
    return t;
}

int argmax_lowest(const float* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

int recognize_supervised(const float* logits, int n_classes, int target) {
    return argmax_lowest(logits, n_classes) == target ? 1 : 0;
}

int recognize_supervised(diffcore::Network& net, diffcore::ModelState& state,
                         const Tensor& image, int target) {
    Tensor batch({1, image.shape[0], image.shape[1], image.shape[2]});
    batch.data = image.data;
    Tensor logits = net.forward(state, batch, diffcore::Mode::eval);
    return recognize_supervised(logits.ptr(), logits.shape[1], target);
}

std::vector<uint8_t> contrastive_hits(const Tensor& projections,
                                      const std::vector<int>& pairing) {
    const int n = projections.shape[0], d = projections.shape[1];
    if (n < 2) throw ConfigError("contrastive recognition needs >= 2 views");
    std::vector<double> u(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        const float* row = projections.ptr() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) s += static_cast<double>(row[j]) * row[j];
        const double nv = std::sqrt(s);
        if (!(nv > 0)) throw NumericError("zero-norm projection row");
        for (int j = 0; j < d; ++j) u[static_cast<size_t>(i) * d + j] = row[j] / nv;
    }
    std::vector<uint8_t> hits(n);
    for (int a = 0; a < n; ++a) {
        int best = -1;
        double bv = -2.0;
        for (int j = 0; j < n; ++j) {
            if (j == a) continue;  // self-exclusion
            double s = 0;
            for (int c = 0; c < d; ++c)
                s += u[static_cast<size_t>(a) * d + c] * u[static_cast<size_t>(j) * d + c];
            if (s > bv) {
                bv = s;
                best = j;
            }
        }
        hits[a] = best == pairing[a] ? 1 : 0;
    }
    return hits;
}

int recognize_contrastive(diffcore::Network& net, diffcore::ModelState& state,
                          const paradigms::PairedBatch& batch, int anchor) {
    if (batch.views.shape[0] < 4)
        throw ConfigError("contrastive recognition needs >= 2 source images");
    if (anchor < 0 || anchor >= batch.views.shape[0])
        throw RangeError("anchor view index out of range");
    Tensor proj = net.forward(state, batch.views, diffcore::Mode::eval);
    return contrastive_hits(proj, batch.pairing)[anchor];
}

ProbabilityCurve estimate_p_avg(const IndicatorTensor& ind, int epoch) {
    const int t = ind.epoch_index(epoch);
    ProbabilityCurve c;
    c.epoch = epoch;
    c.kind = CurveKind::averaged;
    c.n_models = ind.n_models();
    c.n_augmentations = ind.n_slots();
    c.values.resize(ind.n_examples());
    const double denom = static_cast<double>(ind.n_models()) * ind.n_slots();
    for (int x = 0; x < ind.n_examples(); ++x) {
        long ones = 0;
        for (int i = 0; i < ind.n_models(); ++i)
            for (int j = 0; j < ind.n_slots(); ++j) ones += ind.get(i, t, x, j);
        c.values[x] = static_cast<double>(ones) / denom;
    }
    return c;
}

ProbabilityCurve estimate_p_fixed(const IndicatorTensor& ind, int epoch, int slot) {
    if (slot < 0 || slot >= ind.n_slots())
        throw RangeError("fixed-augmentation slot out of range");
    const int t = ind.epoch_index(epoch);
    ProbabilityCurve c;
    c.epoch = epoch;
    c.kind = CurveKind::fixed;
    c.n_models = ind.n_models();
    c.n_augmentations = 1;
    c.values.resize(ind.n_examples());
    for (int x = 0; x < ind.n_examples(); ++x) {
        long ones = 0;
        for (int i = 0; i < ind.n_models(); ++i) ones += ind.get(i, t, x, slot);
        c.values[x] = static_cast<double>(ones) / ind.n_models();
    }
    return c;
}

namespace {

// per-(model, epoch) cell result: X*M bits
using CellBits = std::vector<uint8_t>;

CellBits eval_cell_supervised(diffcore::Network& net, diffcore::ModelState& state,
                              const std::vector<Tensor>& slot_batches,
                              const std::vector<int>& targets, int chunk) {
    const int nx = static_cast<int>(targets.size());
    const int m = static_cast<int>(slot_batches.size());
    CellBits out(static_cast<size_t>(nx) * m);
    for (int j = 0; j < m; ++j) {
        const Tensor& all = slot_batches[j];
        for (int pos = 0; pos < nx; pos += chunk) {
            const int b = std::min(chunk, nx - pos);
            Tensor batch({b, 3, 32, 32});
            std::memcpy(batch.ptr(),
                        all.ptr() + static_cast<size_t>(pos) * data::kImageBytes,
                        sizeof(float) * static_cast<size_t>(b) * data::kImageBytes);
            Tensor logits = net.forward(state, batch, diffcore::Mode::eval);
            for (int i = 0; i < b; ++i)
                out[static_cast<size_t>(pos + i) * m + j] = static_cast<uint8_t>(
                    recognize_supervised(logits.ptr() + static_cast<size_t>(i) * logits.shape[1],
                                         logits.shape[1], targets[pos + i]));
        }
    }
    return out;
}

CellBits eval_cell_contrastive(diffcore::Network& net, diffcore::ModelState& state,
                               const std::vector<Tensor>& slot_views, int nx, int m,
                               int eval_batch) {
    // slot_views[j]: (2*nx, 3, 32, 32), views 2i / 2i+1 for subset position i
    CellBits out(static_cast<size_t>(nx) * m);
    for (int j = 0; j < m; ++j) {
        const Tensor& all = slot_views[j];
        for (int pos = 0; pos < nx; pos += eval_batch) {
            const int b = std::min(eval_batch, nx - pos);
            if (b < 2)
                throw ConfigError("contrastive eval batch smaller than 2 images");
            Tensor views({2 * b, 3, 32, 32});
            std::memcpy(views.ptr(),
                        all.ptr() + static_cast<size_t>(2 * pos) * data::kImageBytes,
                        sizeof(float) * static_cast<size_t>(2 * b) * data::kImageBytes);
            std::vector<int> pairing(2 * b);
            for (int i = 0; i < b; ++i) {
                pairing[2 * i] = 2 * i + 1;
                pairing[2 * i + 1] = 2 * i;
            }
            Tensor proj = net.forward(state, views, diffcore::Mode::eval);
            auto hits = contrastive_hits(proj, pairing);
            for (int i = 0; i < b; ++i)
                out[static_cast<size_t>(pos + i) * m + j] = hits[2 * i];  // first view anchors
        }
    }
    return out;
}

}  // namespace

IndicatorTensor evaluate_indicators(const paradigms::ParadigmConfig& cfg,
                                    const paradigms::RunDirectory& run,
                                    const data::ImageDataset& ds,
                                    const data::LabelMap* label_map,
                                    const std::vector<int>& eval_subset,
                                    const data::FixedAugSet& fixed_aug,
                                    int eval_batch, int jobs) {
    const int nx = static_cast<int>(eval_subset.size());
    const int m = fixed_aug.num_slots;
    const int n_models = cfg.ensemble_size;
    const bool contrastive = cfg.kind == paradigms::ParadigmKind::simclr;
    if (nx < 1) throw ConfigError("empty eval subset");
    if (eval_batch < (contrastive ? 2 : 1))
        throw ConfigError("eval batch too small for paradigm");
    for (int idx : eval_subset)
        if (idx < 0 || static_cast<size_t>(idx) >= ds.size())
            throw ConfigError("eval subset index out of dataset range");

    const data::AugmentationPolicy policy = paradigms::training_policy(cfg.kind);

    // Pre-render the fixed augmented subset once; identical for all models.
    std::vector<Tensor> slots(m);
    for (int j = 0; j < m; ++j) {
        slots[j] = Tensor({(contrastive ? 2 : 1) * nx, 3, 32, 32});
        for (int i = 0; i < nx; ++i) {
            const int idx = eval_subset[i];
            if (contrastive) {
                for (int v = 0; v < 2; ++v) {
                    auto img = data::augment(ds.image(idx), policy,
                                             fixed_aug.seed_for(idx, j, v));
                    std::memcpy(slots[j].ptr() +
                                    static_cast<size_t>(2 * i + v) * data::kImageBytes,
                                img.ptr(), sizeof(float) * data::kImageBytes);
                }
            } else {
                auto img =
                    data::augment(ds.image(idx), policy, fixed_aug.seed_for(idx, j, 0));
                std::memcpy(slots[j].ptr() + static_cast<size_t>(i) * data::kImageBytes,
                            img.ptr(), sizeof(float) * data::kImageBytes);
            }
        }
    }
    std::vector<int> targets(nx);
    if (!contrastive)
        for (int i = 0; i < nx; ++i)
            targets[i] = label_map ? label_map->labels[eval_subset[i]]
                                   : ds.labels[eval_subset[i]];

    const auto& epochs = cfg.checkpoint_epochs;
    const int n_epochs = static_cast<int>(epochs.size());
    std::vector<CellBits> cells(static_cast<size_t>(n_models) * n_epochs);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex err_mu;
    auto worker = [&] {
        diffcore::Network net(paradigms::network_for(cfg));
        for (;;) {
            int cell = next.fetch_add(1);
            if (cell >= n_models * n_epochs || failed.load()) return;
            const int i = cell / n_epochs, t = cell % n_epochs;
            try {
                auto state =
                    diffcore::load_checkpoint(run.checkpoint_path(i + 1, epochs[t]));
                cells[cell] = contrastive
                                  ? eval_cell_contrastive(net, state, slots, nx, m,
                                                          eval_batch)
                                  : eval_cell_supervised(net, state, slots, targets,
                                                         eval_batch);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!failed.exchange(true)) first_error = e.what();
                return;
            }
        }
    };
    const int nthreads = std::max(1, std::min(jobs, n_models * n_epochs));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failed.load()) throw RunError("indicator evaluation failed: " + first_error);

    IndicatorTensor ind(n_models, epochs, nx, m);
    for (int i = 0; i < n_models; ++i)
        for (int t = 0; t < n_epochs; ++t) {
            const CellBits& cb = cells[static_cast<size_t>(i) * n_epochs + t];
            for (int x = 0; x < nx; ++x)
                for (int j = 0; j < m; ++j)
                    ind.set(i, t, x, j, cb[static_cast<size_t>(x) * m + j] != 0);
        }
    return ind;
}

}  // namespace memtrace::indicators
