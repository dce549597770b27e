#include "memtrace/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "memtrace/errors.hpp"
#include "memtrace/rng.hpp"

namespace memtrace::data {

namespace fs = std::filesystem;

namespace {

void load_one_file(const std::string& path, ImageDataset& ds) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw FormatError("cannot open dataset file: " + path);
    const auto sz = static_cast<size_t>(is.tellg());
    if (sz == 0 || sz % kRecordBytes != 0)
        throw FormatError("file size " + std::to_string(sz) +
                          " not a multiple of 3073: " + path);
    is.seekg(0);
    const size_t n = sz / kRecordBytes;
    std::vector<uint8_t> buf(sz);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(sz));
    if (!is) throw FormatError("short read: " + path);
    for (size_t i = 0; i < n; ++i) {
        uint8_t label = buf[i * kRecordBytes];
        if (label > 9)
            throw FormatError("label byte " + std::to_string(label) +
                              " out of range in " + path);
        ds.labels.push_back(label);
        ds.pixels.insert(ds.pixels.end(), buf.begin() + i * kRecordBytes + 1,
                         buf.begin() + (i + 1) * kRecordBytes);
    }
}

}  // namespace

ImageDataset load_cifar10(const std::string& path) {
    ImageDataset ds;
    ds.source = DatasetSource::cifar10;
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".bin")
                files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw FormatError("no .bin files in " + path);
        for (const auto& f : files) load_one_file(f, ds);
    } else {
        load_one_file(path, ds);
    }
    return ds;
}

void save_cifar10(const ImageDataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RunError("cannot write dataset: " + path);
    for (size_t i = 0; i < ds.size(); ++i) {
        uint8_t label = static_cast<uint8_t>(ds.labels[i]);
        os.write(reinterpret_cast<const char*>(&label), 1);
        os.write(reinterpret_cast<const char*>(ds.image(i)), kImageBytes);
    }
    if (!os) throw RunError("dataset write failed: " + path);
}

namespace {

inline void put_pixel(std::vector<uint8_t>& px, size_t base, int y, int x,
                      uint8_t r, uint8_t g, uint8_t b) {
    const size_t off = base + static_cast<size_t>(y) * kImageSide + x;
    px[off] = r;
    px[off + 1024] = g;
    px[off + 2048] = b;
}

}  // namespace

ImageDataset generate_synthetic(size_t n, uint64_t seed) {
    if (n < 10) throw ConfigError("synthetic dataset needs n >= 10 to balance classes");
    ImageDataset ds;
    ds.source = DatasetSource::synthetic;
    ds.pixels.assign(n * kImageBytes, 0);
    ds.labels.resize(n);
    // class = shape (label mod 5) x color (label / 5)
    const uint8_t colors[2][3] = {{225, 60, 50}, {50, 90, 225}};
    for (size_t i = 0; i < n; ++i) {
        // every third image is a "twin": it reuses the previous image's
        // entire appearance (signature, shape, and class label) with only a
        // small, graded perturbation. Twin pairs are the hard-to-separate
        // examples that give the dataset a per-example difficulty spread
        const bool twin = (i % 3 == 2);
        const int label = static_cast<int>((twin ? i - 1 : i) % 10);
        ds.labels[i] = label;
        const int shape = label % 5;
        const uint8_t* col = colors[label / 5];
        Rng rng(stable_hash({seed, twin ? i - 1 : i}));
        Rng own(stable_hash({seed, i, 0x7717}));
        // delta grades how far a twin drifts from its sibling: near 0 the
        // pair is almost indistinguishable, near 1 it separates quickly
        const double delta = twin ? 0.1 + 0.9 * own.uniform() : 0.0;
        auto jitter = [&](double scale) {
            return delta * scale * (2.0 * own.uniform() - 1.0);
        };
        const size_t base = i * kImageBytes;
        // per-image signature, part 1: base color plus a smooth cosine
        // field, even-symmetric about the image center so it survives
        // horizontal flips, and low-frequency so small crops barely move it
        // per-image difficulty: the ease factor scales every instance-level
        // cue, so some images are much easier to tell apart than others
        // (natural images vary the same way)
        const double ease = 0.35 + 0.95 * rng.uniform();
        double amp[3], bias[3];
        for (int c = 0; c < 3; ++c) {
            bias[c] = 20.0 + static_cast<double>(rng.below(140));
            amp[c] = ease * (static_cast<double>(rng.below(161)) - 80.0);
        }
        const double fx = (0.5 + 0.5 * rng.uniform()) * 0.196;  // period 64..32 px
        const double fy = (0.5 + 0.5 * rng.uniform()) * 0.196;
        // part 1b: two gratings whose frequencies fingerprint the image as
        // texture; conv filters pick up grating energy irrespective of the
        // crop-induced phase shift
        const double g1 = 0.3 + 0.8 * rng.uniform();  // wavelength ~8..21 px
        const double g2 = 0.3 + 0.8 * rng.uniform();
        double ga[3], gb[3];
        for (int c = 0; c < 3; ++c) {
            ga[c] = ease * (static_cast<double>(rng.below(101)) - 50.0);
            gb[c] = ease * (static_cast<double>(rng.below(101)) - 50.0);
        }
        if (twin) {
            for (int c = 0; c < 3; ++c) {
                bias[c] += jitter(14.0);
                amp[c] += jitter(10.0);
                ga[c] += jitter(8.0);
                gb[c] += jitter(8.0);
            }
        }
        // taper to black over the outer 5 px so the zero padding introduced
        // by weak crops blends into the image instead of adding bright
        // view-dependent bars
        auto edge = [](int t) {
            const int d = std::min(t, kImageSide - 1 - t);
            return d >= 5 ? 1.0 : d / 5.0;
        };
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < kImageSide; ++y) {
                const double wy = std::cos(fy * (y - 15.5));
                const double ry = gb[c] * std::cos(g2 * (y - 15.5));
                const double ty = edge(y);
                for (int x = 0; x < kImageSide; ++x) {
                    const double v = bias[c] +
                                     amp[c] * wy * std::cos(fx * (x - 15.5)) +
                                     ga[c] * std::cos(g1 * (x - 15.5)) + ry +
                                     static_cast<double>(own.below(20));
                    ds.pixels[base + static_cast<size_t>(c) * 1024 +
                              static_cast<size_t>(y) * kImageSide + x] =
                        static_cast<uint8_t>(
                            std::clamp(v * ty * edge(x), 0.0, 255.0));
                }
            }
        }
        // per-image signature, part 2: bright patches, drawn together with
        // their horizontal mirror so a flipped view shows the same layout;
        // sized to survive crops and blur (the instance-level signal that
        // makes each image individually recognizable)
        // patches stay >= 5 px from the border so a padded +-4 crop always
        // shows them whole
        for (int k = 0; k < 4; ++k) {
            const int ph = std::max(3, static_cast<int>(ease * (7 + static_cast<int>(rng.below(6)))));
            const int pw = std::max(3, static_cast<int>(ease * (7 + static_cast<int>(rng.below(6)))));
            int py = 5 + static_cast<int>(rng.below(static_cast<uint64_t>(kImageSide - 10 - ph)));
            int px = 5 + static_cast<int>(rng.below(static_cast<uint64_t>(kImageSide - 10 - pw)));
            if (twin) {
                py = std::clamp(py + static_cast<int>(std::lround(jitter(3.0))), 5, kImageSide - 5 - ph);
                px = std::clamp(px + static_cast<int>(std::lround(jitter(3.0))), 5, kImageSide - 5 - pw);
            }
            const uint8_t pr = static_cast<uint8_t>(80 + rng.below(176));
            const uint8_t pg = static_cast<uint8_t>(80 + rng.below(176));
            const uint8_t pb = static_cast<uint8_t>(80 + rng.below(176));
            for (int y = py; y < py + ph; ++y) {
                for (int x = px; x < px + pw; ++x) {
                    put_pixel(ds.pixels, base, y, x, pr, pg, pb);
                    put_pixel(ds.pixels, base, y, kImageSide - 1 - x, pr, pg, pb);
                }
            }
        }
        // vertical jitter only: a horizontally centered shape lands on
        // (almost) the same pixels after a flip, keeping views consistent
        const int cy = 16 + static_cast<int>(rng.below(9)) - 4;
        const int cx = 15 + static_cast<int>(rng.below(2));
        const int r = 5 + static_cast<int>(rng.below(4));
        // shape contrast varies per image, spreading class difficulty
        const double shape_alpha = 0.4 + 0.6 * rng.uniform();
        for (int y = 0; y < kImageSide; ++y) {
            for (int x = 0; x < kImageSide; ++x) {
                const int dy = y - cy, dx = x - cx;
                bool inside = false;
                switch (shape) {
                    case 0:  // disk
                        inside = dy * dy + dx * dx <= r * r;
                        break;
                    case 1:  // square
                        inside = std::abs(dy) <= r && std::abs(dx) <= r;
                        break;
                    case 2:  // triangle (upward)
                        inside = dy >= -r && dy <= r &&
                                 std::abs(dx) <= (dy + r) / 2;
                        break;
                    case 3:  // cross
                        inside = (std::abs(dy) <= r / 3 && std::abs(dx) <= r) ||
                                 (std::abs(dx) <= r / 3 && std::abs(dy) <= r);
                        break;
                    case 4:  // ring
                    {
                        const int d2 = dy * dy + dx * dx;
                        inside = d2 <= r * r && d2 >= (r / 2) * (r / 2);
                        break;
                    }
                }
                if (inside) {
                    const size_t off =
                        base + static_cast<size_t>(y) * kImageSide + x;
                    for (int c = 0; c < 3; ++c) {
                        uint8_t& px = ds.pixels[off + static_cast<size_t>(c) * 1024];
                        px = static_cast<uint8_t>(shape_alpha * col[c] +
                                                  (1.0 - shape_alpha) * px);
                    }
                }
            }
        }
    }
    return ds;
}

LabelMap assign_random_labels(size_t n, uint64_t seed) {
    LabelMap lm;
    lm.seed = seed;
    lm.labels.resize(n);
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) lm.labels[i] = static_cast<int>(rng.below(10));
    return lm;
}

void save_label_map(const LabelMap& lm, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw RunError("cannot write label map: " + path);
    os << "index,label\n";
    for (size_t i = 0; i < lm.labels.size(); ++i) os << i << "," << lm.labels[i] << "\n";
    if (!os) throw RunError("label map write failed: " + path);
}

LabelMap load_label_map(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw RunError("cannot open label map: " + path);
    std::string line;
    std::getline(is, line);  // header
    LabelMap lm;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError("bad label map row: " + line);
        lm.labels.push_back(std::stoi(line.substr(comma + 1)));
    }
    return lm;
}

std::vector<int> sample_indices(size_t n, size_t k, uint64_t seed) {
    if (k > n) throw ConfigError("sample_indices: k > n");
    std::vector<int> all(n);
    for (size_t i = 0; i < n; ++i) all[i] = static_cast<int>(i);
    Rng rng(stable_hash({seed, 0x53554253ULL}));  // "SUBS"
    rng.shuffle(all);
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace memtrace::data
