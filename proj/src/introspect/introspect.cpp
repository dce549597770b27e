#include "memtrace/introspect/introspect.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "memtrace/data/augment.hpp"
#include "memtrace/errors.hpp"
#include "memtrace/rng.hpp"

namespace memtrace::introspect {

Tensor postprocess_actmax(const Tensor& raw, bool* zero_variance) {
    const size_t n = raw.numel();
    double mean = 0;
    for (float v : raw.data) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (float v : raw.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    Tensor out(raw.shape);
    if (var <= 0) {
        if (zero_variance) *zero_variance = true;
        std::fill(out.data.begin(), out.data.end(), 0.5f);  // logistic of 0
        return out;
    }
    if (zero_variance) *zero_variance = false;
    const double inv = 1.0 / std::sqrt(var);
    for (size_t i = 0; i < n; ++i) {
        const double y = (raw.data[i] - mean) * inv;
        out.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-y)));
    }
    return out;
}

namespace {

// mean activation of one channel at the output of a node prefix
double channel_mean(const Tensor& act, int channel, int& spatial) {
    const int c = act.shape[1];
    if (channel < 0 || channel >= c) throw ConfigError("activation channel out of range");
    spatial = act.shape.size() == 4 ? act.shape[2] * act.shape[3] : 1;
    const float* p = act.ptr() + static_cast<size_t>(channel) * spatial;
    double sum = 0;
    for (int i = 0; i < spatial; ++i) sum += p[i];
    return sum / spatial;
}

}  // namespace

ActMaxResult activation_maximization(diffcore::Network& net,
                                     diffcore::ModelState& state,
                                     const ActMaxConfig& cfg) {
    if (cfg.steps < 1 || cfg.step_size < 0)
        throw ConfigError("activation maximization needs steps >= 1, step size >= 0");
    if (cfg.layer < 0 || cfg.layer >= net.node_count())
        throw ConfigError("activation target layer out of range");
    const int prefix = cfg.layer + 1;
    Rng rng(stable_hash({cfg.seed, 0x41435431ULL}));  // "ACT1"
    Tensor x({1, 3, data::kImageSide, data::kImageSide});
    for (float& v : x.data) v = static_cast<float>(rng.uniform());

    ActMaxResult res;
    double activation = 0.0;
    for (int step = 0; step <= cfg.steps; ++step) {
        Tensor act = net.forward_prefix(state, x, diffcore::Mode::eval, true, prefix);
        int spatial = 0;
        activation = channel_mean(act, cfg.channel, spatial);
        if (step == 0) res.initial_activation = activation;
        if (step == cfg.steps) break;
        Tensor dout(act.shape);
        const float g = 1.0f / static_cast<float>(spatial);
        float* dp = dout.ptr() + static_cast<size_t>(cfg.channel) * spatial;
        for (int i = 0; i < spatial; ++i) dp[i] = g;
        Tensor dx;
        net.backward(state, dout, &dx);
        // normalized ascent direction keeps the step scale stable across layers
        double norm2 = 0;
        for (float v : dx.data) norm2 += static_cast<double>(v) * v;
        const double rms = std::sqrt(norm2 / static_cast<double>(dx.numel()));
        const float scale = static_cast<float>(cfg.step_size / (rms + 1e-12));
        for (size_t i = 0; i < x.numel(); ++i) x.data[i] += scale * dx.data[i];
    }
    res.final_activation = activation;
    Tensor raw({3, data::kImageSide, data::kImageSide});
    raw.data.assign(x.data.begin(), x.data.end());
    res.image = postprocess_actmax(raw, &res.zero_variance);
    return res;
}

void export_embeddings(diffcore::Network& net, diffcore::ModelState& state,
                       const data::ImageDataset& ds, const std::string& out_path,
                       int batch) {
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw RunError("cannot write embeddings: " + out_path);
    const auto policy = data::AugmentationPolicy::none_policy(false);
    const int enc_nodes = net.encoder_node_count();
    bool header_done = false;
    char buf[40];
    const size_t n = ds.size();
    for (size_t pos = 0; pos < n; pos += batch) {
        const size_t bend = std::min(pos + batch, n);
        const int b = static_cast<int>(bend - pos);
        Tensor in({b, 3, data::kImageSide, data::kImageSide});
        for (int i = 0; i < b; ++i) {
            auto img = data::augment(ds.image(pos + i), policy, 0);
            std::copy(img.data.begin(), img.data.end(),
                      in.data.begin() + static_cast<size_t>(i) * data::kImageBytes);
        }
        Tensor feat = net.forward_prefix(state, in, diffcore::Mode::eval, false,
                                         enc_nodes);
        const int d = static_cast<int>(feat.numel() / b);
        if (!header_done) {
            os << "index,label";
            for (int j = 0; j < d; ++j) os << ",f" << j;
            os << "\n";
            header_done = true;
        }
        for (int i = 0; i < b; ++i) {
            os << (pos + i) << "," << ds.labels[pos + i];
            for (int j = 0; j < d; ++j) {
                std::snprintf(buf, sizeof(buf), "%.9g",
                              static_cast<double>(feat.data[static_cast<size_t>(i) * d + j]));
                os << "," << buf;
            }
            os << "\n";
        }
    }
    if (!os) throw RunError("embedding write failed: " + out_path);
}

void save_ppm(const Tensor& image, const std::string& path) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw InputError("save_ppm expects a {3,H,W} image");
    const int h = image.shape[1], w = image.shape[2];
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RunError("cannot write image: " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = image.data[(static_cast<size_t>(c) * h + y) * w + x];
                v = v < 0 ? 0 : (v > 1 ? 1 : v);
                const uint8_t byte = static_cast<uint8_t>(std::lround(v * 255.0f));
                os.write(reinterpret_cast<const char*>(&byte), 1);
            }
    if (!os) throw RunError("image write failed: " + path);
}

}  // namespace memtrace::introspect
