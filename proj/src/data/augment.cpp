#include "memtrace/data/augment.hpp"

#include <algorithm>
#include <cmath>

#include "memtrace/errors.hpp"

namespace memtrace::data {

namespace {

constexpr int S = kImageSide;
constexpr int HW = S * S;

inline float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

TensorT<float> to_float(const uint8_t* image) {
    TensorT<float> img({3, S, S});
    for (int i = 0; i < kImageBytes; ++i)
        img.data[i] = static_cast<float>(image[i]) / 255.0f;
    return img;
}

void hflip(TensorT<float>& img) {
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y) {
            float* row = img.ptr() + c * HW + y * S;
            std::reverse(row, row + S);
        }
}

// zero-pad by `pad`, take a 32x32 crop at offset (dy, dx) in the padded frame
TensorT<float> pad_crop(const TensorT<float>& img, int pad, int dy, int dx) {
    TensorT<float> out({3, S, S});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const int sy = y + dy - pad, sx = x + dx - pad;
                out.data[c * HW + y * S + x] =
                    (sy >= 0 && sy < S && sx >= 0 && sx < S)
                        ? img.data[c * HW + sy * S + sx]
                        : 0.0f;
            }
    return out;
}

// bilinear resize of the (h x w) window at (y0, x0) to the full 32x32 frame
TensorT<float> resize_crop(const TensorT<float>& img, int y0, int x0, int h, int w) {
    TensorT<float> out({3, S, S});
    const float sy = static_cast<float>(h) / S, sx = static_cast<float>(w) / S;
    for (int y = 0; y < S; ++y) {
        float fy = (y + 0.5f) * sy - 0.5f;
        int iy = static_cast<int>(std::floor(fy));
        float ty = fy - iy;
        int y1 = std::clamp(iy, 0, h - 1), y2 = std::clamp(iy + 1, 0, h - 1);
        for (int x = 0; x < S; ++x) {
            float fx = (x + 0.5f) * sx - 0.5f;
            int ix = static_cast<int>(std::floor(fx));
            float tx = fx - ix;
            int x1 = std::clamp(ix, 0, w - 1), x2 = std::clamp(ix + 1, 0, w - 1);
            for (int c = 0; c < 3; ++c) {
                const float* p = img.ptr() + c * HW;
                auto at = [&](int yy, int xx) { return p[(y0 + yy) * S + x0 + xx]; };
                float top = at(y1, x1) * (1 - tx) + at(y1, x2) * tx;
                float bot = at(y2, x1) * (1 - tx) + at(y2, x2) * tx;
                out.data[c * HW + y * S + x] = top * (1 - ty) + bot * ty;
            }
        }
    }
    return out;
}

inline float luma(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    float d = mx - mn;
    s = mx > 0 ? d / mx : 0.f;
    if (d <= 0.f) {
        h = 0.f;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.f : 0.f);
    else if (mx == g)
        h = (b - r) / d + 2.f;
    else
        h = (r - g) / d + 4.f;
    h /= 6.f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    h = h - std::floor(h);
    float i = std::floor(h * 6.f);
    float f = h * 6.f - i;
    float p = v * (1.f - s);
    float q = v * (1.f - f * s);
    float t = v * (1.f - (1.f - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

void apply_jitter(TensorT<float>& img, Rng& rng, const AugmentationPolicy& p) {
    // fixed order: brightness, contrast, saturation, hue
    const float fb = static_cast<float>(rng.uniform(1 - p.brightness, 1 + p.brightness));
    const float fc = static_cast<float>(rng.uniform(1 - p.contrast, 1 + p.contrast));
    const float fs = static_cast<float>(rng.uniform(1 - p.saturation, 1 + p.saturation));
    const float fh = static_cast<float>(rng.uniform(-p.hue, p.hue));
    for (int i = 0; i < HW * 3; ++i) img.data[i] = clamp01(img.data[i] * fb);
    double gray_mean = 0;
    for (int i = 0; i < HW; ++i)
        gray_mean += luma(img.data[i], img.data[HW + i], img.data[2 * HW + i]);
    const float gm = static_cast<float>(gray_mean / HW);
    for (int i = 0; i < HW * 3; ++i)
        img.data[i] = clamp01(gm + fc * (img.data[i] - gm));
    for (int i = 0; i < HW; ++i) {
        float r = img.data[i], g = img.data[HW + i], b = img.data[2 * HW + i];
        float gr = luma(r, g, b);
        img.data[i] = clamp01(gr + fs * (r - gr));
        img.data[HW + i] = clamp01(gr + fs * (g - gr));
        img.data[2 * HW + i] = clamp01(gr + fs * (b - gr));
    }
    for (int i = 0; i < HW; ++i) {
        float r = img.data[i], g = img.data[HW + i], b = img.data[2 * HW + i];
        float h, s, v;
        rgb_to_hsv(r, g, b, h, s, v);
        hsv_to_rgb(h + fh, s, v, r, g, b);
        img.data[i] = clamp01(r);
        img.data[HW + i] = clamp01(g);
        img.data[2 * HW + i] = clamp01(b);
    }
}

void apply_grayscale(TensorT<float>& img) {
    for (int i = 0; i < HW; ++i) {
        float gr = luma(img.data[i], img.data[HW + i], img.data[2 * HW + i]);
        img.data[i] = img.data[HW + i] = img.data[2 * HW + i] = gr;
    }
}

// separable 3x3 gaussian, replicated edges
void apply_blur(TensorT<float>& img, double sigma) {
    float k1 = static_cast<float>(std::exp(-0.5 / (sigma * sigma)));
    float norm = 1.f + 2.f * k1;
    float w0 = 1.f / norm, w1 = k1 / norm;
    TensorT<float> tmp({3, S, S});
    for (int c = 0; c < 3; ++c) {
        const float* src = img.ptr() + c * HW;
        float* dst = tmp.ptr() + c * HW;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                int xl = std::max(x - 1, 0), xr = std::min(x + 1, S - 1);
                dst[y * S + x] = w1 * src[y * S + xl] + w0 * src[y * S + x] +
                                 w1 * src[y * S + xr];
            }
    }
    for (int c = 0; c < 3; ++c) {
        const float* src = tmp.ptr() + c * HW;
        float* dst = img.ptr() + c * HW;
        for (int y = 0; y < S; ++y) {
            int yu = std::max(y - 1, 0), yd = std::min(y + 1, S - 1);
            for (int x = 0; x < S; ++x)
                dst[y * S + x] = w1 * src[yu * S + x] + w0 * src[y * S + x] +
                                 w1 * src[yd * S + x];
        }
    }
}

}  // namespace

void AugmentationPolicy::validate() const {
    auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob_ok(flip_prob) || !prob_ok(jitter_prob) || !prob_ok(grayscale_prob) ||
        !prob_ok(blur_prob))
        throw ConfigError("augmentation probability out of [0,1]");
    if (blur_sigma_min <= 0 || blur_sigma_max < blur_sigma_min)
        throw ConfigError("blur sigma range invalid");
    if (scale_min <= 0 || scale_max > 1.0 || scale_max < scale_min)
        throw ConfigError("resized-crop scale range must lie in (0,1]");
    if (crop_padding < 0) throw ConfigError("negative crop padding");
}

AugmentationPolicy AugmentationPolicy::none_policy(bool normalize) {
    AugmentationPolicy p;
    p.kind = AugKind::none;
    if (normalize) p.normalization = NormalizationConstants{};
    return p;
}

AugmentationPolicy AugmentationPolicy::weak_policy() {
    AugmentationPolicy p;
    p.kind = AugKind::weak;
    p.normalization = NormalizationConstants{};
    return p;
}

AugmentationPolicy AugmentationPolicy::strong_policy() {
    AugmentationPolicy p;
    p.kind = AugKind::strong;
    return p;
}

void normalize_image(TensorT<float>& img, const NormalizationConstants& nc) {
    for (int c = 0; c < 3; ++c) {
        if (nc.sigma[c] <= 0) throw ConfigError("normalization sigma must be positive");
        float* p = img.ptr() + c * HW;
        for (int i = 0; i < HW; ++i) p[i] = (p[i] - nc.mu[c]) / nc.sigma[c];
    }
}

TensorT<float> augment(const uint8_t* image, const AugmentationPolicy& policy,
                       uint64_t seed) {
    policy.validate();
    Rng rng(seed);
    TensorT<float> img = to_float(image);
    switch (policy.kind) {
        case AugKind::none:
            break;
        case AugKind::weak: {
            const int span = 2 * policy.crop_padding + 1;
            const int dy = static_cast<int>(rng.below(span));
            const int dx = static_cast<int>(rng.below(span));
            img = pad_crop(img, policy.crop_padding, dy, dx);
            if (rng.bernoulli(policy.flip_prob)) hflip(img);
            break;
        }
        case AugKind::strong: {
            int y0 = 0, x0 = 0, h = S, w = S;
            for (int attempt = 0; attempt < 10; ++attempt) {
                double area = HW * rng.uniform(policy.scale_min, policy.scale_max);
                double ratio = std::exp(rng.uniform(std::log(policy.aspect_min),
                                                    std::log(policy.aspect_max)));
                int cw = static_cast<int>(std::lround(std::sqrt(area * ratio)));
                int ch = static_cast<int>(std::lround(std::sqrt(area / ratio)));
                if (cw >= 1 && ch >= 1 && cw <= S && ch <= S) {
                    y0 = static_cast<int>(rng.below(S - ch + 1));
                    x0 = static_cast<int>(rng.below(S - cw + 1));
                    h = ch;
                    w = cw;
                    break;
                }
            }
            img = resize_crop(img, y0, x0, h, w);
            if (rng.bernoulli(policy.flip_prob)) hflip(img);
            if (rng.bernoulli(policy.jitter_prob)) apply_jitter(img, rng, policy);
            if (rng.bernoulli(policy.grayscale_prob)) apply_grayscale(img);
            if (rng.bernoulli(policy.blur_prob)) {
                double sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
                apply_blur(img, sigma);
            }
            for (float& v : img.data) v = clamp01(v);
            break;
        }
    }
    if (policy.normalization) normalize_image(img, *policy.normalization);
    return img;
}

uint64_t FixedAugSet::seed_for(size_t image_index, int slot, int view) const {
    return stable_hash({master_seed, 0x46495841ULL /*"FIXA"*/,
                        static_cast<uint64_t>(image_index),
                        static_cast<uint64_t>(slot), static_cast<uint64_t>(view)});
}

FixedAugSet draw_fixed_augmentations(size_t dataset_size, int M, uint64_t master_seed,
                                     bool paired) {
    if (M < 1) throw ConfigError("fixed augmentation count M must be >= 1");
    FixedAugSet fa;
    fa.master_seed = master_seed;
    fa.dataset_size = dataset_size;
    fa.num_slots = M;
    fa.paired = paired;
    return fa;
}

}  // namespace memtrace::data
