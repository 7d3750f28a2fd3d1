#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sidae/errors.hpp"
#include "sidae/rng.hpp"

namespace sidae {

/// Channel-planar float image, values nominally in [0, 1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
    bool empty() const { return channels == 0 || height == 0 || width == 0; }
    bool operator==(const Image&) const = default;
};

struct JitterConfig {
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;
    double probability = 0.8;
};

struct BlurConfig {
    double sigma_min = 0.1;
    double sigma_max = 2.0;
    double probability = 0.5;
    bool enabled = false;
    std::size_t kernel_size = 3;
};

struct AugmentationConfig {
    double crop_scale_min = 0.2;
    double crop_scale_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0;
    double crop_ratio_max = 4.0 / 3.0;
    JitterConfig jitter;
    double grayscale_probability = 0.2;
    double hflip_probability = 0.5;
    BlurConfig blur;
    std::size_t output_size = 32;

    /// CIFAR-10 / STL-10 pipeline (no blur).
    static AugmentationConfig color(std::size_t output_size = 32) {
        AugmentationConfig c;
        c.output_size = output_size;
        return c;
    }

    /// MNIST / Fashion-MNIST pipeline: the color pipeline plus random blur.
    static AugmentationConfig grayscale_source(std::size_t output_size = 32) {
        AugmentationConfig c = color(output_size);
        c.blur.enabled = true;
        return c;
    }

    /// Every stochastic stage disabled; the pipeline reduces to a resize.
    static AugmentationConfig identity(std::size_t output_size = 32) {
        AugmentationConfig c;
        c.crop_scale_min = c.crop_scale_max = 1.0;
        c.crop_ratio_min = c.crop_ratio_max = 1.0;
        c.jitter.probability = 0.0;
        c.grayscale_probability = 0.0;
        c.hflip_probability = 0.0;
        c.blur.enabled = false;
        c.output_size = output_size;
        return c;
    }

    void validate() const {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
        };
        prob(jitter.probability, "jitter probability");
        prob(grayscale_probability, "grayscale probability");
        prob(hflip_probability, "flip probability");
        prob(blur.probability, "blur probability");
        if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
            throw ParameterError("crop scale range must satisfy 0 < min <= max <= 1");
        }
        if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max)) {
            throw ParameterError("crop aspect range must satisfy 0 < min <= max");
        }
        if (!(blur.sigma_min > 0.0 && blur.sigma_min <= blur.sigma_max)) {
            throw ParameterError("blur sigma range must be positive and ordered");
        }
        if (blur.kernel_size % 2 == 0) throw ParameterError("blur kernel size must be odd");
        if (output_size == 0) throw ParameterError("output size must be positive");
    }
};

// ---------------------------------------------------------------------------
// Deterministic building blocks
// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centers (align_corners = false).
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
    if (img.empty()) throw DimensionError("resize_bilinear: empty image");
    if (out_h == img.height && out_w == img.width) return img;
    Image out(img.channels, out_h, out_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    auto source = [](double o, double s, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
        double pos = (o + 0.5) * s - 0.5;
        if (pos < 0.0) pos = 0.0;
        i0 = std::min(static_cast<std::size_t>(pos), n - 1);
        i1 = std::min(i0 + 1, n - 1);
        t = pos - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double ty;
        source(static_cast<double>(y), sy, img.height, y0, y1, ty);
        for (std::size_t x = 0; x < out_w; ++x) {
            std::size_t x0, x1;
            double tx;
            source(static_cast<double>(x), sx, img.width, x0, x1, tx);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = (1.0 - tx) * img.at(c, y0, x0) + tx * img.at(c, y0, x1);
                const double bottom = (1.0 - tx) * img.at(c, y1, x0) + tx * img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1.0 - ty) * top + ty * bottom);
            }
        }
    }
    return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    if (top + h > img.height || left + w > img.width || h == 0 || w == 0) {
        throw DimensionError("crop: window outside image");
    }
    Image out(img.channels, h, w);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
    return out;
}

struct CropParams {
    std::size_t top = 0, left = 0, height = 0, width = 0;
    double sampled_scale = 1.0;  // target area fraction drawn on the accepted attempt
    bool fallback = false;       // all attempts rejected; center crop used
};

/// Up to ten attempts at (area fraction ~ U(scale), log aspect ~ U(log ratio));
/// falls back to a center crop clamped to the aspect range.
inline CropParams sample_crop(std::size_t height, std::size_t width, const AugmentationConfig& cfg, SeededRng& rng,
                              std::vector<double>* scale_draws = nullptr) {
    if (height == 0 || width == 0) throw DimensionError("random_resized_crop: empty image");
    const double area = static_cast<double>(height * width);
    const double log_lo = std::log(cfg.crop_ratio_min), log_hi = std::log(cfg.crop_ratio_max);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
        if (scale_draws) scale_draws->push_back(scale);
        const double target = area * scale;
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        const long w = std::lround(std::sqrt(target * ratio));
        const long h = std::lround(std::sqrt(target / ratio));
        if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= width && static_cast<std::size_t>(h) <= height) {
            CropParams p;
            p.height = static_cast<std::size_t>(h);
            p.width = static_cast<std::size_t>(w);
            p.top = static_cast<std::size_t>(rng.below(height - p.height + 1));
            p.left = static_cast<std::size_t>(rng.below(width - p.width + 1));
            p.sampled_scale = scale;
            return p;
        }
    }
    CropParams p;
    p.fallback = true;
    const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
    if (in_ratio < cfg.crop_ratio_min) {
        p.width = width;
        p.height = static_cast<std::size_t>(std::lround(static_cast<double>(width) / cfg.crop_ratio_min));
    } else if (in_ratio > cfg.crop_ratio_max) {
        p.height = height;
        p.width = static_cast<std::size_t>(std::lround(static_cast<double>(height) * cfg.crop_ratio_max));
    } else {
        p.height = height;
        p.width = width;
    }
    p.top = (height - p.height) / 2;
    p.left = (width - p.width) / 2;
    p.sampled_scale = static_cast<double>(p.height * p.width) / area;
    return p;
}

inline Image random_resized_crop(const Image& img, const AugmentationConfig& cfg, SeededRng& rng) {
    if (img.empty()) throw DimensionError("random_resized_crop: empty image");
    const CropParams p = sample_crop(img.height, img.width, cfg, rng);
    return resize_bilinear(crop(img, p.top, p.left, p.height, p.width), cfg.output_size, cfg.output_size);
}

inline void require_rgb(const Image& img, const char* op) {
    if (img.channels != 3) {
        throw DimensionError(std::string(op) + ": expected 3 channels, got " + std::to_string(img.channels));
    }
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// ITU-R BT.601 luma.
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline void adjust_brightness(Image& img, double factor) {
    for (auto& v : img.data) v = clamp01(factor * v);
}

/// Blend toward the mean luma of the whole image.
inline void adjust_contrast(Image& img, double factor) {
    require_rgb(img, "adjust_contrast");
    const std::size_t hw = img.height * img.width;
    double m = 0.0;
    for (std::size_t i = 0; i < hw; ++i) m += luma(img.data[i], img.data[hw + i], img.data[2 * hw + i]);
    m /= static_cast<double>(hw);
    for (auto& v : img.data) v = clamp01(m + factor * (v - m));
}

/// Blend toward each pixel's own luma.
inline void adjust_saturation(Image& img, double factor) {
    require_rgb(img, "adjust_saturation");
    const std::size_t hw = img.height * img.width;
    for (std::size_t i = 0; i < hw; ++i) {
        const double g = luma(img.data[i], img.data[hw + i], img.data[2 * hw + i]);
        for (std::size_t c = 0; c < 3; ++c) img.data[c * hw + i] = clamp01(g + factor * (img.data[c * hw + i] - g));
    }
}

/// Rotates hue by `shift` of a full turn (shift in [-0.5, 0.5]).
inline void adjust_hue(Image& img, double shift) {
    require_rgb(img, "adjust_hue");
    const std::size_t hw = img.height * img.width;
    for (std::size_t i = 0; i < hw; ++i) {
        const double r = img.data[i], g = img.data[hw + i], b = img.data[2 * hw + i];
        const double maxc = std::max({r, g, b}), minc = std::min({r, g, b});
        const double v = maxc, delta = maxc - minc;
        if (delta <= 0.0) continue;  // gray pixels have no hue
        const double s = delta / maxc;
        double h;
        if (maxc == r) {
            h = (g - b) / delta;
        } else if (maxc == g) {
            h = 2.0 + (b - r) / delta;
        } else {
            h = 4.0 + (r - g) / delta;
        }
        h = h / 6.0 + shift;
        h -= std::floor(h);
        const double h6 = h * 6.0;
        const int sector = static_cast<int>(std::floor(h6)) % 6;
        const double f = h6 - std::floor(h6);
        const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
        double rgb[3];
        switch (sector) {
            case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
            case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
            case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
            case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
            case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
            default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
        }
        for (std::size_t c = 0; c < 3; ++c) img.data[c * hw + i] = clamp01(rgb[c]);
    }
}

struct JitterFactors {
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    double hue = 0.0;
    std::array<int, 4> order{0, 1, 2, 3};  // 0 brightness, 1 contrast, 2 saturation, 3 hue
};

inline void apply_jitter(Image& img, const JitterFactors& f) {
    require_rgb(img, "color_jitter");
    for (int stage : f.order) {
        switch (stage) {
            case 0: adjust_brightness(img, f.brightness); break;
            case 1: adjust_contrast(img, f.contrast); break;
            case 2: adjust_saturation(img, f.saturation); break;
            default: adjust_hue(img, f.hue); break;
        }
    }
}

inline JitterFactors sample_jitter(const JitterConfig& cfg, SeededRng& rng) {
    JitterFactors f;
    rng.shuffle(std::span<int>(f.order));
    auto factor = [&rng](double s) { return rng.uniform(std::max(0.0, 1.0 - s), 1.0 + s); };
    f.brightness = factor(cfg.brightness);
    f.contrast = factor(cfg.contrast);
    f.saturation = factor(cfg.saturation);
    f.hue = rng.uniform(-cfg.hue, cfg.hue);
    return f;
}

/// Applies a freshly sampled jitter with the configured probability; returns
/// whether it fired.
inline bool color_jitter(Image& img, const AugmentationConfig& cfg, SeededRng& rng) {
    require_rgb(img, "color_jitter");
    if (!rng.bernoulli(cfg.jitter.probability)) return false;
    apply_jitter(img, sample_jitter(cfg.jitter, rng));
    return true;
}

inline void to_grayscale(Image& img) {
    require_rgb(img, "grayscale");
    const std::size_t hw = img.height * img.width;
    for (std::size_t i = 0; i < hw; ++i) {
        const float g = static_cast<float>(luma(img.data[i], img.data[hw + i], img.data[2 * hw + i]));
        img.data[i] = img.data[hw + i] = img.data[2 * hw + i] = g;
    }
}

inline bool random_grayscale(Image& img, const AugmentationConfig& cfg, SeededRng& rng) {
    require_rgb(img, "random_grayscale");
    if (!rng.bernoulli(cfg.grayscale_probability)) return false;
    to_grayscale(img);
    return true;
}

inline void horizontal_flip(Image& img) {
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y) {
            float* row = img.data.data() + (c * img.height + y) * img.width;
            std::reverse(row, row + img.width);
        }
}

inline bool random_horizontal_flip(Image& img, const AugmentationConfig& cfg, SeededRng& rng) {
    if (!rng.bernoulli(cfg.hflip_probability)) return false;
    horizontal_flip(img);
    return true;
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
inline std::vector<double> gaussian_taps(double sigma, std::size_t size) {
    std::vector<double> taps(size);
    const double half = static_cast<double>(size / 2);
    double s = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - half;
        taps[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        s += taps[i];
    }
    for (auto& t : taps) t /= s;
    return taps;
}

/// Separable Gaussian blur. Borders mirror about the pixel edge
/// (d c b a | a b c d | d c b a), which conserves total intensity.
inline void gaussian_blur(Image& img, double sigma, std::size_t kernel_size = 3) {
    const auto taps = gaussian_taps(sigma, kernel_size);
    const long half = static_cast<long>(kernel_size / 2);
    auto mirror = [](long i, long n) {
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
        return static_cast<std::size_t>(i);
    };
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    std::vector<double> tmp(img.height * img.width);
    for (std::size_t c = 0; c < img.channels; ++c) {
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double s = 0.0;
                for (long k = -half; k <= half; ++k) s += taps[k + half] * img.at(c, y, mirror(x + k, w));
                tmp[y * w + x] = s;
            }
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double s = 0.0;
                for (long k = -half; k <= half; ++k) s += taps[k + half] * tmp[mirror(y + k, h) * w + x];
                img.at(c, y, x) = clamp01(s);
            }
    }
}

inline bool random_gaussian_blur(Image& img, const AugmentationConfig& cfg, SeededRng& rng) {
    if (!cfg.blur.enabled || !rng.bernoulli(cfg.blur.probability)) return false;
    gaussian_blur(img, rng.uniform(cfg.blur.sigma_min, cfg.blur.sigma_max), cfg.blur.kernel_size);
    return true;
}

/// One draw t ~ T: crop -> jitter -> grayscale -> [blur] -> flip.
inline Image augment(const Image& x, const AugmentationConfig& cfg, SeededRng& rng) {
    Image v = random_resized_crop(x, cfg, rng);
    color_jitter(v, cfg, rng);
    random_grayscale(v, cfg, rng);
    random_gaussian_blur(v, cfg, rng);
    random_horizontal_flip(v, cfg, rng);
    return v;
}

struct ViewPair {
    Image x;   // original, resized to the model input size
    Image x1;  // t1(x)
    Image x2;  // t2(x)
};

/// Two independent pipeline draws from child streams 1 and 2 of `rng`.
inline ViewPair make_views(const Image& x, const AugmentationConfig& cfg, const SeededRng& rng) {
    SeededRng r1 = rng.fork(1), r2 = rng.fork(2);
    ViewPair v;
    v.x = resize_bilinear(x, cfg.output_size, cfg.output_size);
    v.x1 = augment(x, cfg, r1);
    v.x2 = augment(x, cfg, r2);
    return v;
}

inline ViewPair make_views(const Image& x, const AugmentationConfig& cfg, std::uint64_t seed, std::uint64_t stream) {
    return make_views(x, cfg, SeededRng(seed, stream));
}

}  // namespace sidae
