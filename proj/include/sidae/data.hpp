#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sidae/augmentation.hpp"
#include "sidae/errors.hpp"
#include "sidae/rng.hpp"
#include "sidae/tensor.hpp"

namespace sidae {

enum class Split { train, test, unlabeled };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::unlabeled: return "unlabeled";
    }
    return "?";
}

/// In-memory image set, (N, C, H, W) float in [0, 1].
struct Dataset {
    std::string name;
    Split split = Split::train;
    std::size_t count = 0;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 10;
    std::vector<float> images;
    std::optional<std::vector<int>> labels;

    std::size_t image_numel() const { return channels * height * width; }
    Shape shape() const { return {count, channels, height, width}; }
    const float* image_data(std::size_t i) const { return images.data() + i * image_numel(); }

    Image image(std::size_t i) const {
        Image img(channels, height, width);
        std::copy_n(image_data(i), image_numel(), img.data.begin());
        return img;
    }

    int label(std::size_t i) const { return labels.value()[i]; }

    void validate() const {
        if (images.size() != count * image_numel()) throw ContractError(name + ": image buffer size mismatch");
        if (labels.has_value() == (split == Split::unlabeled)) {
            throw ContractError(name + ": labels must be present exactly when the split is labeled");
        }
        if (labels) {
            if (labels->size() != count) throw ContractError(name + ": label count mismatch");
            for (int l : *labels) {
                if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
                    throw ContractError(name + ": label " + std::to_string(l) + " out of range");
                }
            }
        }
    }
};

/// Stacks the selected images into an (n, C, H, W) tensor.
template <typename T>
Tensor<T> batch_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
    const std::size_t per = ds.image_numel();
    std::vector<T> v(indices.size() * per);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const float* src = ds.image_data(indices[b]);
        std::transform(src, src + per, v.begin() + static_cast<std::ptrdiff_t>(b * per),
                       [](float x) { return static_cast<T>(x); });
    }
    return Tensor<T>::from({indices.size(), ds.channels, ds.height, ds.width}, std::move(v));
}

template <typename T>
Tensor<T> images_tensor(std::span<const Image> images) {
    if (images.empty()) throw DimensionError("images_tensor: empty batch");
    const Image& first = images.front();
    const std::size_t per = first.data.size();
    std::vector<T> v(images.size() * per);
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b].channels != first.channels || images[b].height != first.height ||
            images[b].width != first.width) {
            throw DimensionError("images_tensor: images differ in shape");
        }
        std::transform(images[b].data.begin(), images[b].data.end(), v.begin() + static_cast<std::ptrdiff_t>(b * per),
                       [](float x) { return static_cast<T>(x); });
    }
    return Tensor<T>::from({images.size(), first.channels, first.height, first.width}, std::move(v));
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingDataError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

inline std::string hex32(std::uint32_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << std::setfill('0') << std::setw(8) << v;
    return os.str();
}

// Writes one uint8 image (channel-planar) into `dst`, scaled to [0, 1],
// replicated to `out_channels` and resized to size x size.
inline void store_image(const std::uint8_t* src, std::size_t channels, std::size_t h, std::size_t w,
                        std::size_t out_channels, std::size_t size, float* dst) {
    Image img(channels, h, w);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(src[i]) / 255.0f;
    if (h != size || w != size) img = resize_bilinear(img, size, size);
    const std::size_t plane = size * size;
    for (std::size_t c = 0; c < out_channels; ++c) {
        const float* from = img.data.data() + (channels == 1 ? 0 : c) * plane;
        std::copy_n(from, plane, dst + c * plane);
    }
}

}  // namespace detail

struct IdxHeader {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
    std::size_t payload_offset = 0;
};

/// Validates an IDX container holding unsigned bytes with the expected magic
/// and rank; the payload must be exactly the product of the dims.
inline IdxHeader parse_idx_header(const std::vector<std::uint8_t>& bytes, std::uint32_t expected_magic,
                                  const std::string& source) {
    if (bytes.size() < 4) throw FormatError(source + ": truncated IDX header at offset 0");
    IdxHeader h;
    h.magic = detail::read_be32(bytes, 0);
    if (h.magic != expected_magic) {
        throw FormatError(source + ": bad IDX magic " + detail::hex32(h.magic) + " at offset 0, expected " +
                          detail::hex32(expected_magic));
    }
    const std::size_t rank = expected_magic & 0xff;
    if (bytes.size() < 4 + 4 * rank) throw FormatError(source + ": truncated IDX header at offset 4");
    std::size_t payload = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        h.dims.push_back(detail::read_be32(bytes, 4 + 4 * i));
        payload *= h.dims.back();
    }
    h.payload_offset = 4 + 4 * rank;
    if (bytes.size() != h.payload_offset + payload) {
        throw FormatError(source + ": IDX payload is " + std::to_string(bytes.size() - h.payload_offset) +
                          " bytes at offset " + std::to_string(h.payload_offset) + ", header declares " +
                          std::to_string(payload));
    }
    return h;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// MNIST / Fashion-MNIST: gray 28x28 -> 3 x size x size.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::string name = "mnist", Split split = Split::train, std::size_t size = 32) {
    const auto img_bytes = detail::read_file(images_path);
    const auto lbl_bytes = detail::read_file(labels_path);
    const IdxHeader ih = parse_idx_header(img_bytes, kIdxImagesMagic, images_path.string());
    const IdxHeader lh = parse_idx_header(lbl_bytes, kIdxLabelsMagic, labels_path.string());
    if (ih.dims[0] != lh.dims[0]) {
        throw ConsistencyError(images_path.string() + " holds " + std::to_string(ih.dims[0]) + " images but " +
                               labels_path.string() + " holds " + std::to_string(lh.dims[0]) + " labels");
    }
    Dataset ds;
    ds.name = std::move(name);
    ds.split = split;
    ds.count = ih.dims[0];
    ds.height = ds.width = size;
    const std::size_t rows = ih.dims[1], cols = ih.dims[2];
    ds.images.resize(ds.count * ds.image_numel());
    std::vector<int> labels(ds.count);
    for (std::size_t i = 0; i < ds.count; ++i) {
        detail::store_image(img_bytes.data() + ih.payload_offset + i * rows * cols, 1, rows, cols, 3, size,
                            ds.images.data() + i * ds.image_numel());
        labels[i] = lbl_bytes[lh.payload_offset + i];
        if (labels[i] > 9) {
            throw FormatError(labels_path.string() + ": label " + std::to_string(labels[i]) + " at offset " +
                              std::to_string(lh.payload_offset + i));
        }
    }
    ds.labels = std::move(labels);
    return ds;
}

inline constexpr std::size_t kCifarRecord = 3073;

/// Appends the records of one CIFAR-10 binary batch to `ds`.
inline void parse_cifar10_batch(const std::vector<std::uint8_t>& bytes, const std::string& source, Dataset& ds) {
    if (bytes.size() % kCifarRecord != 0) {
        throw FormatError(source + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kCifarRecord));
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    const std::size_t per = 3 * 32 * 32;
    const std::size_t base = ds.count;
    ds.images.resize((base + n) * per);
    auto& labels = ds.labels.value();
    labels.resize(base + n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
        if (rec[0] > 9) {
            throw FormatError(source + ": label " + std::to_string(rec[0]) + " at offset " +
                              std::to_string(i * kCifarRecord));
        }
        labels[base + i] = rec[0];
        float* dst = ds.images.data() + (base + i) * per;
        for (std::size_t p = 0; p < per; ++p) dst[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
    ds.count = base + n;
}

inline Dataset load_cifar10(const std::filesystem::path& dir, Split split) {
    if (split == Split::unlabeled) throw ParameterError("cifar10 has no unlabeled split");
    Dataset ds;
    ds.name = "cifar10";
    ds.split = split;
    ds.labels.emplace();
    std::vector<std::string> files;
    if (split == Split::train) {
        for (int b = 1; b <= 5; ++b) files.push_back("data_batch_" + std::to_string(b) + ".bin");
    } else {
        files.push_back("test_batch.bin");
    }
    for (const auto& f : files) parse_cifar10_batch(detail::read_file(dir / f), (dir / f).string(), ds);
    return ds;
}

inline constexpr std::size_t kStlSide = 96;

/// STL-10 binaries: each channel plane is column-major 96x96.
inline Dataset load_stl10(const std::filesystem::path& dir, Split split, std::size_t size = 32) {
    const std::string stem = split == Split::train ? "train" : split == Split::test ? "test" : "unlabeled";
    const auto x_path = dir / (stem + "_X.bin");
    const std::size_t record = 3 * kStlSide * kStlSide;
    std::ifstream in(x_path, std::ios::binary);
    if (!in) throw MissingDataError("cannot open " + x_path.string());
    const auto bytes = std::filesystem::file_size(x_path);
    if (bytes % record != 0) {
        throw FormatError(x_path.string() + ": length " + std::to_string(bytes) + " is not a multiple of " +
                          std::to_string(record));
    }
    Dataset ds;
    ds.name = "stl10";
    ds.split = split;
    ds.count = bytes / record;
    ds.height = ds.width = size;
    ds.images.resize(ds.count * ds.image_numel());
    std::vector<std::uint8_t> raw(record), planar(record);
    for (std::size_t i = 0; i < ds.count; ++i) {
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(record));
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < kStlSide; ++y)
                for (std::size_t x = 0; x < kStlSide; ++x)
                    planar[(c * kStlSide + y) * kStlSide + x] = raw[(c * kStlSide + x) * kStlSide + y];
        detail::store_image(planar.data(), 3, kStlSide, kStlSide, 3, size, ds.images.data() + i * ds.image_numel());
    }
    if (split != Split::unlabeled) {
        const auto y_path = dir / (stem + "_y.bin");
        const auto y = detail::read_file(y_path);
        if (y.size() != ds.count) {
            throw ConsistencyError(x_path.string() + " holds " + std::to_string(ds.count) + " images but " +
                                   y_path.string() + " holds " + std::to_string(y.size()) + " labels");
        }
        std::vector<int> labels(ds.count);
        for (std::size_t i = 0; i < ds.count; ++i) {
            if (y[i] < 1 || y[i] > 10) {
                throw FormatError(y_path.string() + ": label " + std::to_string(y[i]) + " at offset " +
                                  std::to_string(i));
            }
            labels[i] = y[i] - 1;
        }
        ds.labels = std::move(labels);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Labeled subsets
// ---------------------------------------------------------------------------

struct SubsetSpec {
    std::string dataset;
    double fraction = 1.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> indices;  // ascending

    bool operator==(const SubsetSpec&) const = default;
};

/// round(fraction * n) indices drawn uniformly without replacement.
inline SubsetSpec subset_indices(const std::string& dataset, std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ParameterError("labeled fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (k == 0) {
        throw ParameterError("labeled fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                             " samples selects nothing");
    }
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    SeededRng rng(seed, 0x5eb5e7);
    for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
    SubsetSpec s{dataset, fraction, seed, {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k)}};
    std::sort(s.indices.begin(), s.indices.end());
    return s;
}

inline SubsetSpec subset_indices(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!ds.labels) throw ParameterError(ds.name + ": subsets are drawn from a labeled split");
    return subset_indices(ds.name, ds.count, fraction, seed);
}

inline void save_subset(const SubsetSpec& s, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out.precision(17);
    out << "dataset " << s.dataset << "\nfraction " << s.fraction << "\nseed " << s.seed << "\ncount "
        << s.indices.size() << "\nindices";
    for (auto i : s.indices) out << ' ' << i;
    out << '\n';
}

inline SubsetSpec load_subset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingDataError("cannot open " + path.string());
    SubsetSpec s;
    std::string key;
    std::size_t count = 0;
    auto expect = [&](const char* k) {
        if (!(in >> key) || key != k) throw FormatError(path.string() + ": expected '" + k + "'");
    };
    expect("dataset");
    in >> s.dataset;
    expect("fraction");
    in >> s.fraction;
    expect("seed");
    in >> s.seed;
    expect("count");
    in >> count;
    expect("indices");
    s.indices.resize(count);
    for (auto& i : s.indices) {
        if (!(in >> i)) throw FormatError(path.string() + ": fewer indices than declared");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class-conditional textures under color and illumination nuisances.
/// Class k draws pattern family k % 4 (horizontal stripes, vertical stripes,
/// checkerboard, rings) at frequency band k / 4; each image gets its own
/// phase, frequency jitter, two random colors, a smooth illumination ramp and
/// pixel noise.
struct SyntheticOptions {
    std::size_t n_per_class = 100;
    std::size_t num_classes = 4;
    std::size_t image_size = 32;
    std::uint64_t seed = 0;
    Split split = Split::train;
    double cycles = 3.0;          // pattern periods across the image for band 0
    double frequency_jitter = 0.2;
    double amplitude_min = 0.3;
    double noise = 0.08;
    double ramp = 0.25;           // peak illumination gradient
    double color_gap = 0.2;       // minimum per-channel separation of the two colors
    // With tints > 1 the class is (pattern family, tint): both colors of an
    // image share a luma-neutral chroma offset, so grayscale erases the tint.
    std::size_t tints = 1;
    double chroma_min = 0.06;
    double chroma_max = 0.15;
};

namespace detail {

// Unit direction in the plane of colors with zero BT.601 luma.
inline std::array<double, 3> chroma_direction(double theta) {
    const std::array<double, 3> luma{0.299, 0.587, 0.114};
    std::array<double, 3> e1{luma[1], -luma[0], 0.0};
    std::array<double, 3> e2{luma[1] * e1[2] - luma[2] * e1[1], luma[2] * e1[0] - luma[0] * e1[2],
                             luma[0] * e1[1] - luma[1] * e1[0]};
    auto normalize = [](std::array<double, 3>& v) {
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (auto& x : v) x /= n;
    };
    normalize(e1);
    normalize(e2);
    std::array<double, 3> d;
    for (int c = 0; c < 3; ++c) d[c] = std::cos(theta) * e1[c] + std::sin(theta) * e2[c];
    return d;
}

}  // namespace detail

inline Dataset synthetic_dataset(const SyntheticOptions& opt) {
    if (opt.n_per_class == 0 || opt.num_classes == 0 || opt.image_size == 0) {
        throw ParameterError("synthetic_dataset: counts and size must be positive");
    }
    Dataset ds;
    ds.name = "synthetic";
    ds.split = opt.split;
    ds.num_classes = opt.num_classes;
    ds.count = opt.n_per_class * opt.num_classes;
    ds.height = ds.width = opt.image_size;
    ds.images.resize(ds.count * ds.image_numel());
    std::vector<int> labels(ds.count);
    SeededRng rng(opt.seed, 0x5917 + static_cast<std::uint64_t>(opt.split));
    const double n = static_cast<double>(opt.image_size);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t i = 0; i < ds.count; ++i) {
        const int k = static_cast<int>(i % opt.num_classes);
        labels[i] = k;
        const std::size_t tints = std::max<std::size_t>(opt.tints, 1);
        const int tint = static_cast<int>(static_cast<std::size_t>(k) % tints);
        const int pattern = static_cast<int>(static_cast<std::size_t>(k) / tints);
        const int family = pattern % 4;
        const double band = static_cast<double>(pattern / 4);
        const double f = opt.cycles * (1.0 + 0.6 * band) * rng.uniform(1.0 - opt.frequency_jitter, 1.0 + opt.frequency_jitter) / n;
        const double ph1 = rng.uniform(0.0, two_pi), ph2 = rng.uniform(0.0, two_pi);
        const double cy = rng.uniform(0.0, n), cx = rng.uniform(0.0, n);
        const double amp = rng.uniform(opt.amplitude_min, 1.0);
        // One dark and one light color, in random roles, so the texture
        // survives grayscale conversion.
        double fg[3], bg[3];
        const bool light_fg = rng.bernoulli(0.5);
        if (tints == 1) {
            for (int c = 0; c < 3; ++c) {
                const double dark = rng.uniform(0.0, 0.5 - 0.5 * opt.color_gap);
                const double light = rng.uniform(0.5 + 0.5 * opt.color_gap, 1.0);
                fg[c] = light_fg ? light : dark;
                bg[c] = light_fg ? dark : light;
            }
        } else {
            const double theta = two_pi * tint / static_cast<double>(tints);
            const double chroma = rng.uniform(opt.chroma_min, opt.chroma_max);
            const auto dir = detail::chroma_direction(theta);
            const double dark = rng.uniform(0.2, 0.5 - 0.5 * opt.color_gap);
            const double light = rng.uniform(0.5 + 0.5 * opt.color_gap, 0.8);
            for (int c = 0; c < 3; ++c) {
                fg[c] = (light_fg ? light : dark) + chroma * dir[c];
                bg[c] = (light_fg ? dark : light) + chroma * dir[c];
            }
        }
        const double ramp_angle = rng.uniform(0.0, two_pi);
        const double ramp_gain = rng.uniform(-opt.ramp, opt.ramp);
        float* dst = ds.images.data() + i * ds.image_numel();
        const std::size_t plane = opt.image_size * opt.image_size;
        for (std::size_t y = 0; y < opt.image_size; ++y) {
            for (std::size_t x = 0; x < opt.image_size; ++x) {
                const double yy = static_cast<double>(y) + 0.5, xx = static_cast<double>(x) + 0.5;
                double s;
                switch (family) {
                    case 0: s = std::sin(two_pi * f * yy + ph1); break;
                    case 1: s = std::sin(two_pi * f * xx + ph1); break;
                    case 2: s = std::sin(two_pi * f * xx + ph1) * std::sin(two_pi * f * yy + ph2); break;
                    default: s = std::sin(two_pi * f * std::hypot(yy - cy, xx - cx) + ph1); break;
                }
                const double mix = 0.5 + 0.5 * amp * s;
                const double light =
                    ramp_gain * ((xx / n - 0.5) * std::cos(ramp_angle) + (yy / n - 0.5) * std::sin(ramp_angle));
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = bg[c] + (fg[c] - bg[c]) * mix + light + opt.noise * rng.normal();
                    dst[c * plane + y * opt.image_size + x] = clamp01(v);
                }
            }
        }
    }
    if (opt.split != Split::unlabeled) ds.labels = std::move(labels);
    return ds;
}

inline Dataset synthetic_dataset(std::size_t n_per_class, std::size_t num_classes, std::uint64_t seed,
                                 std::size_t image_size = 32, Split split = Split::train) {
    SyntheticOptions opt;
    opt.n_per_class = n_per_class;
    opt.num_classes = num_classes;
    opt.seed = seed;
    opt.image_size = image_size;
    opt.split = split;
    return synthetic_dataset(opt);
}

}  // namespace sidae
