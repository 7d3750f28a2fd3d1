#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sidae/ops.hpp"
#include "sidae/rng.hpp"

namespace sidae {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct NamedStats {
    std::string name;
    RunningStats<T>* stats;
};

/// Ordered view over a module tree's trainable tensors and BN buffers.
/// Tensors are shared handles; stats pointers are valid while the module is
/// not moved.
template <typename T>
struct ParameterList {
    std::vector<NamedTensor<T>> params;
    std::vector<NamedStats<T>> buffers;

    void add(std::string name, const Tensor<T>& t) { params.push_back({std::move(name), t}); }
    void add(std::string name, RunningStats<T>& s) { buffers.push_back({std::move(name), &s}); }
    void append(const ParameterList& other) {
        params.insert(params.end(), other.params.begin(), other.params.end());
        buffers.insert(buffers.end(), other.buffers.begin(), other.buffers.end());
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.tensor.numel();
        return n;
    }
};

template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, SeededRng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
class Linear {
   public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, SeededRng& rng)
        : weight(uniform_init<T>({out, in}, in, rng)), bias(uniform_init<T>({out}, in, rng)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        out.add(prefix + ".weight", weight);
        out.add(prefix + ".bias", bias);
    }

    Tensor<T> weight;
    Tensor<T> bias;
};

template <typename T>
class BatchNorm {
   public:
    static constexpr double kMomentum = 0.1;
    static constexpr double kEps = 1e-5;

    BatchNorm() = default;
    explicit BatchNorm(std::size_t features)
        : gamma(Tensor<T>::full({features}, T(1), true)),
          beta(Tensor<T>::zeros({features}, true)),
          stats(features) {}

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
        return batch_norm(x, gamma, beta, stats, mode, T(kMomentum), T(kEps));
    }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        out.add(prefix + ".gamma", gamma);
        out.add(prefix + ".beta", beta);
        out.add(prefix, stats);
    }

    Tensor<T> gamma;
    Tensor<T> beta;
    RunningStats<T> stats;
};

// Bias-free; every conv in the backbones is followed by batch norm.
template <typename T>
class Conv2d {
   public:
    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding, SeededRng& rng)
        : weight(uniform_init<T>({out, in, k, k}, in * k * k, rng)), stride(stride), padding(padding) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, stride, padding); }

    void collect(const std::string& prefix, ParameterList<T>& out) { out.add(prefix + ".weight", weight); }

    Tensor<T> weight;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <typename T>
class ConvTranspose2d {
   public:
    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t padding,
                    std::size_t output_padding, bool with_bias, SeededRng& rng)
        : weight(uniform_init<T>({in, out, k, k}, in * k * k, rng)),
          stride(stride),
          padding(padding),
          output_padding(output_padding) {
        if (with_bias) bias = uniform_init<T>({out}, in * k * k, rng);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = conv_transpose2d(x, weight, stride, padding, output_padding);
        return bias.defined() ? add_channel_bias(y, bias) : y;
    }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        out.add(prefix + ".weight", weight);
        if (bias.defined()) out.add(prefix + ".bias", bias);
    }

    Tensor<T> weight;
    Tensor<T> bias;
    std::size_t stride = 2;
    std::size_t padding = 1;
    std::size_t output_padding = 1;
};

}  // namespace sidae
