#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "sidae/nn.hpp"

namespace sidae {

enum class Schedule { cosine, constant };

inline std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

struct OptimizerConfig {
    double lr = 0.03;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 512;
    std::size_t epochs = 200;
    Schedule schedule = Schedule::cosine;

    static OptimizerConfig pretrain_defaults() { return {}; }
    static OptimizerConfig probe_defaults() { return {0.05, 0.9, 0.0, 256, 50, Schedule::constant}; }

    void validate(const std::string& where) const {
        if (!(lr > 0.0)) throw ParameterError(where + ".lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError(where + ".momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ParameterError(where + ".weight_decay must be non-negative");
        if (batch_size == 0) throw ParameterError(where + ".batch_size must be positive");
        if (epochs == 0) throw ParameterError(where + ".epochs must be positive");
    }
};

/// lr0 * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) throw ParameterError("cosine_lr: total_steps must be positive");
    if (step > total_steps) throw ParameterError("cosine_lr: step exceeds total_steps");
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

inline double scheduled_lr(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps) {
    return cfg.schedule == Schedule::cosine ? cosine_lr(step, total_steps, cfg.lr) : cfg.lr;
}

/// Momentum buffers, one per parameter in ParameterList order.
template <typename T>
struct SgdState {
    std::vector<std::vector<T>> velocity;
};

/// v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
template <typename T>
void sgd_step(const ParameterList<T>& params, SgdState<T>& state, const OptimizerConfig& cfg, double lr) {
    if (state.velocity.empty()) {
        state.velocity.resize(params.params.size());
        for (std::size_t i = 0; i < params.params.size(); ++i) {
            state.velocity[i].assign(params.params[i].tensor.numel(), T(0));
        }
    }
    if (state.velocity.size() != params.params.size()) {
        throw ContractError("sgd_step: optimizer state does not match the parameter list");
    }
    for (const auto& np : params.params) {
        if (np.tensor.requires_grad() && !np.tensor.has_grad()) {
            throw ContractError("sgd_step: missing gradient for " + np.name);
        }
    }
    const T mom = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), step = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.params.size(); ++i) {
        Tensor<T> p = params.params[i].tensor;
        if (!p.requires_grad()) continue;
        auto v = std::span<T>(state.velocity[i]);
        auto data = p.data();
        auto g = p.grad();
        for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] = mom * v[j] + (g[j] + wd * data[j]);
            data[j] -= step * v[j];
        }
    }
}

}  // namespace sidae
