#pragma once

#include <optional>

#include "sidae/ops.hpp"

namespace sidae {

/// Scalar objective plus the per-term values it was assembled from. Absent
/// terms (l_dae for SimSiam, l_si for the autoencoder) stay empty.
template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    std::optional<double> l_si;
    std::optional<double> l_dae;
    double w = 0.0;

    double value() const { return static_cast<double>(total.item()); }
};

inline constexpr double kNcsEps = 1e-8;

/// Negative cosine similarity, averaged over rows: -mean_i a_i.b_i / max(|a_i||b_i|, eps).
template <typename T>
Tensor<T> ncs_distance(const Tensor<T>& a, const Tensor<T>& b) {
    return scale(mean(cosine_similarity(a, b, T(kNcsEps))), T(-1));
}

/// Mean squared difference over all elements.
template <typename T>
Tensor<T> mse_distance(const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

/// Symmetrized SimSiam objective; the z arguments act as targets only.
template <typename T>
LossBreakdown<T> simsiam_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& z1, const Tensor<T>& z2) {
    auto total = add(scale(ncs_distance(p1, stop_gradient(z2)), T(0.5)), scale(ncs_distance(p2, stop_gradient(z1)), T(0.5)));
    LossBreakdown<T> out;
    out.l_si = static_cast<double>(total.item());
    out.total = std::move(total);
    return out;
}

/// Reconstruction objective with a per-view target (the clean image for both
/// views, or each augmented view for its own reconstruction).
template <typename T>
LossBreakdown<T> dae_loss(const Tensor<T>& target1, const Tensor<T>& target2, const Tensor<T>& r1, const Tensor<T>& r2) {
    auto total = add(scale(mse_distance(target1, r1), T(0.5)), scale(mse_distance(target2, r2), T(0.5)));
    LossBreakdown<T> out;
    out.l_dae = static_cast<double>(total.item());
    out.w = 1.0;
    out.total = std::move(total);
    return out;
}

template <typename T>
LossBreakdown<T> dae_loss(const Tensor<T>& target, const Tensor<T>& r1, const Tensor<T>& r2) {
    return dae_loss(target, target, r1, r2);
}

/// w * L_dae + (1 - w) * L_si.
template <typename T>
LossBreakdown<T> sidae_loss(double w, const LossBreakdown<T>& si, const LossBreakdown<T>& dae) {
    if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("sidae_loss: w must lie in [0, 1], got " + std::to_string(w));
    LossBreakdown<T> out;
    out.total = add(scale(dae.total, static_cast<T>(w)), scale(si.total, static_cast<T>(1.0 - w)));
    out.l_si = si.l_si;
    out.l_dae = dae.l_dae;
    out.w = w;
    return out;
}

}  // namespace sidae
