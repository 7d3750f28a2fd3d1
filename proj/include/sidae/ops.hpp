#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sidae/detail/gemm.hpp"
#include "sidae/tensor.hpp"

namespace sidae {

namespace detail {

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& x, std::size_t rank) {
    if (x.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(x.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return record<T>("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl<T>& o) {
        for (const auto& p : {a.impl(), b.impl()}) {
            if (T* g = p->grad_slot()) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return record<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl<T>& o) {
        if (T* g = a.impl()->grad_slot()) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (T* g = b.impl()->grad_slot()) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return record<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl<T>& o) {
        if (T* g = a.impl()->grad_slot()) {
            const auto& bv = b.impl()->data;
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bv[i];
        }
        if (T* g = b.impl()->grad_slot()) {
            const auto& av = a.impl()->data;
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.data()[i];
    return record<T>("scale", a.shape(), std::move(out), {a}, [a, s](const TensorImpl<T>& o) {
        if (T* g = a.impl()->grad_slot()) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += s * o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    // NaN passes through so divergence stays visible.
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] < T(0) ? T(0) : x.data()[i];
    return record<T>("relu", x.shape(), std::move(out), {x}, [x](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            const auto& xv = x.impl()->data;
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                if (xv[i] > T(0)) g[i] += o.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
    return record<T>("sigmoid", x.shape(), std::move(out), {x}, [x](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const T y = o.data[i];
                g[i] += o.grad[i] * y * (T(1) - y);
            }
        }
    });
}

/// Identity forward; the backward contributes nothing to `x`.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    return record<T>("stop_gradient", x.shape(), x.impl()->data, {x}, [](const TensorImpl<T>&) {});
}

// ---------------------------------------------------------------------------
// Shape and reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return record<T>("reshape", std::move(shape), x.impl()->data, {x}, [x](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

// (N, ...) -> (N, prod(...))
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    if (x.rank() < 1) throw DimensionError("flatten: rank-0 tensor");
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    return record<T>("sum", {1}, {s}, {x}, [x](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            for (std::size_t i = 0; i < x.numel(); ++i) g[i] += o.grad[0];
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    const T n = static_cast<T>(x.numel());
    return record<T>("mean", {1}, {s / n}, {x}, [x, n](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            const T d = o.grad[0] / n;
            for (std::size_t i = 0; i < x.numel(); ++i) g[i] += d;
        }
    });
}

// (N, C, H, W) -> (N, C)
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_rank("global_avg_pool", x, 4);
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(nc);
    for (std::size_t i = 0; i < nc; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < hw; ++j) s += x.data()[i * hw + j];
        out[i] = s / static_cast<T>(hw);
    }
    return record<T>("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x},
                     [x, nc, hw](const TensorImpl<T>& o) {
                         if (T* g = x.impl()->grad_slot()) {
                             for (std::size_t i = 0; i < nc; ++i) {
                                 const T d = o.grad[i] / static_cast<T>(hw);
                                 for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += d;
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// (M, K) x (K, N) -> (M, N)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
    return record<T>("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const TensorImpl<T>& o) {
        if (T* g = a.impl()->grad_slot()) detail::gemm_nt(m, k, n, o.grad.data(), b.impl()->data.data(), g, true);
        if (T* g = b.impl()->grad_slot()) detail::gemm_tn(k, n, m, a.impl()->data.data(), o.grad.data(), g, true);
    });
}

/// x (B, in) * weight (out, in)^T + bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_rank("linear", x, 2);
    detail::require_rank("linear", weight, 2);
    if (x.dim(1) != weight.dim(1)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias && bias.shape() != Shape{out_dim}) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    std::vector<T> out(batch * out_dim);
    detail::gemm_nt(batch, out_dim, in, x.data().data(), weight.data().data(), out.data(), false);
    if (has_bias) {
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bias.data()[j];
    }
    auto bw = [x, weight, bias, has_bias, batch, in, out_dim](const TensorImpl<T>& o) {
        if (T* g = x.impl()->grad_slot()) {
            detail::gemm_nn(batch, in, out_dim, o.grad.data(), weight.impl()->data.data(), g, true);
        }
        if (T* g = weight.impl()->grad_slot()) {
            detail::gemm_tn(out_dim, in, batch, o.grad.data(), x.impl()->data.data(), g, true);
        }
        if (has_bias) {
            if (T* g = bias.impl()->grad_slot()) {
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t j = 0; j < out_dim; ++j) g[j] += o.grad[r * out_dim + j];
            }
        }
    };
    if (has_bias) return record<T>("linear", {batch, out_dim}, std::move(out), {x, weight, bias}, bw);
    return record<T>("linear", {batch, out_dim}, std::move(out), {x, weight}, bw);
}

/// Adds a per-channel bias to (N, C, ...) input; `bias` has shape (C).
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() < 2 || bias.shape() != Shape{x.dim(1)}) {
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
    std::vector<T> out(x.impl()->data);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) out[(b * c + ch) * inner + i] += bias.data()[ch];
    return record<T>("add_channel_bias", x.shape(), std::move(out), {x, bias},
                     [x, bias, n, c, inner](const TensorImpl<T>& o) {
                         if (T* g = x.impl()->grad_slot()) {
                             for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                         }
                         if (T* g = bias.impl()->grad_slot()) {
                             for (std::size_t b = 0; b < n; ++b)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                     for (std::size_t i = 0; i < inner; ++i)
                                         g[ch] += o.grad[(b * c + ch) * inner + i];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
    std::size_t batch, in_c, in_h, in_w;    // spatial input of the forward conv2d
    std::size_t out_c, out_h, out_w;        // spatial output of the forward conv2d
    std::size_t k, stride, padding;
    std::size_t patch() const { return in_c * k * k; }
    std::size_t cols() const { return batch * out_h * out_w; }
};

// Output columns ox whose input column ox*s - p + kj lies inside [0, w).
inline void valid_range(std::size_t out_w, std::size_t in_w, std::size_t stride, std::size_t offset_plus_pad,
                        std::size_t padding, std::size_t& lo, std::size_t& hi) {
    // ix = ox*stride + offset_plus_pad - padding
    lo = padding > offset_plus_pad ? (padding - offset_plus_pad + stride - 1) / stride : 0;
    const std::size_t limit = in_w + padding;  // need ox*stride + offset_plus_pad < limit
    hi = limit > offset_plus_pad ? std::min(out_w, (limit - offset_plus_pad + stride - 1) / stride) : 0;
    lo = std::min(lo, hi);
}

// cols[(c*k + ki)*k + kj][(n*out_h + oy)*out_w + ox] = x[n, c, oy*s - p + ki, ox*s - p + kj]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    const std::size_t ncols = g.cols();
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
                std::size_t lo, hi;
                valid_range(g.out_w, g.in_w, g.stride, kj, g.padding, lo, hi);
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* plane = x + (n * g.in_c + c) * g.in_h * g.in_w;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
                        T* dst = row + (n * g.out_h + oy) * g.out_w;
                        if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
                            std::fill(dst, dst + g.out_w, T(0));
                            continue;
                        }
                        const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
                        std::fill(dst, dst + lo, T(0));
                        if (g.stride == 1) {
                            if (lo < hi) std::copy(src + (lo + kj - g.padding), src + (hi + kj - g.padding), dst + lo);
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + kj - g.padding];
                        }
                        std::fill(dst + hi, dst + g.out_w, T(0));
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters-and-adds columns back into x.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
    const std::size_t ncols = g.cols();
    for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
                std::size_t lo, hi;
                valid_range(g.out_w, g.in_w, g.stride, kj, g.padding, lo, hi);
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* plane = x + (n * g.in_c + c) * g.in_h * g.in_w;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.padding);
                        if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                        const T* src = row + (n * g.out_h + oy) * g.out_w;
                        T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kj - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

// (C, N*P) <-> (N, C, P)
template <typename T>
void cnp_to_ncp(std::size_t n, std::size_t c, std::size_t p, const T* src, T* dst) {
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t b = 0; b < n; ++b)
            std::copy_n(src + (ch * n + b) * p, p, dst + (b * c + ch) * p);
}
template <typename T>
void ncp_to_cnp(std::size_t n, std::size_t c, std::size_t p, const T* src, T* dst) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            std::copy_n(src + (b * c + ch) * p, p, dst + (ch * n + b) * p);
}

}  // namespace detail

/// input (N, C, H, W), weight (O, C, k, k) -> (N, O, H_out, W_out).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding) {
    detail::require_rank("conv2d", input, 4);
    detail::require_rank("conv2d", weight, 4);
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    if (weight.dim(1) != input.dim(1) || weight.dim(2) != weight.dim(3)) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(input.shape()));
    }
    const std::size_t k = weight.dim(2);
    if (input.dim(2) + 2 * padding < k || input.dim(3) + 2 * padding < k) {
        throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                             shape_str(input.shape()));
    }
    detail::ConvGeometry g{input.dim(0),
                           input.dim(1),
                           input.dim(2),
                           input.dim(3),
                           weight.dim(0),
                           (input.dim(2) + 2 * padding - k) / stride + 1,
                           (input.dim(3) + 2 * padding - k) / stride + 1,
                           k,
                           stride,
                           padding};
    detail::Scratch<T> cols(g.patch() * g.cols());
    detail::im2col(g, input.data().data(), cols.data());
    detail::Scratch<T> ocn(g.out_c * g.cols());
    detail::gemm_nn(g.out_c, g.cols(), g.patch(), weight.data().data(), cols.data(), ocn.data(), false);
    std::vector<T> out(g.out_c * g.cols());
    const std::size_t p = g.out_h * g.out_w;
    detail::cnp_to_ncp(g.batch, g.out_c, p, ocn.data(), out.data());
    return record<T>("conv2d", {g.batch, g.out_c, g.out_h, g.out_w}, std::move(out), {input, weight},
                     [input, weight, g, p](const TensorImpl<T>& o) {
                         detail::Scratch<T> gcn(o.grad.size());
                         detail::ncp_to_cnp(g.batch, g.out_c, p, o.grad.data(), gcn.data());
                         if (T* gw = weight.impl()->grad_slot()) {
                             detail::Scratch<T> cols(g.patch() * g.cols());
                             detail::im2col(g, input.impl()->data.data(), cols.data());
                             detail::gemm_nt(g.out_c, g.patch(), g.cols(), gcn.data(), cols.data(), gw, true);
                         }
                         if (T* gx = input.impl()->grad_slot()) {
                             detail::Scratch<T> dcols(g.patch() * g.cols());
                             detail::gemm_tn(g.patch(), g.cols(), g.out_c, weight.impl()->data.data(), gcn.data(),
                                             dcols.data(), false);
                             detail::col2im(g, dcols.data(), gx);
                         }
                     });
}

/// input (N, C_in, H, W), weight (C_in, C_out, k, k) -> (N, C_out, H_out, W_out) with
/// H_out = (H - 1) * stride - 2 * padding + k + output_padding. This is the
/// adjoint of conv2d with the same weight tensor and hyperparameters.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding,
                           std::size_t output_padding) {
    detail::require_rank("conv_transpose2d", input, 4);
    detail::require_rank("conv_transpose2d", weight, 4);
    if (stride < 1) throw ParameterError("conv_transpose2d: stride must be >= 1");
    if (output_padding >= stride) {
        throw ParameterError("conv_transpose2d: output_padding " + std::to_string(output_padding) +
                             " must be smaller than stride " + std::to_string(stride));
    }
    if (weight.dim(0) != input.dim(1) || weight.dim(2) != weight.dim(3)) {
        throw DimensionError("conv_transpose2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(input.shape()));
    }
    const std::size_t k = weight.dim(2);
    const long oh = static_cast<long>((input.dim(2) - 1) * stride + k + output_padding) - 2 * static_cast<long>(padding);
    const long ow = static_cast<long>((input.dim(3) - 1) * stride + k + output_padding) - 2 * static_cast<long>(padding);
    if (oh < 1 || ow < 1) {
        throw DimensionError("conv_transpose2d: empty output for input " + shape_str(input.shape()));
    }
    // Geometry of the conv2d this op is the adjoint of: it maps the output
    // image (C_out channels) to the input image (C_in channels).
    detail::ConvGeometry g{input.dim(0),
                           weight.dim(1),
                           static_cast<std::size_t>(oh),
                           static_cast<std::size_t>(ow),
                           input.dim(1),
                           input.dim(2),
                           input.dim(3),
                           k,
                           stride,
                           padding};
    const std::size_t p = g.out_h * g.out_w;
    detail::Scratch<T> xcn(input.numel());
    detail::ncp_to_cnp(g.batch, g.out_c, p, input.data().data(), xcn.data());
    detail::Scratch<T> cols(g.patch() * g.cols());
    detail::gemm_tn(g.patch(), g.cols(), g.out_c, weight.data().data(), xcn.data(), cols.data(), false);
    std::vector<T> out(g.batch * g.in_c * g.in_h * g.in_w, T(0));
    detail::col2im(g, cols.data(), out.data());
    return record<T>("conv_transpose2d", {g.batch, g.in_c, g.in_h, g.in_w}, std::move(out), {input, weight},
                     [input, weight, g, p](const TensorImpl<T>& o) {
                         detail::Scratch<T> gcols(g.patch() * g.cols());
                         detail::im2col(g, o.grad.data(), gcols.data());
                         if (T* gx = input.impl()->grad_slot()) {
                             detail::Scratch<T> gcn(g.out_c * g.cols());
                             detail::gemm_nn(g.out_c, g.cols(), g.patch(), weight.impl()->data.data(), gcols.data(),
                                             gcn.data(), false);
                             for (std::size_t ch = 0; ch < g.out_c; ++ch)
                                 for (std::size_t b = 0; b < g.batch; ++b) {
                                     const T* src = gcn.data() + (ch * g.batch + b) * p;
                                     T* dst = gx + (b * g.out_c + ch) * p;
                                     for (std::size_t i = 0; i < p; ++i) dst[i] += src[i];
                                 }
                         }
                         if (T* gw = weight.impl()->grad_slot()) {
                             detail::Scratch<T> xcn(input.numel());
                             detail::ncp_to_cnp(g.batch, g.out_c, p, input.impl()->data.data(), xcn.data());
                             detail::gemm_nt(g.out_c, g.patch(), g.cols(), xcn.data(), gcols.data(), gw, true);
                         }
                     });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;
    explicit RunningStats(std::size_t features = 0) : mean(features, T(0)), var(features, T(1)) {}
};

enum class Mode { train, eval };

/// Normalizes (N, C) or (N, C, H, W) per channel. Train mode uses batch
/// statistics and folds them into `stats` (new = (1 - momentum) * old +
/// momentum * batch, unbiased variance); eval mode uses `stats`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                     Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.rank() != 2 && x.rank() != 4) throw DimensionError("batch_norm: expected (N,C) or (N,C,H,W), got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || stats.mean.size() != c) {
        throw DimensionError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
    }
    const std::size_t count = n * inner;
    if (mode == Mode::train && count < 2) {
        throw ContractError("batch_norm: train mode needs more than one value per channel (got input " +
                            shape_str(x.shape()) + ")");
    }
    const auto xv = x.data();
    std::vector<T> mu(c), inv_std(c);
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < inner; ++i) s += xv[(b * c + ch) * inner + i];
            const T m = s / static_cast<T>(count);
            T ss = T(0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < inner; ++i) {
                    const T d = xv[(b * c + ch) * inner + i] - m;
                    ss += d * d;
                }
            const T var = ss / static_cast<T>(count);
            mu[ch] = m;
            inv_std[ch] = T(1) / std::sqrt(var + eps);
            stats.mean[ch] = (T(1) - momentum) * stats.mean[ch] + momentum * m;
            stats.var[ch] = (T(1) - momentum) * stats.var[ch] + momentum * ss / static_cast<T>(count - 1);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.mean[ch];
            inv_std[ch] = T(1) / std::sqrt(stats.var[ch] + eps);
        }
    }
    std::vector<T> xhat(x.numel()), out(x.numel());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * c + ch) * inner + i;
                xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
                out[idx] = gamma.data()[ch] * xhat[idx] + beta.data()[ch];
            }
    const bool batch_stats = mode == Mode::train;
    return record<T>(
        "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std, n, c, inner, count, batch_stats](const TensorImpl<T>& o) {
            const auto& gy = o.grad;
            std::vector<T> sum_gy(c, T(0)), sum_gy_xhat(c, T(0));
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t idx = (b * c + ch) * inner + i;
                        sum_gy[ch] += gy[idx];
                        sum_gy_xhat[ch] += gy[idx] * xhat[idx];
                    }
            if (T* g = gamma.impl()->grad_slot()) {
                for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_gy_xhat[ch];
            }
            if (T* g = beta.impl()->grad_slot()) {
                for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_gy[ch];
            }
            if (T* g = x.impl()->grad_slot()) {
                const auto& gm = gamma.impl()->data;
                const T m = static_cast<T>(count);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t idx = (b * c + ch) * inner + i;
                            if (batch_stats) {
                                g[idx] += gm[ch] * inv_std[ch] *
                                          (gy[idx] - sum_gy[ch] / m - xhat[idx] * sum_gy_xhat[ch] / m);
                            } else {
                                g[idx] += gm[ch] * inv_std[ch] * gy[idx];
                            }
                        }
            }
        });
}

// ---------------------------------------------------------------------------
// Similarity and classification
// ---------------------------------------------------------------------------

/// Row-wise a_i . b_i / max(|a_i| |b_i|, eps) for (B, d) inputs -> (B).
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
    detail::require_same_shape("cosine_similarity", a, b);
    detail::require_rank("cosine_similarity", a, 2);
    const std::size_t rows = a.dim(0), d = a.dim(1);
    if (d < 1) throw DimensionError("cosine_similarity: empty feature dimension");
    std::vector<T> out(rows), na(rows), nb(rows), dots(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* ar = a.data().data() + r * d;
        const T* br = b.data().data() + r * d;
        T ab = T(0), aa = T(0), bb = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            ab += ar[j] * br[j];
            aa += ar[j] * ar[j];
            bb += br[j] * br[j];
        }
        na[r] = std::sqrt(aa);
        nb[r] = std::sqrt(bb);
        dots[r] = ab;
        out[r] = ab / std::max(na[r] * nb[r], eps);
    }
    return record<T>("cosine_similarity", {rows}, std::move(out), {a, b},
                     [a, b, na, nb, dots, rows, d, eps](const TensorImpl<T>& o) {
                         T* ga = a.impl()->grad_slot();
                         T* gb = b.impl()->grad_slot();
                         const auto& av = a.impl()->data;
                         const auto& bv = b.impl()->data;
                         for (std::size_t r = 0; r < rows; ++r) {
                             const T prod = na[r] * nb[r];
                             const T g = o.grad[r];
                             if (prod > eps) {
                                 // d/da = b/(|a||b|) - (a.b) a / (|a|^3 |b|)
                                 const T ka = dots[r] / (na[r] * na[r]);
                                 const T kb = dots[r] / (nb[r] * nb[r]);
                                 for (std::size_t j = 0; j < d; ++j) {
                                     const std::size_t i = r * d + j;
                                     if (ga) ga[i] += g * (bv[i] - ka * av[i]) / prod;
                                     if (gb) gb[i] += g * (av[i] - kb * bv[i]) / prod;
                                 }
                             } else {
                                 for (std::size_t j = 0; j < d; ++j) {
                                     const std::size_t i = r * d + j;
                                     if (ga) ga[i] += g * bv[i] / eps;
                                     if (gb) gb[i] += g * av[i] / eps;
                                 }
                             }
                         }
                     });
}

/// Mean softmax cross-entropy of logits (B, K) against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    detail::require_rank("cross_entropy", logits, 2);
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    if (labels.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             shape_str(logits.shape()));
    }
    std::vector<T> probs(logits.numel());
    std::vector<int> lab(labels.begin(), labels.end());
    T loss = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= k) {
            throw DimensionError("cross_entropy: label " + std::to_string(lab[r]) + " outside [0, " +
                                 std::to_string(k) + ")");
        }
        const T* z = logits.data().data() + r * k;
        const T zmax = *std::max_element(z, z + k);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) {
            probs[r * k + j] = std::exp(z[j] - zmax);
            s += probs[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
        loss += -(z[lab[r]] - zmax - std::log(s));
    }
    loss /= static_cast<T>(rows);
    return record<T>("cross_entropy", {1}, {loss}, {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab), rows, k](const TensorImpl<T>& o) {
                         if (T* g = logits.impl()->grad_slot()) {
                             const T s = o.grad[0] / static_cast<T>(rows);
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < k; ++j) {
                                     const T y = static_cast<std::size_t>(lab[r]) == j ? T(1) : T(0);
                                     g[r * k + j] += s * (probs[r * k + j] - y);
                                 }
                         }
                     });
}

}  // namespace sidae
