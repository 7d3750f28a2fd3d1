#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>

// Row-major packed GEMM: C[M,N] (+)= op(A)[M,K] * op(B)[K,N].
// Panels of A (MR rows) and B (NR columns) are packed contiguously and a
// fixed-size register tile is accumulated over K. The summation order is fixed
// by the tile constants, so results are reproducible for a given build.
namespace sidae::detail {

// Uninitialized scratch array for buffers that are fully overwritten.
template <typename T>
class Scratch {
   public:
    explicit Scratch(std::size_t n) : data_(new T[n]) {}
    T* data() { return data_.get(); }
    const T* data() const { return data_.get(); }
    T& operator[](std::size_t i) { return data_[i]; }

   private:
    std::unique_ptr<T[]> data_;
};

template <typename T>
struct GemmTile {
    static constexpr std::size_t mr = 4;
    static constexpr std::size_t nr = 32 / sizeof(T);
    static constexpr std::size_t kc = 256;
};

template <typename T>
[[gnu::always_inline]] inline void gemm_micro(std::size_t kc, const T* __restrict ap, const T* __restrict bp, T* __restrict c, std::size_t ldc,
                       std::size_t rows, std::size_t cols, bool overwrite) {
    constexpr std::size_t MR = GemmTile<T>::mr;
    constexpr std::size_t NR = GemmTile<T>::nr;
    T acc[MR][NR] = {};
    for (std::size_t p = 0; p < kc; ++p) {
        const T* a = ap + p * MR;
        const T* b = bp + p * NR;
        for (std::size_t r = 0; r < MR; ++r) {
            const T av = a[r];
            for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * b[j];
        }
    }
    for (std::size_t r = 0; r < rows; ++r) {
        T* cr = c + r * ldc;
        if (overwrite) {
            for (std::size_t j = 0; j < cols; ++j) cr[j] = acc[r][j];
        } else {
            for (std::size_t j = 0; j < cols; ++j) cr[j] += acc[r][j];
        }
    }
}

template <typename T>
[[gnu::always_inline]] inline void gemm_blocked(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    constexpr std::size_t MR = GemmTile<T>::mr;
    constexpr std::size_t NR = GemmTile<T>::nr;
    constexpr std::size_t KC = GemmTile<T>::kc;
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate) std::fill(c, c + m * n, T(0));
        return;
    }
    const std::size_t n_panels = (n + NR - 1) / NR;
    Scratch<T> bpack(n_panels * NR * std::min(k, KC));
    Scratch<T> apack(MR * std::min(k, KC));
    for (std::size_t pc = 0; pc < k; pc += KC) {
        const std::size_t kc = std::min(KC, k - pc);
        // B panels: [panel][p][NR], zero-padded past n.
        for (std::size_t jp = 0; jp < n_panels; ++jp) {
            T* dst = bpack.data() + jp * kc * NR;
            const std::size_t j0 = jp * NR;
            const std::size_t cols = std::min(NR, n - j0);
            for (std::size_t p = 0; p < kc; ++p) {
                T* row = dst + p * NR;
                if (!trans_b) {
                    const T* src = b + (pc + p) * n + j0;
                    for (std::size_t j = 0; j < cols; ++j) row[j] = src[j];
                } else {
                    for (std::size_t j = 0; j < cols; ++j) row[j] = b[(j0 + j) * k + pc + p];
                }
                for (std::size_t j = cols; j < NR; ++j) row[j] = T(0);
            }
        }
        const bool overwrite = !accumulate && pc == 0;
        for (std::size_t i0 = 0; i0 < m; i0 += MR) {
            const std::size_t rows = std::min(MR, m - i0);
            for (std::size_t p = 0; p < kc; ++p) {
                T* dst = apack.data() + p * MR;
                for (std::size_t r = 0; r < MR; ++r) {
                    if (r >= rows) {
                        dst[r] = T(0);
                    } else {
                        dst[r] = trans_a ? a[(pc + p) * m + i0 + r] : a[(i0 + r) * k + pc + p];
                    }
                }
            }
            for (std::size_t jp = 0; jp < n_panels; ++jp) {
                const std::size_t j0 = jp * NR;
                gemm_micro(kc, apack.data(), bpack.data() + jp * kc * NR, c + i0 * n + j0, n, rows,
                           std::min(NR, n - j0), overwrite);
            }
        }
    }
}

// The avx2 clone is picked at load time where the CPU has it. That target has
// no FMA, so each element sees the same multiplies and adds in the same order
// and both clones produce identical bits.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define SIDAE_GEMM_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define SIDAE_GEMM_CLONES
#endif

SIDAE_GEMM_CLONES inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                                   const float* a, const float* b, float* c, bool accumulate) {
    gemm_blocked(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

SIDAE_GEMM_CLONES inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                                   const double* a, const double* b, double* c, bool accumulate) {
    gemm_blocked(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    gemm(false, false, m, n, k, a, b, c, accumulate);
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    gemm(true, false, m, n, k, a, b, c, accumulate);
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    gemm(false, true, m, n, k, a, b, c, accumulate);
}

}  // namespace sidae::detail
