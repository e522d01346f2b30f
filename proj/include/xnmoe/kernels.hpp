#pragma once

// Raw loops behind matmul and conv2d. Every output element is produced by one
// fixed-order accumulation, so results are identical with or without threads.

#include "xnmoe/parallel.hpp"

#include <algorithm>
#include <cstddef>
#include <vector>

namespace xnmoe::detail {

constexpr std::size_t round_up(std::size_t x, std::size_t m) noexcept { return (x + m - 1) / m * m; }

/// C[M×N] (+)= A[M×K] · B[K×N]
template <class T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A,
             const T* __restrict B, T* __restrict C, bool accumulate)
{
    constexpr std::size_t RB = 4;
    parallel_for((M + RB - 1) / RB, [&](std::size_t blk) {
        const std::size_t i0 = blk * RB;
        const std::size_t rows = std::min(RB, M - i0);
        if (!accumulate) std::fill(C + i0 * N, C + (i0 + rows) * N, T(0));
        for (std::size_t k = 0; k < K; ++k) {
            const T* __restrict b = B + k * N;
            for (std::size_t r = 0; r < rows; ++r) {
                const T a = A[(i0 + r) * K + k];
                T* __restrict c = C + (i0 + r) * N;
                for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
            }
        }
    });
}

/// C[K×N] += A[M×K]ᵀ · B[M×N]
template <class T>
void gemm_tn_acc(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A,
                 const T* __restrict B, T* __restrict C)
{
    parallel_for(K, [&](std::size_t k) {
        T* __restrict c = C + k * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T a = A[i * K + k];
            const T* __restrict b = B + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    });
}

/// Dot product with eight interleaved partial sums combined in a fixed order.
template <class T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n) noexcept
{
    T acc[8] = {};
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
    T tail = 0;
    for (; j < n; ++j) tail += a[j] * b[j];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

/// C[M×K] += A[M×N] · B[K×N]ᵀ
template <class T>
void gemm_nt_acc(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A,
                 const T* __restrict B, T* __restrict C)
{
    parallel_for(M, [&](std::size_t i) {
        for (std::size_t k = 0; k < K; ++k) C[i * K + k] += dot(A + i * N, B + k * N, N);
    });
}

/// Copies NHWC `in` into a zero-filled buffer with spatial padding and optional
/// dilation (dilation d inserts d-1 zeros between neighbouring pixels).
template <class T>
std::vector<T> pad_nhwc(const T* in, std::size_t N, std::size_t H, std::size_t W, std::size_t C,
                        std::size_t top, std::size_t bottom, std::size_t left, std::size_t right,
                        std::size_t dilation, std::size_t& Hp, std::size_t& Wp)
{
    const std::size_t Hd = (H - 1) * dilation + 1;
    const std::size_t Wd = (W - 1) * dilation + 1;
    Hp = Hd + top + bottom;
    Wp = Wd + left + right;
    std::vector<T> out(N * Hp * Wp * C, T(0));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const T* src = in + ((n * H + y) * W + x) * C;
                T* dst = out.data() + ((n * Hp + top + y * dilation) * Wp + left + x * dilation) * C;
                std::copy(src, src + C, dst);
            }
    return out;
}

inline constexpr std::size_t kChannelBlock = 16;
inline constexpr std::size_t kPixelBlock = 4;

/// Valid cross-correlation: out[n,oy,ox,co] = Σ in[n, oy·s+ky, ox·s+kx, ci] · K[ky,kx,ci,co].
/// `in` is already padded; out must hold N×Ho×Wo×Co.
template <class T>
void correlate(const T* in, std::size_t N, std::size_t Hp, std::size_t Wp, std::size_t Ci,
               const T* kernel, std::size_t kh, std::size_t kw, std::size_t Co, std::size_t stride,
               T* out, std::size_t Ho, std::size_t Wo)
{
    constexpr std::size_t CB = kChannelBlock;
    constexpr std::size_t PB = kPixelBlock;
    const std::size_t Cop = round_up(Co, CB);
    std::vector<T> kp(kh * kw * Ci * Cop, T(0));
    for (std::size_t r = 0; r < kh * kw * Ci; ++r)
        std::copy(kernel + r * Co, kernel + (r + 1) * Co, kp.begin() + static_cast<std::ptrdiff_t>(r * Cop));

    parallel_for(N * Ho, [&](std::size_t row) {
        const std::size_t n = row / Ho;
        const std::size_t oy = row % Ho;
        T* orow = out + row * Wo * Co;
        for (std::size_t ox0 = 0; ox0 < Wo; ox0 += PB) {
            const std::size_t np = std::min(PB, Wo - ox0);
            std::size_t xoff[PB];
            for (std::size_t p = 0; p < PB; ++p) xoff[p] = (ox0 + std::min(p, np - 1)) * stride * Ci;
            for (std::size_t cb = 0; cb < Cop; cb += CB) {
                T acc[PB][CB] = {};
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const T* irow = in + (n * Hp + oy * stride + ky) * Wp * Ci;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T* kk = kp.data() + (ky * kw + kx) * Ci * Cop + cb;
                        const T* ib = irow + kx * Ci;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const T* __restrict kv = kk + ci * Cop;
                            for (std::size_t p = 0; p < PB; ++p) {
                                const T xv = ib[xoff[p] + ci];
                                for (std::size_t c = 0; c < CB; ++c) acc[p][c] += xv * kv[c];
                            }
                        }
                    }
                }
                const std::size_t cw = std::min(CB, Co - cb);
                for (std::size_t p = 0; p < np; ++p)
                    for (std::size_t c = 0; c < cw; ++c) orow[(ox0 + p) * Co + cb + c] = acc[p][c];
            }
        }
    });
}

/// dK[ky,kx,ci,co] += Σ_{n,oy,ox} in[n, oy·s+ky, ox·s+kx, ci] · dY[n,oy,ox,co].
template <class T>
void correlate_weight_grad(const T* in, std::size_t N, std::size_t Hp, std::size_t Wp, std::size_t Ci,
                           const T* dy, std::size_t Ho, std::size_t Wo, std::size_t Co,
                           std::size_t kh, std::size_t kw, std::size_t stride, T* dkernel)
{
    constexpr std::size_t CB = kChannelBlock;
    constexpr std::size_t IB = 4;
    const std::size_t Cop = round_up(Co, CB);
    std::vector<T> dyp(N * Ho * Wo * Cop, T(0));
    for (std::size_t r = 0; r < N * Ho * Wo; ++r)
        std::copy(dy + r * Co, dy + (r + 1) * Co, dyp.begin() + static_cast<std::ptrdiff_t>(r * Cop));

    parallel_for(kh * kw, [&](std::size_t tap) {
        const std::size_t ky = tap / kw;
        const std::size_t kx = tap % kw;
        std::vector<T> acc_buf(Ci * Cop, T(0));
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t oy = 0; oy < Ho; ++oy) {
                const T* irow = in + ((n * Hp + oy * stride + ky) * Wp + kx) * Ci;
                const T* drow = dyp.data() + (n * Ho + oy) * Wo * Cop;
                for (std::size_t ci0 = 0; ci0 < Ci; ci0 += IB) {
                    std::size_t cidx[IB];
                    for (std::size_t i = 0; i < IB; ++i) cidx[i] = std::min(ci0 + i, Ci - 1);
                    for (std::size_t cb = 0; cb < Cop; cb += CB) {
                        T acc[IB][CB];
                        for (std::size_t i = 0; i < IB; ++i)
                            for (std::size_t c = 0; c < CB; ++c) acc[i][c] = acc_buf[cidx[i] * Cop + cb + c];
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const T* __restrict dv = drow + ox * Cop + cb;
                            const T* xp = irow + ox * stride * Ci;
                            for (std::size_t i = 0; i < IB; ++i) {
                                const T xv = xp[cidx[i]];
                                for (std::size_t c = 0; c < CB; ++c) acc[i][c] += xv * dv[c];
                            }
                        }
                        for (std::size_t i = 0; i < IB && ci0 + i < Ci; ++i)
                            for (std::size_t c = 0; c < CB; ++c) acc_buf[(ci0 + i) * Cop + cb + c] = acc[i][c];
                    }
                }
            }
        T* dk = dkernel + tap * Ci * Co;
        for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t co = 0; co < Co; ++co) dk[ci * Co + co] += acc_buf[ci * Cop + co];
    });
}

} // namespace xnmoe::detail
