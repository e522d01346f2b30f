#pragma once

// Differentiable layer functions on NHWC activations (N×H×W×C) and N×F features.

#include "xnmoe/ops.hpp"
#include "xnmoe/random.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace xnmoe {

enum class Padding { same, valid };
enum class Mode { train, infer };

namespace testing {
/// Fault injection for the gradient-check tooling: perturbs conv2d weight gradients.
inline bool corrupt_conv_backward = false;
} // namespace testing

namespace detail {

struct ConvGeometry {
    std::size_t out = 0;
    std::size_t pad_before = 0;
    std::size_t pad_after = 0;
};

/// Output extent and zero padding along one axis. Odd "same" padding puts the extra
/// element on the trailing (bottom/right) side.
inline ConvGeometry conv_geometry(std::size_t in, std::size_t k, std::size_t stride, Padding padding)
{
    ConvGeometry g;
    if (padding == Padding::valid) {
        if (in < k)
            throw ShapeError("conv2d: input extent " + std::to_string(in) + " smaller than kernel "
                             + std::to_string(k) + " under valid padding");
        g.out = (in - k) / stride + 1;
        return g;
    }
    g.out = (in + stride - 1) / stride;
    const std::size_t needed = (g.out - 1) * stride + k;
    const std::size_t total = needed > in ? needed - in : 0;
    g.pad_before = total / 2;
    g.pad_after = total - g.pad_before;
    return g;
}

} // namespace detail

/// Output shape of conv2d without running it.
inline Shape conv2d_output_shape(const Shape& x, std::size_t kh, std::size_t kw, std::size_t cout,
                                 std::size_t stride, Padding padding)
{
    detail::require_rank(x, 4, "conv2d");
    const auto gy = detail::conv_geometry(x[1], kh, stride, padding);
    const auto gx = detail::conv_geometry(x[2], kw, stride, padding);
    return Shape{x[0], gy.out, gx.out, cout};
}

/// 2-D cross-correlation plus bias. kernel is kh×kw×Cin×Cout, bias is Cout.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, Padding padding, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 4, "conv2d");
    detail::require_rank(kernel.shape(), 4, "conv2d kernel");
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), Co = kernel.dim(3);
    if (kernel.dim(2) != Ci)
        throw ShapeError("conv2d: input has " + std::to_string(Ci) + " channels, kernel expects "
                         + std::to_string(kernel.dim(2)));
    if (bias.numel() != Co) throw ShapeError("conv2d: bias length must equal output channels");
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const auto gy = detail::conv_geometry(H, kh, stride, padding);
    const auto gx = detail::conv_geometry(W, kw, stride, padding);
    const std::size_t Ho = gy.out, Wo = gx.out;

    std::size_t Hp = 0, Wp = 0;
    const auto xpad = detail::pad_nhwc(x.ptr(), N, H, W, Ci, gy.pad_before, gy.pad_after,
                                       gx.pad_before, gx.pad_after, 1, Hp, Wp);
    Tensor<T> out(Shape{N, Ho, Wo, Co});
    detail::correlate(xpad.data(), N, Hp, Wp, Ci, kernel.ptr(), kh, kw, Co, stride, out.ptr(), Ho, Wo);
    T* o = out.ptr();
    for (std::size_t p = 0; p < N * Ho * Wo; ++p)
        for (std::size_t c = 0; c < Co; ++c) o[p * Co + c] += bias[c];

    const bool needs = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    detail::finish(tape, "conv2d", out, needs, [=]() mutable {
        const T* g = out.grad().data();
        if (bias.requires_grad()) {
            auto gb = bias.grad();
            for (std::size_t p = 0; p < N * Ho * Wo; ++p)
                for (std::size_t c = 0; c < Co; ++c) gb[c] += g[p * Co + c];
        }
        if (kernel.requires_grad()) {
            std::size_t hp = 0, wp = 0;
            const auto padded = detail::pad_nhwc(x.ptr(), N, H, W, Ci, gy.pad_before, gy.pad_after,
                                                 gx.pad_before, gx.pad_after, 1, hp, wp);
            if (testing::corrupt_conv_backward) {
                std::vector<T> tmp(kernel.numel(), T(0));
                detail::correlate_weight_grad(padded.data(), N, hp, wp, Ci, g, Ho, Wo, Co, kh, kw,
                                              stride, tmp.data());
                auto gk = kernel.grad();
                for (std::size_t i = 0; i < tmp.size(); ++i) gk[i] += tmp[i] * T(1.05);
            } else {
                detail::correlate_weight_grad(padded.data(), N, hp, wp, Ci, g, Ho, Wo, Co, kh, kw,
                                              stride, kernel.grad().data());
            }
        }
        if (x.requires_grad()) {
            // Full correlation of the stride-dilated output gradient with the flipped,
            // channel-transposed kernel yields the gradient of the padded input.
            const std::size_t Hp_in = H + gy.pad_before + gy.pad_after;
            const std::size_t Wp_in = W + gx.pad_before + gx.pad_after;
            const std::size_t used_h = (Ho - 1) * stride + kh;
            const std::size_t used_w = (Wo - 1) * stride + kw;
            std::size_t hd = 0, wd = 0;
            const auto gpad = detail::pad_nhwc(g, N, Ho, Wo, Co, kh - 1, kh - 1 + (Hp_in - used_h),
                                               kw - 1, kw - 1 + (Wp_in - used_w), stride, hd, wd);
            std::vector<T> flipped(kernel.numel());
            for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx)
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t co = 0; co < Co; ++co)
                            flipped[((ky * kw + kx) * Co + co) * Ci + ci] =
                                kernel[(((kh - 1 - ky) * kw + (kw - 1 - kx)) * Ci + ci) * Co + co];
            std::vector<T> dxpad(N * Hp_in * Wp_in * Ci);
            detail::correlate(gpad.data(), N, hd, wd, Co, flipped.data(), kh, kw, Ci, 1, dxpad.data(),
                              Hp_in, Wp_in);
            auto gxs = x.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t y = 0; y < H; ++y) {
                    const T* src = dxpad.data()
                                   + ((n * Hp_in + y + gy.pad_before) * Wp_in + gx.pad_before) * Ci;
                    T* dst = gxs.data() + (n * H + y) * W * Ci;
                    for (std::size_t i = 0; i < W * Ci; ++i) dst[i] += src[i];
                }
        }
    });
    return out;
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr)
{
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    if (detail::decision_hashes)
        for (std::size_t i = 0; i < x.numel(); ++i) note_decision(x[i] > T(0));
    detail::finish(tape, "relu", out, x.requires_grad(), [x, out]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > T(0)) gx[i] += g[i];
    });
    return out;
}

template <class T>
struct BatchStats {
    std::vector<T> mean;
    std::vector<T> var;
};

/// Batch normalization with statistics of the current batch (channels on the last axis).
/// Variance uses the population divisor m. Batch moments are written to `stats`.
template <class T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                          BatchStats<T>* stats = nullptr, Tape<T>* tape = nullptr)
{
    if (x.rank() < 2) throw ShapeError("batchnorm: input must have rank >= 2");
    const std::size_t C = x.shape().last();
    const std::size_t m = x.numel() / C;
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("batchnorm: gamma/beta length must equal channel count");
    if (m < 2) throw ShapeError("batchnorm: degenerate batch, need at least 2 values per channel");

    std::vector<T> mean(C, T(0)), var(C, T(0));
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t c = 0; c < C; ++c) mean[c] += x[p * C + c];
    for (auto& v : mean) v /= static_cast<T>(m);
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t c = 0; c < C; ++c) {
            const T d = x[p * C + c] - mean[c];
            var[c] += d * d;
        }
    for (auto& v : var) v /= static_cast<T>(m);

    auto inv_std = std::make_shared<std::vector<T>>(C);
    for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = T(1) / std::sqrt(var[c] + eps);

    Tensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = p * C + c;
            (*xhat)[i] = (x[i] - mean[c]) * (*inv_std)[c];
            out[i] = gamma[c] * (*xhat)[i] + beta[c];
        }
    if (stats) *stats = BatchStats<T>{mean, var};

    const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    detail::finish(tape, "batchnorm", out, needs, [=]() mutable {
        auto g = out.grad();
        std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = p * C + c;
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * (*xhat)[i];
            }
        if (gamma.requires_grad()) {
            auto gg = gamma.grad();
            for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (beta.requires_grad()) {
            auto gb = beta.grad();
            for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (x.requires_grad()) {
            auto gx = x.grad();
            const T mf = static_cast<T>(m);
            for (std::size_t p = 0; p < m; ++p)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t i = p * C + c;
                    gx[i] += gamma[c] * (*inv_std)[c] / mf
                             * (mf * g[i] - sum_g[c] - (*xhat)[i] * sum_gx[c]);
                }
        }
    });
    return out;
}

/// Batch normalization with fixed (running) statistics: a per-channel affine map.
template <class T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps,
                          Tape<T>* tape = nullptr)
{
    const std::size_t C = x.shape().last();
    const std::size_t m = x.numel() / C;
    if (gamma.numel() != C || running_mean.numel() != C)
        throw ShapeError("batchnorm: parameter length must equal channel count");
    std::vector<T> a(C), b(C);
    for (std::size_t c = 0; c < C; ++c) {
        a[c] = T(1) / std::sqrt(running_var[c] + eps);
        b[c] = running_mean[c];
    }
    Tensor<T> out(x.shape());
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = p * C + c;
            out[i] = gamma[c] * ((x[i] - b[c]) * a[c]) + beta[c];
        }
    const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    detail::finish(tape, "batchnorm_infer", out, needs, [=]() mutable {
        auto g = out.grad();
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t i = p * C + c;
                if (x.requires_grad()) x.grad()[i] += g[i] * gamma[c] * a[c];
                if (gamma.requires_grad()) gamma.grad()[c] += g[i] * (x[i] - b[c]) * a[c];
                if (beta.requires_grad()) beta.grad()[c] += g[i];
            }
    });
    return out;
}

/// 2×2 max pooling with stride 2 (floor). Ties route the gradient to the first
/// position in row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 4, "maxpool2d");
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (H < 2 || W < 2) throw ShapeError("maxpool2d: spatial extent smaller than 2x2 window " + x.shape().str());
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor<T> out(Shape{N, Ho, Wo, C});
    auto arg = std::make_shared<std::vector<std::size_t>>(out.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox)
                for (std::size_t c = 0; c < C; ++c) {
                    std::size_t best = ((n * H + 2 * oy) * W + 2 * ox) * C + c;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t i = ((n * H + 2 * oy + dy) * W + 2 * ox + dx) * C + c;
                            if (x[i] > x[best]) best = i;
                        }
                    const std::size_t o = ((n * Ho + oy) * Wo + ox) * C + c;
                    out[o] = x[best];
                    (*arg)[o] = best;
                    note_decision(best);
                }
    detail::finish(tape, "maxpool2d", out, x.requires_grad(), [x, out, arg]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t o = 0; o < g.size(); ++o) gx[(*arg)[o]] += g[o];
    });
    return out;
}

/// Mean over H and W for each channel: N×H×W×C -> N×C.
template <class T>
Tensor<T> global_average_pool(const Tensor<T>& x, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 4, "global_average_pool");
    const std::size_t N = x.dim(0), HW = x.dim(1) * x.dim(2), C = x.dim(3);
    Tensor<T> out(Shape{N, C});
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p)
            for (std::size_t c = 0; c < C; ++c) out[n * C + c] += x[(n * HW + p) * C + c];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= inv;
    detail::finish(tape, "global_average_pool", out, x.requires_grad(), [x, out, N, HW, C, inv]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p)
                for (std::size_t c = 0; c < C; ++c) gx[(n * HW + p) * C + c] += g[n * C + c] * inv;
    });
    return out;
}

/// x[N×F] + b[F] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 2, "add_bias");
    const std::size_t N = x.dim(0), F = x.dim(1);
    if (b.numel() != F) throw ShapeError("add_bias: bias length must equal feature width");
    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f) out[n * F + f] = x[n * F + f] + b[f];
    detail::finish(tape, "add_bias", out, x.requires_grad() || b.requires_grad(), [x, b, out, N, F]() mutable {
        auto g = out.grad();
        if (x.requires_grad()) detail::accumulate_grad<T>(x, g);
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t f = 0; f < F; ++f) gb[f] += g[n * F + f];
        }
    });
    return out;
}

/// Row-wise softmax over the last axis of a rank-2 tensor, with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& z, Tape<T>* tape = nullptr)
{
    detail::require_rank(z.shape(), 2, "softmax");
    const std::size_t N = z.dim(0), K = z.dim(1);
    Tensor<T> out(z.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = z.ptr() + n * K;
        T* o = out.ptr() + n * K;
        T mx = row[0];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        T total = 0;
        for (std::size_t k = 0; k < K; ++k) {
            o[k] = std::exp(row[k] - mx);
            total += o[k];
        }
        for (std::size_t k = 0; k < K; ++k) o[k] /= total;
    }
    detail::finish(tape, "softmax", out, z.requires_grad(), [z, out, N, K]() mutable {
        auto g = out.grad();
        auto gz = z.grad();
        for (std::size_t n = 0; n < N; ++n) {
            T inner = 0;
            for (std::size_t k = 0; k < K; ++k) inner += g[n * K + k] * out[n * K + k];
            for (std::size_t k = 0; k < K; ++k) gz[n * K + k] += out[n * K + k] * (g[n * K + k] - inner);
        }
    });
    return out;
}

/// Inverted dropout: in train mode each element is zeroed with probability `rate`
/// and survivors are scaled by 1/(1-rate). Infer mode and rate 0 return x unchanged.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng, Tape<T>* tape = nullptr)
{
    if (!(rate >= 0.0 && rate < 1.0)) throw ShapeError("dropout: rate must lie in [0, 1)");
    if (mode == Mode::infer || rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
        out[i] = x[i] * (*mask)[i];
    }
    detail::finish(tape, "dropout", out, x.requires_grad(), [x, out, mask]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
    return out;
}

/// N×... -> N×(product of remaining extents), order preserving.
template <class T>
Tensor<T> flatten(const Tensor<T>& x, Tape<T>* tape = nullptr)
{
    if (x.rank() < 1) throw ShapeError("flatten: input must have a batch axis");
    return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)}, tape);
}

/// Last-axis concatenation of N×A and N×B.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr)
{
    detail::require_rank(a.shape(), 2, "concat");
    detail::require_rank(b.shape(), 2, "concat");
    const std::size_t N = a.dim(0), A = a.dim(1), B = b.dim(1);
    if (b.dim(0) != N)
        throw ShapeError("concat: batch mismatch " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out(Shape{N, A + B});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.ptr() + n * A, A, out.ptr() + n * (A + B));
        std::copy_n(b.ptr() + n * B, B, out.ptr() + n * (A + B) + A);
    }
    detail::finish(tape, "concat", out, a.requires_grad() || b.requires_grad(), [a, b, out, N, A, B]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < A; ++i) ga[n * A + i] += g[n * (A + B) + i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < B; ++i) gb[n * B + i] += g[n * (A + B) + A + i];
        }
    });
    return out;
}

} // namespace xnmoe
