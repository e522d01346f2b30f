#pragma once

// Differentiable tensor primitives. Each op takes an optional tape; with a null
// tape (or no input requiring grad) nothing is recorded.

#include "xnmoe/kernels.hpp"
#include "xnmoe/tensor.hpp"

#include <string>

namespace xnmoe {

namespace detail {

template <class T>
void accumulate_grad(const Tensor<T>& target, std::span<const T> delta)
{
    if (!target.requires_grad()) return;
    auto g = target.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op)
{
    if (s.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got "
                         + s.str());
}

} // namespace detail

/// out = a + b. Shapes must match exactly, or one operand is a rank-0 scalar.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr)
{
    const bool a_scalar = a.rank() == 0;
    const bool b_scalar = b.rank() == 0;
    if (!(a.shape() == b.shape()) && !a_scalar && !b_scalar)
        throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    const Tensor<T>& big = (a_scalar && !b_scalar) ? b : a;
    Tensor<T> out(big.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[a_scalar ? 0 : i] + b[b_scalar ? 0 : i];

    detail::finish(tape, "add", out, a.requires_grad() || b.requires_grad(), [a, b, out]() mutable {
        auto g = out.grad();
        for (const Tensor<T>* in : {&a, &b}) {
            if (!in->requires_grad()) continue;
            auto gi = in->grad();
            if (in->rank() == 0 && out.rank() != 0) {
                T s = 0;
                for (T v : g) s += v;
                gi[0] += s;
            } else {
                for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
            }
        }
    });
    return out;
}

/// Elementwise product of equally shaped tensors.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr)
{
    if (!(a.shape() == b.shape()))
        throw ShapeError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
    detail::finish(tape, "mul", out, a.requires_grad() || b.requires_grad(), [a, b, out]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor, Tape<T>* tape = nullptr)
{
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
    detail::finish(tape, "scale", out, a.requires_grad(), [a, out, factor]() mutable {
        auto g = out.grad();
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
    return out;
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& a, Tape<T>* tape = nullptr)
{
    T s = 0;
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    detail::finish(tape, "sum", out, a.requires_grad(), [a, out]() mutable {
        const T g = out.grad()[0];
        for (T& v : a.grad()) v += g;
    });
    return out;
}

/// Matrix product of rank-2 tensors. Backward: dA = dY·Bᵀ, dB = Aᵀ·dY.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr)
{
    detail::require_rank(a.shape(), 2, "matmul");
    detail::require_rank(b.shape(), 2, "matmul");
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K)
        throw ShapeError("matmul: inner dimensions differ " + a.shape().str() + " x " + b.shape().str());
    Tensor<T> out(Shape{M, N});
    detail::gemm_nn(M, K, N, a.ptr(), b.ptr(), out.ptr(), false);
    detail::finish(tape, "matmul", out, a.requires_grad() || b.requires_grad(),
                   [a, b, out, M, K, N]() mutable {
                       const T* g = out.grad().data();
                       if (a.requires_grad()) detail::gemm_nt_acc(M, N, K, g, b.ptr(), a.grad().data());
                       if (b.requires_grad()) detail::gemm_tn_acc(M, K, N, a.ptr(), g, b.grad().data());
                   });
    return out;
}

/// Same data under a new shape with equal element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape, Tape<T>* tape = nullptr)
{
    if (shape.numel() != a.numel())
        throw ShapeError("reshape: " + a.shape().str() + " -> " + shape.str());
    Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
    detail::finish(tape, "reshape", out, a.requires_grad(), [a, out]() mutable {
        detail::accumulate_grad<T>(a, out.grad());
    });
    return out;
}

/// Column j of a rank-2 tensor as a rank-1 tensor of length N.
template <class T>
Tensor<T> select_column(const Tensor<T>& x, std::size_t j, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 2, "select_column");
    const std::size_t N = x.dim(0), D = x.dim(1);
    if (j >= D) throw ShapeError("select_column: column out of range");
    Tensor<T> out(Shape{N});
    for (std::size_t n = 0; n < N; ++n) out[n] = x[n * D + j];
    detail::finish(tape, "select_column", out, x.requires_grad(), [x, out, N, D, j]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t n = 0; n < N; ++n) gx[n * D + j] += g[n];
    });
    return out;
}

/// out[n,:] = x[n,:] · s[n]
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s, Tape<T>* tape = nullptr)
{
    detail::require_rank(x.shape(), 2, "scale_rows");
    const std::size_t N = x.dim(0), D = x.dim(1);
    if (s.numel() != N) throw ShapeError("scale_rows: scale length must equal row count");
    Tensor<T> out(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < D; ++d) out[n * D + d] = x[n * D + d] * s[n];
    detail::finish(tape, "scale_rows", out, x.requires_grad() || s.requires_grad(),
                   [x, s, out, N, D]() mutable {
                       auto g = out.grad();
                       if (x.requires_grad()) {
                           auto gx = x.grad();
                           for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += g[n * D + d] * s[n];
                       }
                       if (s.requires_grad()) {
                           auto gs = s.grad();
                           for (std::size_t n = 0; n < N; ++n) {
                               T acc = 0;
                               for (std::size_t d = 0; d < D; ++d) acc += g[n * D + d] * x[n * D + d];
                               gs[n] += acc;
                           }
                       }
                   });
    return out;
}

} // namespace xnmoe
