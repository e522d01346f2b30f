#pragma once

#include "xnmoe/ops.hpp"

#include <algorithm>
#include <cmath>

namespace xnmoe {

inline constexpr double kLogClamp = 1e-7;

/// Categorical cross-entropy on probabilities with label smoothing:
///   y' = (1-ε)·y + ε/K,   loss = mean_n( -Σ_i y'_i · log(max(p_i, 1e-7)) )
/// Entries below the clamp receive no gradient.
template <class T>
Tensor<T> smoothed_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target, double smoothing,
                                 Tape<T>* tape = nullptr)
{
    detail::require_rank(pred.shape(), 2, "cross_entropy");
    if (!(pred.shape() == target.shape()))
        throw ShapeError("cross_entropy: prediction " + pred.shape().str() + " vs target " + target.shape().str());
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ShapeError("cross_entropy: smoothing must lie in [0, 1)");
    const std::size_t N = pred.dim(0), K = pred.dim(1);
    const T eps = static_cast<T>(smoothing);
    const T uniform = eps / static_cast<T>(K);
    const T clamp = static_cast<T>(kLogClamp);
    T total = 0;
    for (std::size_t i = 0; i < N * K; ++i) {
        if (pred[i] < T(0) || !std::isfinite(pred[i]))
            throw NumericError("cross_entropy: prediction entries must be finite and non-negative");
        const T y = (T(1) - eps) * target[i] + uniform;
        total -= y * std::log(std::max(pred[i], clamp));
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(N));
    detail::finish(tape, "cross_entropy", out, pred.requires_grad(),
                   [pred, target, out, N, K, eps, uniform, clamp]() mutable {
                       const T g = out.grad()[0] / static_cast<T>(N);
                       auto gp = pred.grad();
                       for (std::size_t i = 0; i < N * K; ++i) {
                           if (pred[i] < clamp) continue;
                           const T y = (T(1) - eps) * target[i] + uniform;
                           gp[i] -= g * y / pred[i];
                       }
                   });
    return out;
}

/// One-hot rows from class indices.
template <class T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t num_classes)
{
    Tensor<T> out(Shape{labels.size(), num_classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] >= num_classes) throw ShapeError("one_hot: label out of range");
        out[n * num_classes + labels[n]] = T(1);
    }
    return out;
}

/// Row-wise argmax (first maximum wins).
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& x)
{
    detail::require_rank(x.shape(), 2, "argmax_rows");
    const std::size_t N = x.dim(0), K = x.dim(1);
    std::vector<std::size_t> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = x.ptr() + n * K;
        out[n] = static_cast<std::size_t>(std::max_element(row, row + K) - row);
    }
    return out;
}

} // namespace xnmoe
