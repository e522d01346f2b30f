#pragma once

#include "xnmoe/parameters.hpp"

#include <cmath>
#include <map>
#include <string>

namespace xnmoe {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const
    {
        if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
            throw ConfigError("adam: beta1 and beta2 must lie in (0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be positive");
    }
};

/// First/second moment estimates per parameter name plus the step counter.
template <class T>
struct AdamState {
    struct Moments {
        Tensor<T> m;
        Tensor<T> v;
    };

    std::uint64_t step = 0;
    std::map<std::string, Moments> moments;

    Moments& slot(const std::string& name, const Shape& shape)
    {
        auto it = moments.find(name);
        if (it == moments.end())
            it = moments.emplace(name, Moments{Tensor<T>::zeros(shape), Tensor<T>::zeros(shape)}).first;
        if (!(it->second.m.shape() == shape))
            throw ShapeError("adam: moment shape mismatch for " + name);
        return it->second;
    }
};

/// One Adam update over every trainable entry of `params` using their gradient buffers:
///   m ← β₁m + (1-β₁)g,  v ← β₂v + (1-β₂)g²,  θ ← θ - lr·m̂/(√v̂ + ε)
/// with m̂ = m/(1-β₁ᵗ), v̂ = v/(1-β₂ᵗ). `lr` overrides cfg.lr (scheduled rate).
template <class T>
void adam_step(const ParameterStore<T>& params, AdamState<T>& state, const AdamConfig& cfg, double lr)
{
    if (checked_mode())
        for (const auto& p : params.entries())
            if (p.trainable && p.tensor.has_grad())
                for (T g : p.tensor.grad())
                    if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in " + p.name);

    state.step += 1;
    const auto t = static_cast<double>(state.step);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const T step_size = static_cast<T>(lr);
    const T eps = static_cast<T>(cfg.epsilon);
    for (const auto& p : params.entries()) {
        if (!p.trainable) continue;
        auto& slot = state.slot(p.name, p.tensor.shape());
        Tensor<T> param = p.tensor;
        auto theta = param.data();
        auto g = p.tensor.grad();
        auto m = slot.m.data();
        auto v = slot.v.data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = m[i] * c1;
            const T vhat = v[i] * c2;
            theta[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

} // namespace xnmoe
