#pragma once

// Central finite-difference checks of every backward rule, in double precision.
//
//   numeric  = (L(θ + h) − L(θ − h)) / 2h
//   rel.err  = |analytic − numeric| / max(|analytic|, |numeric|, 1e-6)
//
// A probe whose ±h forward passes take a different ReLU side, pooling winner or
// expert selection than the unperturbed pass straddles a kink; it is skipped
// and counted instead of compared.

#include "xnmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace xnmoe {

struct GradCheckOptions {
    double h = 1e-4;
    double layer_threshold = 1e-4;
    double model_threshold = 1e-3;
    double denominator_floor = 1e-6;
    std::uint64_t seed = 7;
};

struct ComponentResult {
    std::string name;
    double max_rel_error = 0.0;
    double threshold = 0.0;
    std::size_t checked = 0;
    /// Probes skipped because an activation branch flipped.
    std::size_t kink_skips = 0;
    /// Probes skipped because an expert selection flipped.
    std::size_t routing_skips = 0;
    /// Parameter and element index of the largest error.
    std::string worst;

    bool passed() const { return checked > 0 && max_rel_error < threshold; }
    double severity() const { return max_rel_error / threshold; }
};

struct GradCheckReport {
    std::vector<ComponentResult> components;

    bool passed() const
    {
        return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed(); });
    }

    /// Component with the largest error relative to its threshold.
    const ComponentResult& worst() const
    {
        return *std::max_element(components.begin(), components.end(),
                                 [](const auto& a, const auto& b) { return a.severity() < b.severity(); });
    }

    std::size_t routing_skips() const
    {
        std::size_t n = 0;
        for (const auto& c : components) n += c.routing_skips;
        return n;
    }
};

using ScalarFn = std::function<Tensor<double>(Tape<double>*)>;
using NamedLeaf = std::pair<std::string, Tensor<double>>;

/// Compares analytic gradients of the scalar `f` w.r.t. every element of `leaves`
/// against central differences. `f` must be deterministic.
inline ComponentResult check_gradients(const std::string& name, const ScalarFn& f, const std::vector<NamedLeaf>& leaves,
                                       double threshold, const GradCheckOptions& opt = {})
{
    ComponentResult r;
    r.name = name;
    r.threshold = threshold;

    Tape<double> tape;
    std::uint64_t base_act = 0, base_route = 0;
    Tensor<double> loss;
    {
        DecisionRecorder rec;
        loss = f(&tape);
        base_act = rec.activation();
        base_route = rec.routing();
    }
    for (const auto& [n, t] : leaves) {
        t.ensure_grad();
        t.zero_grad();
    }
    backward(loss, tape);

    auto probe = [&](Tensor<double>& t, std::size_t i, double value, std::uint64_t& act, std::uint64_t& route) {
        t[i] = value;
        DecisionRecorder rec;
        const double v = f(nullptr).item();
        act = rec.activation();
        route = rec.routing();
        return v;
    };

    for (const auto& [leaf_name, leaf] : leaves) {
        Tensor<double> t = leaf;
        const auto analytic = t.grad_tensor();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double orig = t[i];
            std::uint64_t ap = 0, rp = 0, am = 0, rm = 0;
            const double lp = probe(t, i, orig + opt.h, ap, rp);
            const double lm = probe(t, i, orig - opt.h, am, rm);
            t[i] = orig;
            if (rp != base_route || rm != base_route) {
                ++r.routing_skips;
                continue;
            }
            if (ap != base_act || am != base_act) {
                ++r.kink_skips;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * opt.h);
            const double a = analytic[i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
            ++r.checked;
            if (r.worst.empty() || rel > r.max_rel_error) {
                r.max_rel_error = rel;
                r.worst = leaf_name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return r;
}

namespace detail {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor<double> t(std::move(s));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    t.set_requires_grad();
    return t;
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so every
/// output element receives a distinct upstream gradient.
inline ScalarFn projected(std::function<Tensor<double>(Tape<double>*)> f, const Shape& out_shape, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor<double> w(out_shape);
    for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
    return [f = std::move(f), w](Tape<double>* tape) { return sum(mul(f(tape), w, tape), tape); };
}

/// Randomizes every trainable tensor of a store (biases and BN affine terms start
/// at constants, which would hide errors in their gradients).
inline void jitter(const ParameterStore<double>& store, Rng& rng)
{
    for (const auto& e : store.entries()) {
        if (!e.trainable) continue;
        Tensor<double> t = e.tensor;
        const bool is_gamma = e.name.size() >= 5 && e.name.compare(e.name.size() - 5, 5, "gamma") == 0;
        for (auto& v : t.data()) v = is_gamma ? rng.uniform(0.5, 1.5) : v + rng.uniform(-0.2, 0.2);
    }
}

inline std::vector<NamedLeaf> leaves_of(const ParameterStore<double>& store)
{
    std::vector<NamedLeaf> out;
    for (const auto& e : store.entries())
        if (e.trainable) out.emplace_back(e.name, e.tensor);
    return out;
}

inline ComponentResult merge(std::string name, const std::vector<ComponentResult>& parts)
{
    ComponentResult r;
    r.name = std::move(name);
    r.threshold = parts.front().threshold;
    for (const auto& p : parts) {
        r.checked += p.checked;
        r.kink_skips += p.kink_skips;
        r.routing_skips += p.routing_skips;
        if (p.max_rel_error >= r.max_rel_error) {
            r.max_rel_error = p.max_rel_error;
            r.worst = p.worst;
        }
    }
    return r;
}

} // namespace detail

/// Per-op and per-layer suites at layer_threshold.
inline std::vector<ComponentResult> layer_gradient_suite(const GradCheckOptions& opt = {})
{
    using detail::projected;
    using detail::random_tensor;
    using T = double;
    Rng rng(opt.seed);
    const double thr = opt.layer_threshold;
    std::vector<ComponentResult> out;

    {
        // Geometries: odd/even kernels, same/valid padding, strides 1 and 2.
        struct Geo {
            std::size_t h, w, cin, cout, k, stride;
            Padding pad;
        };
        const std::vector<Geo> geos{{6, 5, 3, 5, 3, 1, Padding::same},
                                    {7, 6, 2, 3, 3, 2, Padding::valid},
                                    {6, 7, 3, 4, 4, 2, Padding::same},
                                    {5, 5, 17, 2, 1, 1, Padding::same}};
        std::vector<ComponentResult> parts;
        for (const auto& g : geos) {
            auto x = random_tensor(Shape{2, g.h, g.w, g.cin}, rng);
            auto k = random_tensor(Shape{g.k, g.k, g.cin, g.cout}, rng);
            auto b = random_tensor(Shape{g.cout}, rng);
            const auto os = conv2d_output_shape(x.shape(), g.k, g.k, g.cout, g.stride, g.pad);
            auto f = projected([=](Tape<T>* t) { return conv2d(x, k, b, g.stride, g.pad, t); }, os, rng.next());
            parts.push_back(check_gradients("conv2d", f, {{"x", x}, {"kernel", k}, {"bias", b}}, thr, opt));
        }
        out.push_back(detail::merge("conv2d", parts));
    }
    {
        auto x = random_tensor(Shape{3, 5}, rng);
        auto w = random_tensor(Shape{5, 4}, rng);
        auto b = random_tensor(Shape{4}, rng);
        auto f = projected([=](Tape<T>* t) { return add_bias(matmul(x, w, t), b, t); }, Shape{3, 4}, rng.next());
        out.push_back(check_gradients("dense", f, {{"x", x}, {"weight", w}, {"bias", b}}, thr, opt));
    }
    {
        auto x = random_tensor(Shape{2, 3, 3, 4}, rng, -2.0, 3.0);
        auto g = random_tensor(Shape{4}, rng, 0.5, 1.5);
        auto b = random_tensor(Shape{4}, rng);
        auto f = projected([=](Tape<T>* t) { return batchnorm_train<T>(x, g, b, T(1e-3), nullptr, t); }, x.shape(),
                           rng.next());
        auto r1 = check_gradients("batchnorm_train", f, {{"x", x}, {"gamma", g}, {"beta", b}}, thr, opt);
        auto x2 = random_tensor(Shape{6, 3}, rng);
        auto g2 = random_tensor(Shape{3}, rng, 0.5, 1.5);
        auto b2 = random_tensor(Shape{3}, rng);
        auto f2 = projected([=](Tape<T>* t) { return batchnorm_train<T>(x2, g2, b2, T(1e-3), nullptr, t); }, x2.shape(),
                            rng.next());
        auto r2 = check_gradients("batchnorm_train", f2, {{"x", x2}, {"gamma", g2}, {"beta", b2}}, thr, opt);
        out.push_back(detail::merge("batchnorm_train", {r1, r2}));
    }
    {
        auto x = random_tensor(Shape{2, 5, 4, 3}, rng);
        auto f = projected([=](Tape<T>* t) { return maxpool2d(x, t); }, Shape{2, 2, 2, 3}, rng.next());
        out.push_back(check_gradients("maxpool2d", f, {{"x", x}}, thr, opt));
    }
    {
        auto x = random_tensor(Shape{2, 3, 4, 5}, rng);
        auto f = projected([=](Tape<T>* t) { return global_average_pool(x, t); }, Shape{2, 5}, rng.next());
        out.push_back(check_gradients("global_average_pool", f, {{"x", x}}, thr, opt));
    }
    {
        auto x = random_tensor(Shape{4, 6}, rng);
        auto f = projected([=](Tape<T>* t) { return relu(x, t); }, x.shape(), rng.next());
        out.push_back(check_gradients("relu", f, {{"x", x}}, thr, opt));
    }
    {
        auto z = random_tensor(Shape{3, 5}, rng, -2.0, 2.0);
        auto f = projected([=](Tape<T>* t) { return softmax(z, t); }, z.shape(), rng.next());
        out.push_back(check_gradients("softmax", f, {{"z", z}}, thr, opt));
    }
    {
        auto a = random_tensor(Shape{3, 2}, rng);
        auto b = random_tensor(Shape{3, 4}, rng);
        auto f = projected([=](Tape<T>* t) { return concat(a, b, t); }, Shape{3, 6}, rng.next());
        out.push_back(check_gradients("concat", f, {{"a", a}, {"b", b}}, thr, opt));
    }
    {
        auto x = random_tensor(Shape{2, 3, 2, 4}, rng);
        auto f = projected([=](Tape<T>* t) { return flatten(x, t); }, Shape{2, 24}, rng.next());
        out.push_back(check_gradients("flatten", f, {{"x", x}}, thr, opt));
    }
    {
        auto x = random_tensor(Shape{4, 6}, rng);
        const std::uint64_t mask_seed = rng.next();
        auto f = projected(
            [=](Tape<T>* t) {
                Rng r(mask_seed);
                return dropout(x, 0.4, Mode::train, r, t);
            },
            x.shape(), rng.next());
        out.push_back(check_gradients("dropout", f, {{"x", x}}, thr, opt));
    }
    {
        auto z = random_tensor(Shape{4, 5}, rng, -2.0, 2.0);
        const auto target = one_hot<T>({0, 3, 4, 1}, 5);
        ScalarFn f = [=](Tape<T>* t) { return smoothed_cross_entropy(softmax(z, t), target, 0.1, t); };
        out.push_back(check_gradients("cross_entropy", f, {{"z", z}}, thr, opt));
    }
    {
        std::vector<ComponentResult> parts;
        for (bool renorm : {false, true})
            for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
                MoEConfig cfg;
                cfg.input_dim = 5;
                cfg.num_experts = 4;
                cfg.top_k = k;
                cfg.expert_dim = 3;
                cfg.renormalize = renorm;
                auto layer = std::make_shared<MoELayer<T>>("moe", cfg, rng);
                ParameterStore<T> store;
                layer->collect(store, "");
                detail::jitter(store, rng);
                auto x = random_tensor(Shape{4, 5}, rng);
                auto f = projected(
                    [=](Tape<T>* t) {
                        Context<T> ctx{Mode::train, nullptr, t, false};
                        return layer->forward(x, ctx);
                    },
                    Shape{4, 3}, rng.next());
                auto leaves = detail::leaves_of(store);
                leaves.emplace_back("x", x);
                parts.push_back(check_gradients("moe", f, leaves, thr, opt));
            }
        out.push_back(detail::merge("moe", parts));
    }
    {
        std::vector<ComponentResult> parts;
        for (auto [cin, cout, stride] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 3, 1}, {2, 4, 2}}) {
            auto block = std::make_shared<ResidualBlock<T>>("block", cin, cout, stride, rng);
            ParameterStore<T> store;
            block->collect(store, "");
            detail::jitter(store, rng);
            auto x = random_tensor(Shape{2, 6, 6, cin}, rng);
            const auto os = block->output_shape(x.shape());
            auto f = projected(
                [=](Tape<T>* t) {
                    Context<T> ctx{Mode::train, nullptr, t, false};
                    return block->forward(x, ctx);
                },
                os, rng.next());
            auto leaves = detail::leaves_of(store);
            leaves.emplace_back("x", x);
            parts.push_back(check_gradients("residual_block", f, leaves, thr, opt));
        }
        out.push_back(detail::merge("residual_block", parts));
    }
    return out;
}

/// Whole model at the grad-check profile: smoothed cross-entropy of a 2-sample batch,
/// train mode with fixed dropout masks and frozen running statistics.
inline ComponentResult model_gradient_check(const GradCheckOptions& opt = {}, std::size_t num_classes = 3)
{
    using T = double;
    auto model = std::make_shared<ExpressNetModel<T>>(ModelConfig::grad_check(num_classes), opt.seed);
    Rng rng = Rng::derive(opt.seed, 0x4743);
    const auto params = model->parameters();
    detail::jitter(params, rng);
    const std::size_t S = model->config().input_size;
    auto x = detail::random_tensor(Shape{2, S, S, 3}, rng, 0.0, 1.0);
    const auto target = one_hot<T>({0, num_classes - 1}, num_classes);
    const double smoothing = model->config().label_smoothing;
    const std::uint64_t mask_seed = rng.next();
    ScalarFn f = [=](Tape<T>* t) {
        Rng masks(mask_seed);
        Context<T> ctx{Mode::train, &masks, t, false};
        return smoothed_cross_entropy(model->forward(x, ctx), target, smoothing, t);
    };
    auto leaves = detail::leaves_of(params);
    leaves.emplace_back("input", x);
    return check_gradients("end_to_end", f, leaves, opt.model_threshold, opt);
}

inline GradCheckReport run_gradient_suite(const GradCheckOptions& opt = {})
{
    GradCheckReport rep;
    rep.components = layer_gradient_suite(opt);
    rep.components.push_back(model_gradient_check(opt));
    return rep;
}

} // namespace xnmoe
