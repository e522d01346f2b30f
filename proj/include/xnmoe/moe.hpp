#pragma once

// Mixture-of-experts layer with top-k gating.
//
//   h      = input_dense(x)                (no activation)
//   p      = softmax(gate(h))              one distribution over experts per row
//   E_e    = relu(expert_e(h))
//   out[n] = Σ_{e ∈ TopK(p[n], k)} w[n,e] · E_e[n]
//
// w is the raw gate probability (selected weights need not sum to 1). With
// `renormalize` set, w[n,e] = p[n,e] / Σ_{TopK} p[n,·] instead. Selection is a hard
// choice: gradients reach the gate only through the probabilities of selected experts.

#include "xnmoe/layers.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace xnmoe {

struct MoEConfig {
    std::size_t input_dim = 512;
    std::size_t num_experts = 4;
    std::size_t top_k = 2;
    /// 0 means "same as input_dim".
    std::size_t expert_dim = 0;
    bool renormalize = false;

    std::size_t resolved_expert_dim() const noexcept { return expert_dim == 0 ? input_dim : expert_dim; }

    void validate() const
    {
        if (input_dim == 0) throw ConfigError("moe: input_dim must be positive");
        if (num_experts == 0) throw ConfigError("moe: num_experts must be positive");
        if (top_k < 1 || top_k > num_experts)
            throw ConfigError("moe: top_k must lie in [1, num_experts], got " + std::to_string(top_k));
    }
};

/// Indices of the k largest entries, largest first; equal values prefer the lower index.
template <class T>
std::vector<std::size_t> top_k_indices(std::span<const T> p, std::size_t k)
{
    if (k < 1 || k > p.size()) throw ShapeError("top_k: k out of range");
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
    idx.resize(k);
    return idx;
}

/// Per-row expert selection, each list ordered by decreasing probability.
using Selection = std::vector<std::vector<std::size_t>>;

template <class T>
Selection select_top_k(const Tensor<T>& probabilities, std::size_t k)
{
    detail::require_rank(probabilities.shape(), 2, "select_top_k");
    const std::size_t N = probabilities.dim(0), E = probabilities.dim(1);
    Selection sel(N);
    for (std::size_t n = 0; n < N; ++n) {
        sel[n] = top_k_indices<T>(probabilities.data().subspan(n * E, E), k);
        for (auto e : sel[n]) note_routing(e);
    }
    return sel;
}

/// Gate-weighted combination of the selected experts' outputs.
/// probabilities: N×E; experts: E tensors of N×D. Non-selected experts are never read.
template <class T>
Tensor<T> top_k_combine(const Tensor<T>& probabilities, const std::vector<Tensor<T>>& experts,
                        const Selection& selection, bool renormalize, Tape<T>* tape = nullptr)
{
    detail::require_rank(probabilities.shape(), 2, "top_k_combine");
    const std::size_t N = probabilities.dim(0), E = probabilities.dim(1);
    if (experts.size() != E) throw ShapeError("top_k_combine: expert count must equal gate width");
    if (selection.size() != N) throw ShapeError("top_k_combine: selection must have one entry per row");
    const std::size_t D = experts.front().dim(1);
    for (const auto& ex : experts)
        if (ex.rank() != 2 || ex.dim(0) != N || ex.dim(1) != D)
            throw ShapeError("top_k_combine: all experts must be N×D");

    auto norm = std::make_shared<std::vector<T>>(N, T(1));
    if (renormalize)
        for (std::size_t n = 0; n < N; ++n) {
            T z = 0;
            for (auto e : selection[n]) z += probabilities[n * E + e];
            (*norm)[n] = z;
        }

    Tensor<T> out(Shape{N, D});
    for (std::size_t n = 0; n < N; ++n)
        for (auto e : selection[n]) {
            const T w = probabilities[n * E + e] / (*norm)[n];
            const T* src = experts[e].ptr() + n * D;
            T* dst = out.ptr() + n * D;
            for (std::size_t d = 0; d < D; ++d) dst[d] += w * src[d];
        }

    bool needs = probabilities.requires_grad();
    for (const auto& ex : experts) needs = needs || ex.requires_grad();
    detail::finish(tape, "top_k_combine", out, needs,
                   [probabilities, experts, selection, out, norm, renormalize, N, E, D]() mutable {
                       auto g = out.grad();
                       for (std::size_t n = 0; n < N; ++n) {
                           const T* gn = g.data() + n * D;
                           const T z = (*norm)[n];
                           for (auto e : selection[n]) {
                               const T* en = experts[e].ptr() + n * D;
                               if (experts[e].requires_grad()) {
                                   const T w = probabilities[n * E + e] / z;
                                   T* ge = experts[e].grad().data() + n * D;
                                   for (std::size_t d = 0; d < D; ++d) ge[d] += w * gn[d];
                               }
                               if (probabilities.requires_grad()) {
                                   T acc = 0;
                                   if (renormalize) {
                                       const T* on = out.ptr() + n * D;
                                       for (std::size_t d = 0; d < D; ++d) acc += gn[d] * (en[d] - on[d]);
                                   } else {
                                       for (std::size_t d = 0; d < D; ++d) acc += gn[d] * en[d];
                                   }
                                   probabilities.grad()[n * E + e] += acc / z;
                               }
                           }
                       }
                   });
    return out;
}

/// Diagnostics over gate probabilities.
struct RoutingReport {
    std::vector<double> frequency;        ///< fraction of rows selecting each expert
    std::vector<double> mean_probability; ///< mean gate probability per expert
    std::vector<double> selected_mass;    ///< per row: Σ of selected probabilities
};

template <class T>
RoutingReport routing_stats(const Tensor<T>& probabilities, std::size_t k)
{
    detail::require_rank(probabilities.shape(), 2, "routing_stats");
    const std::size_t N = probabilities.dim(0), E = probabilities.dim(1);
    RoutingReport r{std::vector<double>(E, 0.0), std::vector<double>(E, 0.0), std::vector<double>(N, 0.0)};
    const auto sel = select_top_k(probabilities, k);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t e = 0; e < E; ++e) r.mean_probability[e] += probabilities[n * E + e];
        for (auto e : sel[n]) {
            r.frequency[e] += 1.0;
            r.selected_mass[n] += probabilities[n * E + e];
        }
    }
    for (std::size_t e = 0; e < E; ++e) {
        r.frequency[e] /= static_cast<double>(N);
        r.mean_probability[e] /= static_cast<double>(N);
    }
    return r;
}

/// Intermediate values of one MoE forward pass.
template <class T>
struct MoETrace {
    Tensor<T> hidden;
    Tensor<T> probabilities;
    std::vector<Tensor<T>> expert_outputs;
    Selection selection;
    Tensor<T> output;
};

template <class T>
class MoELayer : public Layer<T> {
public:
    MoELayer(std::string name, const MoEConfig& cfg, Rng& rng)
        : Layer<T>(std::move(name)), cfg_((cfg.validate(), cfg)),
          input_dense_("input_dense", cfg.input_dim, cfg.input_dim, Activation::none, rng)
    {
        experts_.reserve(cfg.num_experts);
        for (std::size_t e = 0; e < cfg.num_experts; ++e)
            experts_.emplace_back("expert" + std::to_string(e), cfg.input_dim, cfg.resolved_expert_dim(),
                                  Activation::relu, rng);
        gate_.emplace("gate", cfg.input_dim, cfg.num_experts, Activation::none, rng);
    }

    MoETrace<T> forward_trace(const Tensor<T>& x, Context<T>& ctx, std::size_t k)
    {
        if (k < 1 || k > cfg_.num_experts)
            throw ShapeError(this->name() + ": k must lie in [1, " + std::to_string(cfg_.num_experts) + "]");
        MoETrace<T> t;
        t.hidden = input_dense_.forward(x, ctx);
        t.probabilities = softmax(gate_->forward(t.hidden, ctx), ctx.tape);
        for (auto& ex : experts_) t.expert_outputs.push_back(ex.forward(t.hidden, ctx));
        t.selection = select_top_k(t.probabilities, k);
        t.output = top_k_combine(t.probabilities, t.expert_outputs, t.selection, cfg_.renormalize, ctx.tape);
        return t;
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        auto t = forward_trace(x, ctx, cfg_.top_k);
        last_selection_ = std::move(t.selection);
        return t.output;
    }

    Shape output_shape(const Shape& in) const override
    {
        if (in.rank() != 2 || in[1] != cfg_.input_dim)
            throw ShapeError(this->name() + ": expected input width " + std::to_string(cfg_.input_dim));
        return Shape{in[0], cfg_.resolved_expert_dim()};
    }

    std::string describe() const override
    {
        return "moe " + std::to_string(cfg_.num_experts) + " experts, top-" + std::to_string(cfg_.top_k)
               + (cfg_.renormalize ? ", renormalized" : "");
    }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        const auto p = prefix + this->name() + "/";
        input_dense_.collect(store, p);
        for (const auto& ex : experts_) ex.collect(store, p);
        gate_->collect(store, p);
    }

    const MoEConfig& config() const noexcept { return cfg_; }
    DenseLayer<T>& input_dense() noexcept { return input_dense_; }
    DenseLayer<T>& expert(std::size_t e) { return experts_.at(e); }
    DenseLayer<T>& gate() noexcept { return *gate_; }
    /// Selection made by the most recent forward().
    const Selection& last_selection() const noexcept { return last_selection_; }

private:
    MoEConfig cfg_;
    DenseLayer<T> input_dense_;
    std::vector<DenseLayer<T>> experts_;
    std::optional<DenseLayer<T>> gate_;
    Selection last_selection_;
};

} // namespace xnmoe
