#include "test_util.hpp"

using namespace xnmoe;
using namespace xt;

namespace {

MoEConfig config(std::size_t dim, std::size_t experts, std::size_t k, std::size_t expert_dim = 0,
                 bool renormalize = false)
{
    MoEConfig c;
    c.input_dim = dim;
    c.num_experts = experts;
    c.top_k = k;
    c.expert_dim = expert_dim;
    c.renormalize = renormalize;
    return c;
}

/// Randomises gate biases too, so routing is not dominated by zero biases.
void perturb_biases(MoELayer<double>& moe, Rng& rng)
{
    for (auto& v : moe.gate().bias().data()) v = rng.uniform(-0.5, 0.5);
    for (std::size_t e = 0; e < moe.config().num_experts; ++e)
        for (auto& v : moe.expert(e).bias().data()) v = rng.uniform(-0.2, 0.2);
}

/// Dense soft mixture Σ_e p_e·E_e built from plain ops, with no selection machinery.
TensorD soft_mixture(MoELayer<double>& moe, const TensorD& x, Tape<double>* tape)
{
    Context<double> ctx{Mode::infer, nullptr, tape, false};
    auto h = moe.input_dense().forward(x, ctx);
    auto p = softmax(moe.gate().forward(h, ctx), tape);
    TensorD out;
    for (std::size_t e = 0; e < moe.config().num_experts; ++e) {
        auto term = scale_rows(moe.expert(e).forward(h, ctx), select_column(p, e, tape), tape);
        out = out.defined() ? add(out, term, tape) : term;
    }
    return out;
}

std::vector<TensorD*> all_params(MoELayer<double>& moe)
{
    std::vector<TensorD*> out{&moe.input_dense().weight(), &moe.input_dense().bias(), &moe.gate().weight(),
                              &moe.gate().bias()};
    for (std::size_t e = 0; e < moe.config().num_experts; ++e) {
        out.push_back(&moe.expert(e).weight());
        out.push_back(&moe.expert(e).bias());
    }
    return out;
}

} // namespace

TEST(MoE, EnumerationOracle)
{
    Rng rng(1);
    MoELayer<double> moe("moe", config(6, 4, 2), rng);
    perturb_biases(moe, rng);
    auto x = random_d(Shape{5, 6}, rng);
    Context<double> ctx;
    auto t = moe.forward_trace(x, ctx, 2);
    for (std::size_t n = 0; n < 5; ++n) {
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t e = 0; e < 4; ++e) ranked.emplace_back(t.probabilities[n * 4 + e], e);
        std::sort(ranked.begin(), ranked.end(), [](auto a, auto b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
        for (std::size_t d = 0; d < 6; ++d) {
            double s = 0;
            for (std::size_t r = 0; r < 2; ++r) s += ranked[r].first * t.expert_outputs[ranked[r].second][n * 6 + d];
            EXPECT_NEAR(t.output[n * 6 + d], s, 1e-14);
        }
    }
}

TEST(MoE, SparsityNonSelectedExpertsDoNotContribute)
{
    Rng rng(2);
    MoELayer<double> moe("moe", config(5, 4, 2), rng);
    perturb_biases(moe, rng);
    Context<double> ctx;
    for (std::size_t k = 1; k <= 4; ++k) {
        auto t = moe.forward_trace(random_d(Shape{6, 5}, rng), ctx, k);
        for (std::size_t n = 0; n < 6; ++n) EXPECT_EQ(t.selection[n].size(), k);
        auto zeroed = t.expert_outputs;
        for (auto& e : zeroed) e = e.clone();
        for (std::size_t n = 0; n < 6; ++n)
            for (std::size_t e = 0; e < 4; ++e)
                if (std::find(t.selection[n].begin(), t.selection[n].end(), e) == t.selection[n].end())
                    for (std::size_t d = 0; d < 5; ++d) zeroed[e][n * 5 + d] = 0.0;
        auto again = top_k_combine(t.probabilities, zeroed, t.selection, false);
        for (std::size_t i = 0; i < again.numel(); ++i) EXPECT_EQ(again[i], t.output[i]);
    }
}

TEST(MoE, FullSelectionEqualsSoftMixtureOutputsAndGradients)
{
    Rng rng(3);
    MoELayer<double> moe("moe", config(5, 4, 4), rng);
    perturb_biases(moe, rng);
    auto x = random_d(Shape{3, 5}, rng).set_requires_grad();
    auto w = random_d(Shape{3, 5}, rng);
    auto params = all_params(moe);

    Tape<double> t1;
    Context<double> ctx{Mode::infer, nullptr, &t1, false};
    auto y1 = moe.forward(x, ctx);
    backward(sum(mul(y1, w, &t1), &t1), t1);
    std::vector<std::vector<double>> g1;
    for (auto* p : params) g1.emplace_back(p->grad().begin(), p->grad().end());
    std::vector<double> gx1(x.grad().begin(), x.grad().end());
    for (auto* p : params) p->zero_grad();
    x.zero_grad();

    Tape<double> t2;
    auto y2 = soft_mixture(moe, x, &t2);
    backward(sum(mul(y2, w, &t2), &t2), t2);
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_LT(rel_err(y1[i], y2[i]), 1e-6);
    for (std::size_t j = 0; j < params.size(); ++j)
        EXPECT_LT(max_rel_err(params[j]->grad(), g1[j]), 1e-6) << j;
    EXPECT_LT(max_rel_err(x.grad(), gx1), 1e-6);
}

TEST(MoE, DegenerateGateSelectsFirstExpert)
{
    Rng rng(4);
    MoELayer<double> moe("moe", config(4, 4, 2), rng);
    for (auto& v : moe.gate().weight().data()) v = 0;
    moe.gate().bias().assign(std::vector<double>{50, -50, -50, -50});
    auto x = random_d(Shape{3, 4}, rng);
    Context<double> ctx;
    auto t = moe.forward_trace(x, ctx, 2);
    for (std::size_t i = 0; i < t.output.numel(); ++i) EXPECT_NEAR(t.output[i], t.expert_outputs[0][i], 1e-6);
}

TEST(MoE, ExpertPermutationInvariance)
{
    Rng rng(5);
    MoELayer<double> a("moe", config(5, 4, 2), rng);
    perturb_biases(a, rng);
    MoELayer<double> b("moe", config(5, 4, 2), rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    b.input_dense().weight().assign(a.input_dense().weight().data());
    b.input_dense().bias().assign(a.input_dense().bias().data());
    for (std::size_t e = 0; e < 4; ++e) {
        b.expert(e).weight().assign(a.expert(perm[e]).weight().data());
        b.expert(e).bias().assign(a.expert(perm[e]).bias().data());
        for (std::size_t i = 0; i < 5; ++i) b.gate().weight()[i * 4 + e] = a.gate().weight()[i * 4 + perm[e]];
        b.gate().bias()[e] = a.gate().bias()[perm[e]];
    }
    auto x = random_d(Shape{8, 5}, rng);
    Context<double> ctx;
    auto ya = a.forward(x, ctx), yb = b.forward(x, ctx);
    for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_NEAR(ya[i], yb[i], 1e-6);
}

TEST(MoE, TieBreakingPrefersLowerIndex)
{
    const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
    EXPECT_EQ(top_k_indices<double>(uniform, 2), (std::vector<std::size_t>{0, 1}));
    const std::vector<double> p{0.1, 0.4, 0.4, 0.1};
    EXPECT_EQ(top_k_indices<double>(p, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(top_k_indices<double>(p, 3), (std::vector<std::size_t>{1, 2, 0}));
    for (int i = 0; i < 10; ++i) EXPECT_EQ(top_k_indices<double>(p, 3), (std::vector<std::size_t>{1, 2, 0}));
}

TEST(MoE, NonSelectedExpertGradientIsExactlyZero)
{
    Rng rng(6);
    MoELayer<double> moe("moe", config(5, 4, 2), rng);
    perturb_biases(moe, rng);
    auto x = random_d(Shape{1, 5}, rng);
    Tape<double> tape;
    Context<double> ctx{Mode::infer, nullptr, &tape, false};
    auto t = moe.forward_trace(x, ctx, 2);
    backward(sum(mul(t.output, random_d(t.output.shape(), rng), &tape), &tape), tape);
    const auto& sel = t.selection[0];
    for (std::size_t e = 0; e < 4; ++e) {
        double norm = 0;
        for (double g : moe.expert(e).weight().grad()) norm += g * g;
        for (double g : moe.expert(e).bias().grad()) norm += g * g;
        if (std::find(sel.begin(), sel.end(), e) == sel.end()) EXPECT_EQ(norm, 0.0) << e;
        else EXPECT_GT(norm, 0.0) << e;
    }
}

TEST(MoE, FiniteDifferencesWithStableSelection)
{
    for (bool renorm : {false, true}) {
        Rng rng(7);
        MoELayer<double> moe("moe", config(4, 4, 2, 3, renorm), rng);
        perturb_biases(moe, rng);
        auto x = random_d(Shape{3, 4}, rng).set_requires_grad();
        auto w = random_d(Shape{3, 3}, rng);
        auto f = [&](Tape<double>* t) {
            Context<double> ctx{Mode::infer, nullptr, t, false};
            return sum(mul(moe.forward(x, ctx), w, t), t);
        };
        Tape<double> tape;
        backward(f(&tape), tape);
        std::size_t checked = 0;
        double worst = 0;
        for (TensorD* p : [&] { auto v = all_params(moe); v.push_back(&x); return v; }()) {
            for (std::size_t i = 0; i < p->numel(); ++i) {
                const double keep = (*p)[i];
                std::uint64_t h0 = 0, h1 = 0, h2 = 0, a0 = 0, a1 = 0, a2 = 0;
                double up = 0, down = 0;
                {
                    DecisionRecorder r;
                    f(nullptr);
                    h0 = r.routing();
                    a0 = r.activation();
                }
                (*p)[i] = keep + 1e-4;
                {
                    DecisionRecorder r;
                    up = f(nullptr).item();
                    h1 = r.routing();
                    a1 = r.activation();
                }
                (*p)[i] = keep - 1e-4;
                {
                    DecisionRecorder r;
                    down = f(nullptr).item();
                    h2 = r.routing();
                    a2 = r.activation();
                }
                (*p)[i] = keep;
                if (h0 != h1 || h0 != h2 || a0 != a1 || a0 != a2) continue;
                worst = std::max(worst, rel_err(p->grad()[i], (up - down) / 2e-4));
                ++checked;
            }
        }
        EXPECT_GT(checked, 50u);
        EXPECT_LT(worst, 1e-4) << "renormalize=" << renorm;
    }
}

TEST(MoE, RenormalizedWeightsSumToOne)
{
    Rng rng(8);
    MoELayer<double> moe("moe", config(4, 4, 2, 0, true), rng);
    for (std::size_t e = 1; e < 4; ++e) {
        moe.expert(e).weight().assign(moe.expert(0).weight().data());
        moe.expert(e).bias().assign(moe.expert(0).bias().data());
    }
    Context<double> ctx;
    auto t = moe.forward_trace(random_d(Shape{4, 4}, rng), ctx, 2);
    for (std::size_t i = 0; i < t.output.numel(); ++i) EXPECT_NEAR(t.output[i], t.expert_outputs[0][i], 1e-12);
}

TEST(MoE, RoutingStats)
{
    auto r = routing_stats(TensorD(Shape{3, 4}, 0.25), 2);
    for (double m : r.selected_mass) EXPECT_EQ(m, 0.5);

    TensorD onehot(Shape{5, 4});
    for (std::size_t n = 0; n < 5; ++n) onehot[n * 4 + 2] = 1.0;
    auto o = routing_stats(onehot, 1);
    EXPECT_EQ(o.frequency, (std::vector<double>{0, 0, 1, 0}));

    Rng rng(9);
    const std::size_t N = 10000, E = 4, k = 2;
    auto p = softmax(random_d(Shape{N, E}, rng, -3, 3));
    auto s = routing_stats(p, k);
    double total = 0;
    for (double f : s.frequency) total += f;
    EXPECT_NEAR(total, static_cast<double>(k), 1e-9);
    std::vector<std::size_t> count(E, 0);
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> row(p.data().begin() + n * E, p.data().begin() + (n + 1) * E);
        std::vector<double> sorted = row;
        std::sort(sorted.rbegin(), sorted.rend());
        EXPECT_NEAR(s.selected_mass[n], sorted[0] + sorted[1], 1e-12);
        EXPECT_GE(s.selected_mass[n], static_cast<double>(k) / E - 1e-12);
        EXPECT_LE(s.selected_mass[n], 1.0 + 1e-12);
        for (auto e : top_k_indices<double>(row, k)) ++count[e];
    }
    for (std::size_t e = 0; e < E; ++e) EXPECT_EQ(s.frequency[e], static_cast<double>(count[e]) / N);
}

TEST(MoE, ConfigValidation)
{
    EXPECT_THROW(config(4, 4, 5).validate(), ConfigError);
    EXPECT_THROW(config(4, 4, 0).validate(), ConfigError);
    Rng rng(0);
    MoELayer<double> moe("moe", config(4, 4, 2), rng);
    Context<double> ctx;
    EXPECT_THROW(moe.forward_trace(TensorD(Shape{1, 4}), ctx, 5), ShapeError);
    EXPECT_THROW(moe.forward(TensorD(Shape{1, 3}), ctx), ShapeError);
}
