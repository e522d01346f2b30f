#pragma once

#include "xnmoe/extractors.hpp"
#include "xnmoe/loss.hpp"
#include "xnmoe/moe.hpp"

#include <string>
#include <utility>
#include <vector>

namespace xnmoe {

/// Full architecture description. Profiles: "paper" (published sizes), "desk"
/// (reduced CNNFE1 kernels, small backbone) and "grad-check" (16×16 input, tiny
/// branches, for end-to-end finite-difference checks).
struct ModelConfig {
    std::string profile = "desk";
    std::size_t num_classes = 7;
    std::size_t input_size = 224;
    ExtractorSpec cnnfe1 = ExtractorSpec::cnnfe1_desk();
    ExtractorSpec cnnfe2 = ExtractorSpec::cnnfe2_desk();
    ResidualBackboneSpec backbone = ResidualBackboneSpec::desk();
    std::size_t fusion_width = 512;
    double fusion_dropout = 0.5;
    MoEConfig moe_a;
    MoEConfig moe_b;
    double label_smoothing = 0.1;
    double bn_momentum = BatchNormLayer<float>::kDefaultMomentum;

    static ModelConfig desk(std::size_t num_classes = 7)
    {
        ModelConfig c;
        c.num_classes = num_classes;
        return c;
    }

    static ModelConfig paper(std::size_t num_classes = 7)
    {
        ModelConfig c;
        c.profile = "paper";
        c.num_classes = num_classes;
        c.cnnfe1 = ExtractorSpec::cnnfe1_paper();
        c.cnnfe2 = ExtractorSpec::cnnfe2_paper();
        c.backbone = ResidualBackboneSpec::paper();
        return c;
    }

    static ModelConfig grad_check(std::size_t num_classes = 3)
    {
        ModelConfig c;
        c.profile = "grad-check";
        c.num_classes = num_classes;
        c.input_size = 16;
        c.cnnfe1 = ExtractorSpec{ExtractorSpec::make_stages({3, 2}, {2, 3}, 0.1, false),
                                 ExtractorHead::flatten_dense, 6, 0.5};
        c.cnnfe2 = ExtractorSpec{ExtractorSpec::make_stages({3, 3}, {2, 4}, 0.1, true), ExtractorHead::gap, 0, 0.0};
        c.backbone = ResidualBackboneSpec{{1, 1}, 2, 3, 0.5};
        c.fusion_width = 6;
        return c;
    }

    static ModelConfig from_profile(const std::string& name, std::size_t num_classes)
    {
        if (name == "desk") return desk(num_classes);
        if (name == "paper") return paper(num_classes);
        if (name == "grad-check") return grad_check(num_classes);
        throw ConfigError("unknown model profile '" + name + "' (expected paper, desk or grad-check)");
    }

    void validate() const
    {
        if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
        if (input_size < 1) throw ConfigError("model: input_size must be positive");
        if (fusion_width == 0) throw ConfigError("model: fusion_width must be positive");
        if (!(fusion_dropout >= 0.0 && fusion_dropout < 1.0)) throw ConfigError("model: fusion dropout must lie in [0, 1)");
        if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw ConfigError("model: bn_momentum must lie in (0, 1)");
        if (!(label_smoothing >= 0.0 && label_smoothing < 0.5))
            throw ConfigError("model: label_smoothing must lie in [0, 0.5)");
        cnnfe1.validate(ExtractorHead::flatten_dense, "cnnfe1");
        cnnfe2.validate(ExtractorHead::gap, "cnnfe2");
    }
};

/// Output of a traced forward pass: probabilities plus the MoE routing decisions.
template <class T>
struct ModelTrace {
    Tensor<T> output;
    Selection selection_a;
    Selection selection_b;
    Tensor<T> gate_a;
    Tensor<T> gate_b;
};

struct ParameterCounts {
    std::vector<std::pair<std::string, std::size_t>> components;
    std::size_t total = 0;
};

/// Three parallel extractors, fusion dense layer, two MoE sites and a softmax head.
///
///   f1  = cnnfe1(x)
///   f2  = dropout(relu(dense(concat(cnnfe2(x), backbone(x)))))
///   out = softmax(dense(concat(moe_a(f1), moe_b(f2))))
template <class T>
class ExpressNetModel {
public:
    ExpressNetModel(ModelConfig cfg, std::uint64_t seed)
        : ExpressNetModel(prepare(std::move(cfg)), Rng(seed))
    {}

    const ModelConfig& config() const noexcept { return cfg_; }

    ModelTrace<T> forward_trace(const Tensor<T>& x, Context<T>& ctx)
    {
        check_input(x.shape());
        auto f1 = cnnfe1_.forward(x, ctx);
        auto f2a = cnnfe2_.forward(x, ctx);
        auto f2b = backbone_.forward(x, ctx);
        auto fused = fusion_dropout_.forward(fusion_.forward(concat(f2a, f2b, ctx.tape), ctx), ctx);
        auto ta = moe_a_.forward_trace(f1, ctx, cfg_.moe_a.top_k);
        auto tb = moe_b_.forward_trace(fused, ctx, cfg_.moe_b.top_k);
        auto out = head_.forward(concat(ta.output, tb.output, ctx.tape), ctx);
        return ModelTrace<T>{out, std::move(ta.selection), std::move(tb.selection), ta.probabilities,
                             tb.probabilities};
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) { return forward_trace(x, ctx).output; }

    /// Every parameter and buffer, names prefixed by component.
    ParameterStore<T> parameters() const
    {
        ParameterStore<T> store;
        cnnfe1_.collect(store, "");
        cnnfe2_.collect(store, "");
        backbone_.collect(store, "");
        fusion_.collect(store, "");
        moe_a_.collect(store, "");
        moe_b_.collect(store, "");
        head_.collect(store, "");
        return store;
    }

    ParameterCounts count_parameters() const
    {
        ParameterCounts counts;
        auto add = [&](const std::string& name, const Layer<T>& layer) {
            ParameterStore<T> s;
            layer.collect(s, "");
            counts.components.emplace_back(name, s.trainable_count());
            counts.total += s.trainable_count();
        };
        add("cnnfe1", cnnfe1_);
        add("cnnfe2", cnnfe2_);
        add("backbone", backbone_);
        add("fusion", fusion_);
        add("moe_a", moe_a_);
        add("moe_b", moe_b_);
        add("head", head_);
        return counts;
    }

    /// Layer-by-layer table for a batch of one.
    std::vector<LayerInfo> summary() const
    {
        const Shape in{1, cfg_.input_size, cfg_.input_size, 3};
        std::vector<LayerInfo> rows;
        cnnfe1_.summarize(in, "", rows);
        cnnfe2_.summarize(in, "", rows);
        backbone_.summarize(in, "", rows);
        const Shape f1 = cnnfe1_.output_shape(in);
        const Shape f2 = Shape{1, cnnfe2_.output_shape(in)[1] + backbone_.output_shape(in)[1]};
        fusion_.summarize(f2, "", rows);
        fusion_dropout_.summarize(fusion_.output_shape(f2), "", rows);
        const Shape fa = moe_a_.output_shape(f1);
        const Shape fb = moe_b_.output_shape(fusion_.output_shape(f2));
        moe_a_.summarize(f1, "", rows);
        moe_b_.summarize(fusion_.output_shape(f2), "", rows);
        head_.summarize(Shape{1, fa[1] + fb[1]}, "", rows);
        return rows;
    }

    Sequential<T>& cnnfe1() noexcept { return cnnfe1_; }
    Sequential<T>& cnnfe2() noexcept { return cnnfe2_; }
    Sequential<T>& backbone() noexcept { return backbone_; }
    DenseLayer<T>& fusion() noexcept { return fusion_; }
    MoELayer<T>& moe_a() noexcept { return moe_a_; }
    MoELayer<T>& moe_b() noexcept { return moe_b_; }
    DenseLayer<T>& head() noexcept { return head_; }

private:
    static ModelConfig prepare(ModelConfig cfg)
    {
        cfg.validate();
        cfg.moe_a.input_dim = cfg.cnnfe1.dense_width;
        cfg.moe_b.input_dim = cfg.fusion_width;
        cfg.moe_a.validate();
        cfg.moe_b.validate();
        return cfg;
    }

    ExpressNetModel(ModelConfig cfg, Rng rng)
        : cfg_(std::move(cfg)),
          cnnfe1_(build_cnnfe1<T>(cfg_.cnnfe1, rng, cfg_.input_size)),
          cnnfe2_(build_cnnfe2<T>(cfg_.cnnfe2, rng)),
          backbone_(build_backbone<T>(cfg_.backbone, rng)),
          fusion_("fusion", cfg_.cnnfe2.stages.back().filters + cfg_.backbone.output_width(), cfg_.fusion_width,
                  Activation::relu, rng),
          fusion_dropout_("fusion_dropout", cfg_.fusion_dropout),
          moe_a_("moe_a", cfg_.moe_a, rng),
          moe_b_("moe_b", cfg_.moe_b, rng),
          head_("head", cfg_.moe_a.resolved_expert_dim() + cfg_.moe_b.resolved_expert_dim(), cfg_.num_classes,
                Activation::softmax, rng)
    {
        cnnfe1_.set_bn_momentum(cfg_.bn_momentum);
        cnnfe2_.set_bn_momentum(cfg_.bn_momentum);
        backbone_.set_bn_momentum(cfg_.bn_momentum);
    }

    void check_input(const Shape& s) const
    {
        if (s.rank() != 4 || s[1] != cfg_.input_size || s[2] != cfg_.input_size || s[3] != 3)
            throw ShapeError("model input must be N×" + std::to_string(cfg_.input_size) + "×"
                             + std::to_string(cfg_.input_size) + "×3, got " + s.str());
    }

    ModelConfig cfg_;
    Sequential<T> cnnfe1_;
    Sequential<T> cnnfe2_;
    Sequential<T> backbone_;
    DenseLayer<T> fusion_;
    DropoutLayer<T> fusion_dropout_;
    MoELayer<T> moe_a_;
    MoELayer<T> moe_b_;
    DenseLayer<T> head_;
};

} // namespace xnmoe
