#pragma once

#include "xnmoe/layers.hpp"

#include <string>
#include <vector>

namespace xnmoe {

enum class ExtractorHead { flatten_dense, gap };

/// Convolutional feature extractor layout: a stack of
/// conv(same, ReLU) → dropout → batchnorm → [maxpool 2×2] stages plus a head.
struct ExtractorSpec {
    struct Stage {
        std::size_t kernel = 3;
        std::size_t filters = 8;
        double dropout = 0.1;
        bool pool = true;
    };

    std::vector<Stage> stages;
    ExtractorHead head = ExtractorHead::gap;
    std::size_t dense_width = 512;
    double head_dropout = 0.5;

    /// Stages from parallel kernel/filter lists; every stage pools unless `pool_last` is false.
    static std::vector<Stage> make_stages(const std::vector<std::size_t>& kernels,
                                          const std::vector<std::size_t>& filters, double dropout,
                                          bool pool_last)
    {
        if (kernels.size() != filters.size())
            throw ConfigError("extractor: kernel and filter lists must have equal length");
        std::vector<Stage> stages;
        for (std::size_t i = 0; i < kernels.size(); ++i)
            stages.push_back(Stage{kernels[i], filters[i], dropout, pool_last || i + 1 < kernels.size()});
        return stages;
    }

    /// 75,50,25,15,9,3 kernels with 8..256 filters; pool on all but the last stage;
    /// flatten → dense 512 (ReLU) → dropout 0.5.
    static ExtractorSpec cnnfe1_paper()
    {
        return ExtractorSpec{make_stages({75, 50, 25, 15, 9, 3}, {8, 16, 32, 64, 128, 256}, 0.1, false),
                             ExtractorHead::flatten_dense, 512, 0.5};
    }

    /// Same stage/filter structure with kernels 9,7,5,3,3,3.
    static ExtractorSpec cnnfe1_desk()
    {
        return ExtractorSpec{make_stages({9, 7, 5, 3, 3, 3}, {8, 16, 32, 64, 128, 256}, 0.1, false),
                             ExtractorHead::flatten_dense, 512, 0.5};
    }

    /// 15,7,5,3,3 kernels with 16..256 filters, every stage pooled, then GAP.
    static ExtractorSpec cnnfe2_paper()
    {
        return ExtractorSpec{make_stages({15, 7, 5, 3, 3}, {16, 32, 64, 128, 256}, 0.1, true),
                             ExtractorHead::gap, 0, 0.0};
    }

    static ExtractorSpec cnnfe2_desk() { return cnnfe2_paper(); }

    void validate(ExtractorHead expected, const char* what) const
    {
        if (stages.empty()) throw ConfigError(std::string(what) + ": profile has no stages");
        if (head != expected) throw ConfigError(std::string(what) + ": profile has the wrong head type");
        for (const auto& s : stages) {
            if (s.kernel == 0 || s.filters == 0)
                throw ConfigError(std::string(what) + ": kernel sizes and filter counts must be positive");
            if (!(s.dropout >= 0.0 && s.dropout < 1.0))
                throw ConfigError(std::string(what) + ": dropout rates must lie in [0, 1)");
        }
        if (head == ExtractorHead::flatten_dense && dense_width == 0)
            throw ConfigError(std::string(what) + ": dense width must be positive");
        if (!(head_dropout >= 0.0 && head_dropout < 1.0))
            throw ConfigError(std::string(what) + ": head dropout must lie in [0, 1)");
    }
};

/// Residual stand-in for the pretrained backbone: stem conv/BN/ReLU/maxpool, then
/// stages of residual blocks (stage i has base·2^i filters; every stage after the
/// first opens with a stride-2 projection block), then GAP → dropout.
struct ResidualBackboneSpec {
    std::vector<std::size_t> blocks_per_stage{1, 1};
    std::size_t base_filters = 16;
    std::size_t stem_kernel = 7;
    double head_dropout = 0.5;

    static ResidualBackboneSpec desk() { return ResidualBackboneSpec{}; }
    static ResidualBackboneSpec paper() { return ResidualBackboneSpec{{3, 4, 6, 3}, 64, 7, 0.5}; }

    std::size_t output_width() const
    {
        return base_filters << (blocks_per_stage.empty() ? 0 : blocks_per_stage.size() - 1);
    }
};

namespace detail {

template <class T>
void add_stages(Sequential<T>& branch, const ExtractorSpec& spec, std::size_t in_channels, Rng& rng)
{
    std::size_t channels = in_channels;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        const auto& st = spec.stages[i];
        const std::string p = "stage" + std::to_string(i) + "_";
        branch.template emplace<Conv2DLayer<T>>(p + "conv", st.kernel, channels, st.filters, Activation::relu, rng);
        branch.template emplace<DropoutLayer<T>>(p + "dropout", st.dropout);
        branch.template emplace<BatchNormLayer<T>>(p + "bn", st.filters);
        if (st.pool) branch.template emplace<MaxPoolLayer<T>>(p + "pool");
        channels = st.filters;
    }
}

} // namespace detail

/// First convolutional branch: large-to-small kernels, flatten, dense head.
template <class T>
Sequential<T> build_cnnfe1(const ExtractorSpec& spec, Rng& rng, std::size_t input_size = 224,
                           std::size_t in_channels = 3)
{
    spec.validate(ExtractorHead::flatten_dense, "cnnfe1");
    Sequential<T> branch("cnnfe1");
    detail::add_stages(branch, spec, in_channels, rng);
    const Shape features = branch.output_shape(Shape{1, input_size, input_size, in_channels});
    branch.template emplace<FlattenLayer<T>>("flatten");
    branch.template emplace<DenseLayer<T>>("dense", features.numel(), spec.dense_width, Activation::relu, rng);
    branch.template emplace<DropoutLayer<T>>("dense_dropout", spec.head_dropout);
    return branch;
}

/// Second convolutional branch: every stage pooled, global average pooling head.
template <class T>
Sequential<T> build_cnnfe2(const ExtractorSpec& spec, Rng& rng, std::size_t in_channels = 3)
{
    spec.validate(ExtractorHead::gap, "cnnfe2");
    Sequential<T> branch("cnnfe2");
    detail::add_stages(branch, spec, in_channels, rng);
    branch.template emplace<GlobalAvgPoolLayer<T>>("gap");
    return branch;
}

template <class T>
Sequential<T> build_backbone(const ResidualBackboneSpec& spec, Rng& rng, std::size_t in_channels = 3)
{
    if (spec.blocks_per_stage.empty()) throw ConfigError("backbone: blocks_per_stage must be non-empty");
    if (spec.base_filters == 0 || spec.stem_kernel == 0)
        throw ConfigError("backbone: base filters and stem kernel must be positive");
    for (auto b : spec.blocks_per_stage)
        if (b == 0) throw ConfigError("backbone: every stage needs at least one block");
    Sequential<T> branch("backbone");
    branch.template emplace<Conv2DLayer<T>>("stem_conv", spec.stem_kernel, in_channels, spec.base_filters,
                                            Activation::none, rng, 2);
    branch.template emplace<BatchNormLayer<T>>("stem_bn", spec.base_filters);
    branch.template emplace<ReluLayer<T>>("stem_relu");
    branch.template emplace<MaxPoolLayer<T>>("stem_pool");
    std::size_t channels = spec.base_filters;
    for (std::size_t s = 0; s < spec.blocks_per_stage.size(); ++s) {
        const std::size_t filters = spec.base_filters << s;
        for (std::size_t b = 0; b < spec.blocks_per_stage[s]; ++b) {
            const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
            branch.template emplace<ResidualBlock<T>>(
                "stage" + std::to_string(s) + "_block" + std::to_string(b), channels, filters, stride, rng);
            channels = filters;
        }
    }
    branch.template emplace<GlobalAvgPoolLayer<T>>("gap");
    branch.template emplace<DropoutLayer<T>>("dropout", spec.head_dropout);
    return branch;
}

} // namespace xnmoe
