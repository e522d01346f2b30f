#pragma once

#include "xnmoe/functional.hpp"
#include "xnmoe/parameters.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace xnmoe {

/// Per-call execution state threaded through every layer.
template <class T>
struct Context {
    Mode mode = Mode::infer;
    Rng* rng = nullptr;
    Tape<T>* tape = nullptr;
    /// Batch-norm running statistics are updated in train mode only when set.
    bool update_running_stats = true;

    Rng& random() const
    {
        if (!rng) throw Error("train-mode forward requires a random source");
        return *rng;
    }
};

/// One row of a model summary table.
struct LayerInfo {
    std::string name;
    std::string description;
    Shape output;
    std::size_t params = 0;
};

enum class Activation { none, relu, softmax };

inline std::string to_string(Activation a)
{
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::softmax: return "softmax";
    default: return "none";
    }
}

template <class T>
class Layer {
public:
    explicit Layer(std::string name) : name_(std::move(name)) {}
    virtual ~Layer() = default;

    virtual Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) = 0;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual std::string describe() const = 0;
    /// Registers parameters and buffers under `prefix + name() + "/"`.
    virtual void collect(ParameterStore<T>&, const std::string&) const {}
    /// Sets the running-statistics momentum of every batch norm inside this layer.
    virtual void set_bn_momentum(double) {}

    /// Appends summary rows; composite layers expand into their children.
    virtual void summarize(const Shape& in, const std::string& prefix, std::vector<LayerInfo>& rows) const
    {
        ParameterStore<T> store;
        collect(store, "");
        rows.push_back(LayerInfo{prefix + name_, describe(), output_shape(in), store.trainable_count()});
    }

    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

namespace init {

/// Uniform(-limit, limit) fill drawn in double precision so float and double
/// models built from the same seed agree up to rounding.
template <class T>
Tensor<T> uniform(Shape shape, double limit, Rng& rng)
{
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
    return t;
}

inline double he_uniform_limit(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

inline double glorot_uniform_limit(std::size_t fan_in, std::size_t fan_out)
{
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

} // namespace init

template <class T>
class Conv2DLayer : public Layer<T> {
public:
    Conv2DLayer(std::string name, std::size_t kernel_size, std::size_t cin, std::size_t cout,
                Activation activation, Rng& rng, std::size_t stride = 1, Padding padding = Padding::same)
        : Layer<T>(std::move(name)), stride_(stride), padding_(padding), activation_(activation)
    {
        if (kernel_size == 0 || cin == 0 || cout == 0 || stride == 0)
            throw ShapeError("conv2d layer: kernel, channels and stride must be positive");
        const std::size_t fan_in = kernel_size * kernel_size * cin;
        const std::size_t fan_out = kernel_size * kernel_size * cout;
        const double limit = activation == Activation::relu ? init::he_uniform_limit(fan_in)
                                                            : init::glorot_uniform_limit(fan_in, fan_out);
        kernel_ = init::uniform<T>(Shape{kernel_size, kernel_size, cin, cout}, limit, rng).set_requires_grad();
        bias_ = Tensor<T>::zeros(Shape{cout}).set_requires_grad();
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        auto y = conv2d(x, kernel_, bias_, stride_, padding_, ctx.tape);
        return activation_ == Activation::relu ? relu(y, ctx.tape) : y;
    }

    Shape output_shape(const Shape& in) const override
    {
        if (in.rank() == 4 && in[3] != kernel_.dim(2))
            throw ShapeError(this->name() + ": channel mismatch");
        return conv2d_output_shape(in, kernel_.dim(0), kernel_.dim(1), kernel_.dim(3), stride_, padding_);
    }

    std::string describe() const override
    {
        const auto k = std::to_string(kernel_.dim(0));
        std::string d = "conv2d " + k + "x" + k + ", " + std::to_string(kernel_.dim(3)) + " filters";
        if (stride_ != 1) d += ", stride " + std::to_string(stride_);
        d += padding_ == Padding::same ? ", same" : ", valid";
        if (activation_ != Activation::none) d += ", " + to_string(activation_);
        return d;
    }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        store.add(prefix + this->name() + "/kernel", kernel_, true);
        store.add(prefix + this->name() + "/bias", bias_, true);
    }

    Tensor<T>& kernel() noexcept { return kernel_; }
    Tensor<T>& bias() noexcept { return bias_; }

private:
    Tensor<T> kernel_;
    Tensor<T> bias_;
    std::size_t stride_;
    Padding padding_;
    Activation activation_;
};

template <class T>
class BatchNormLayer : public Layer<T> {
public:
    static constexpr double kDefaultEpsilon = 1e-3;
    static constexpr double kDefaultMomentum = 0.01;

    BatchNormLayer(std::string name, std::size_t channels, double epsilon = kDefaultEpsilon,
                   double momentum = kDefaultMomentum)
        : Layer<T>(std::move(name)), epsilon_(epsilon), momentum_(momentum)
    {
        if (!(epsilon > 0.0)) throw ShapeError("batchnorm: epsilon must be positive");
        if (!(momentum > 0.0 && momentum < 1.0)) throw ShapeError("batchnorm: momentum must lie in (0, 1)");
        gamma_ = Tensor<T>::ones(Shape{channels}).set_requires_grad();
        beta_ = Tensor<T>::zeros(Shape{channels}).set_requires_grad();
        running_mean_ = Tensor<T>::zeros(Shape{channels});
        running_var_ = Tensor<T>::ones(Shape{channels});
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        const T eps = static_cast<T>(epsilon_);
        if (ctx.mode == Mode::infer)
            return batchnorm_infer(x, gamma_, beta_, running_mean_, running_var_, eps, ctx.tape);
        BatchStats<T> stats;
        auto y = batchnorm_train(x, gamma_, beta_, eps, &stats, ctx.tape);
        if (ctx.update_running_stats) {
            const T mom = static_cast<T>(momentum_);
            for (std::size_t c = 0; c < stats.mean.size(); ++c) {
                running_mean_[c] = (T(1) - mom) * running_mean_[c] + mom * stats.mean[c];
                running_var_[c] = (T(1) - mom) * running_var_[c] + mom * stats.var[c];
            }
        }
        return y;
    }

    Shape output_shape(const Shape& in) const override { return in; }
    std::string describe() const override { return "batchnorm"; }

    void set_bn_momentum(double momentum) override
    {
        if (!(momentum > 0.0 && momentum < 1.0)) throw ShapeError("batchnorm: momentum must lie in (0, 1)");
        momentum_ = momentum;
    }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        const auto p = prefix + this->name();
        store.add(p + "/gamma", gamma_, true);
        store.add(p + "/beta", beta_, true);
        store.add(p + "/running_mean", running_mean_, false);
        store.add(p + "/running_var", running_var_, false);
    }

    Tensor<T>& gamma() noexcept { return gamma_; }
    Tensor<T>& beta() noexcept { return beta_; }
    Tensor<T>& running_mean() noexcept { return running_mean_; }
    Tensor<T>& running_var() noexcept { return running_var_; }

private:
    Tensor<T> gamma_, beta_, running_mean_, running_var_;
    double epsilon_;
    double momentum_;
};

template <class T>
class DropoutLayer : public Layer<T> {
public:
    DropoutLayer(std::string name, double rate) : Layer<T>(std::move(name)), rate_(rate)
    {
        if (!(rate >= 0.0 && rate < 1.0)) throw ShapeError("dropout: rate must lie in [0, 1)");
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        if (ctx.mode == Mode::infer || rate_ == 0.0) return x;
        return dropout(x, rate_, ctx.mode, ctx.random(), ctx.tape);
    }

    Shape output_shape(const Shape& in) const override { return in; }

    std::string describe() const override
    {
        char buf[32];
        std::snprintf(buf, sizeof buf, "dropout %.2g", rate_);
        return buf;
    }

    double rate() const noexcept { return rate_; }

private:
    double rate_;
};

template <class T>
class MaxPoolLayer : public Layer<T> {
public:
    using Layer<T>::Layer;
    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override { return maxpool2d(x, ctx.tape); }
    Shape output_shape(const Shape& in) const override
    {
        detail::require_rank(in, 4, "maxpool2d");
        if (in[1] < 2 || in[2] < 2) throw ShapeError(this->name() + ": spatial extent below 2x2 window " + in.str());
        return Shape{in[0], in[1] / 2, in[2] / 2, in[3]};
    }
    std::string describe() const override { return "maxpool 2x2"; }
};

template <class T>
class GlobalAvgPoolLayer : public Layer<T> {
public:
    using Layer<T>::Layer;
    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override { return global_average_pool(x, ctx.tape); }
    Shape output_shape(const Shape& in) const override
    {
        detail::require_rank(in, 4, "global_average_pool");
        return Shape{in[0], in[3]};
    }
    std::string describe() const override { return "global average pool"; }
};

template <class T>
class FlattenLayer : public Layer<T> {
public:
    using Layer<T>::Layer;
    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override { return flatten(x, ctx.tape); }
    Shape output_shape(const Shape& in) const override { return Shape{in[0], in.numel() / in[0]}; }
    std::string describe() const override { return "flatten"; }
};

template <class T>
class ReluLayer : public Layer<T> {
public:
    using Layer<T>::Layer;
    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override { return relu(x, ctx.tape); }
    Shape output_shape(const Shape& in) const override { return in; }
    std::string describe() const override { return "relu"; }
};

/// y = f(x·W + b)
template <class T>
class DenseLayer : public Layer<T> {
public:
    DenseLayer(std::string name, std::size_t in, std::size_t out, Activation activation, Rng& rng)
        : Layer<T>(std::move(name)), activation_(activation)
    {
        if (in == 0 || out == 0) throw ShapeError("dense: widths must be positive");
        const double limit = activation == Activation::relu ? init::he_uniform_limit(in)
                                                            : init::glorot_uniform_limit(in, out);
        weight_ = init::uniform<T>(Shape{in, out}, limit, rng).set_requires_grad();
        bias_ = Tensor<T>::zeros(Shape{out}).set_requires_grad();
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        if (x.rank() != 2 || x.dim(1) != weight_.dim(0))
            throw ShapeError(this->name() + ": expected input width " + std::to_string(weight_.dim(0))
                             + ", got " + x.shape().str());
        auto y = add_bias(matmul(x, weight_, ctx.tape), bias_, ctx.tape);
        switch (activation_) {
        case Activation::relu: return relu(y, ctx.tape);
        case Activation::softmax: return softmax(y, ctx.tape);
        default: return y;
        }
    }

    Shape output_shape(const Shape& in) const override
    {
        if (in.rank() != 2 || in[1] != weight_.dim(0))
            throw ShapeError(this->name() + ": expected input width " + std::to_string(weight_.dim(0)));
        return Shape{in[0], weight_.dim(1)};
    }

    std::string describe() const override
    {
        std::string d = "dense " + std::to_string(weight_.dim(1));
        if (activation_ != Activation::none) d += ", " + to_string(activation_);
        return d;
    }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        store.add(prefix + this->name() + "/weight", weight_, true);
        store.add(prefix + this->name() + "/bias", bias_, true);
    }

    std::size_t in_width() const { return weight_.dim(0); }
    std::size_t out_width() const { return weight_.dim(1); }
    Tensor<T>& weight() noexcept { return weight_; }
    Tensor<T>& bias() noexcept { return bias_; }

private:
    Tensor<T> weight_;
    Tensor<T> bias_;
    Activation activation_;
};

/// y = F(x) + shortcut(x), F = bn(conv3x3(relu(bn(conv3x3(x))))). The shortcut is the
/// identity, or a strided 1×1 projection with batch norm when the shape changes.
template <class T>
class ResidualBlock : public Layer<T> {
public:
    ResidualBlock(std::string name, std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng)
        : Layer<T>(std::move(name)),
          conv1_("conv1", 3, cin, cout, Activation::none, rng, stride),
          bn1_("bn1", cout),
          conv2_("conv2", 3, cout, cout, Activation::none, rng),
          bn2_("bn2", cout)
    {
        if (stride != 1 || cin != cout) {
            proj_.emplace("proj", 1, cin, cout, Activation::none, rng, stride);
            proj_bn_.emplace("proj_bn", cout);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        auto h = relu(bn1_.forward(conv1_.forward(x, ctx), ctx), ctx.tape);
        auto f = bn2_.forward(conv2_.forward(h, ctx), ctx);
        if (!use_skip_) return f;
        return add(f, shortcut(x, ctx), ctx.tape);
    }

    /// The shortcut branch alone.
    Tensor<T> shortcut(const Tensor<T>& x, Context<T>& ctx)
    {
        if (!proj_) return x;
        return proj_bn_->forward(proj_->forward(x, ctx), ctx);
    }

    Shape output_shape(const Shape& in) const override { return conv1_.output_shape(in); }

    std::string describe() const override
    {
        return "residual block (" + std::string(proj_ ? "projection" : "identity") + " shortcut)";
    }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        const auto p = prefix + this->name() + "/";
        conv1_.collect(store, p);
        bn1_.collect(store, p);
        conv2_.collect(store, p);
        bn2_.collect(store, p);
        if (proj_) {
            proj_->collect(store, p);
            proj_bn_->collect(store, p);
        }
    }

    void set_bn_momentum(double momentum) override
    {
        bn1_.set_bn_momentum(momentum);
        bn2_.set_bn_momentum(momentum);
        if (proj_bn_) proj_bn_->set_bn_momentum(momentum);
    }

    /// Ablation switch: without the skip the block computes F(x) only.
    void set_use_skip(bool flag) noexcept { use_skip_ = flag; }
    bool has_projection() const noexcept { return proj_.has_value(); }
    Conv2DLayer<T>& conv1() noexcept { return conv1_; }
    Conv2DLayer<T>& conv2() noexcept { return conv2_; }

private:
    Conv2DLayer<T> conv1_;
    BatchNormLayer<T> bn1_;
    Conv2DLayer<T> conv2_;
    BatchNormLayer<T> bn2_;
    std::optional<Conv2DLayer<T>> proj_;
    std::optional<BatchNormLayer<T>> proj_bn_;
    bool use_skip_ = true;
};

/// Ordered stack of layers; the unit used for each feature-extractor branch.
template <class T>
class Sequential : public Layer<T> {
public:
    using Layer<T>::Layer;

    template <class L, class... Args>
    L& emplace(Args&&... args)
    {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) override
    {
        Tensor<T> h = x;
        for (auto& layer : layers_) h = layer->forward(h, ctx);
        return h;
    }

    Shape output_shape(const Shape& in) const override
    {
        Shape s = in;
        for (const auto& layer : layers_) s = layer->output_shape(s);
        return s;
    }

    /// Shape after each layer, in order.
    std::vector<Shape> trace(const Shape& in) const
    {
        std::vector<Shape> shapes;
        Shape s = in;
        for (const auto& layer : layers_) {
            s = layer->output_shape(s);
            shapes.push_back(s);
        }
        return shapes;
    }

    std::string describe() const override { return "sequential"; }

    void collect(ParameterStore<T>& store, const std::string& prefix) const override
    {
        for (auto& layer : layers_) layer->collect(store, prefix + this->name() + "/");
    }

    void summarize(const Shape& in, const std::string& prefix, std::vector<LayerInfo>& rows) const override
    {
        Shape s = in;
        for (const auto& layer : layers_) {
            layer->summarize(s, prefix + this->name() + "/", rows);
            s = layer->output_shape(s);
        }
    }

    void set_bn_momentum(double momentum) override
    {
        for (auto& layer : layers_) layer->set_bn_momentum(momentum);
    }

    std::size_t size() const noexcept { return layers_.size(); }
    Layer<T>& at(std::size_t i) { return *layers_.at(i); }
    const Layer<T>& at(std::size_t i) const { return *layers_.at(i); }

private:
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

} // namespace xnmoe
