#pragma once

#include "xnmoe/error.hpp"
#include "xnmoe/shape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xnmoe {

namespace detail {
inline thread_local bool checked_flag = false;

struct DecisionHashes {
    std::uint64_t activation = 0xCBF29CE484222325ULL;
    std::uint64_t routing = 0xCBF29CE484222325ULL;
};
inline thread_local DecisionHashes* decision_hashes = nullptr;

inline void mix(std::uint64_t& h, std::uint64_t v) noexcept { h = (h ^ (v + 0x9E3779B97F4A7C15ULL)) * 0x100000001B3ULL; }
} // namespace detail

/// Records a piecewise-linear branch (ReLU side, pooling winner) in the active DecisionRecorder.
inline void note_decision(std::uint64_t v) noexcept
{
    if (auto* h = detail::decision_hashes) detail::mix(h->activation, v);
}

/// Records an expert choice in the active DecisionRecorder.
inline void note_routing(std::uint64_t v) noexcept
{
    if (auto* h = detail::decision_hashes) detail::mix(h->routing, v);
}

/// Hashes the discrete decisions made by ops on this thread while alive. Two forward
/// passes with equal hashes took the same branch everywhere.
class DecisionRecorder {
public:
    DecisionRecorder() : previous_(detail::decision_hashes) { detail::decision_hashes = &hashes_; }
    ~DecisionRecorder() { detail::decision_hashes = previous_; }
    DecisionRecorder(const DecisionRecorder&) = delete;
    DecisionRecorder& operator=(const DecisionRecorder&) = delete;
    std::uint64_t activation() const noexcept { return hashes_.activation; }
    std::uint64_t routing() const noexcept { return hashes_.routing; }

private:
    detail::DecisionHashes hashes_;
    detail::DecisionHashes* previous_;
};

/// When enabled, every recorded op scans its output and throws NumericError on NaN/Inf.
inline bool checked_mode() noexcept { return detail::checked_flag; }

/// RAII toggle for checked mode on the current thread.
class CheckedScope {
public:
    explicit CheckedScope(bool enabled = true) : previous_(detail::checked_flag)
    {
        detail::checked_flag = enabled;
    }
    ~CheckedScope() { detail::checked_flag = previous_; }
    CheckedScope(const CheckedScope&) = delete;
    CheckedScope& operator=(const CheckedScope&) = delete;

private:
    bool previous_;
};

/// Dense row-major array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, so a tensor captured by a tape
/// record and the same tensor held by a layer see the same gradient buffer.
/// Use clone() for a deep copy.
template <class T>
class Tensor {
    struct Storage {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };

public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>())
    {
        s_->data.assign(shape.numel(), fill);
        s_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>())
    {
        if (values.size() != shape.numel())
            throw ShapeError("tensor data length " + std::to_string(values.size())
                             + " does not match shape " + shape.str());
        s_->data = std::move(values);
        s_->shape = std::move(shape);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return Tensor(Shape{}, value); }

    bool defined() const noexcept { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t numel() const { return s_->data.size(); }
    std::size_t rank() const { return s_->shape.rank(); }
    std::size_t dim(std::size_t axis) const { return s_->shape[axis]; }

    std::span<T> data() { return s_->data; }
    std::span<const T> data() const { return s_->data; }
    T* ptr() { return s_->data.data(); }
    const T* ptr() const { return s_->data.data(); }
    T& operator[](std::size_t i) { return s_->data[i]; }
    const T& operator[](std::size_t i) const { return s_->data[i]; }

    T item() const
    {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
        return s_->data[0];
    }

    bool requires_grad() const noexcept { return s_ && s_->requires_grad; }
    Tensor& set_requires_grad(bool flag = true)
    {
        s_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const noexcept { return s_ && !s_->grad.empty(); }

    /// Gradient buffer, allocated (zero-filled) on first access. Gradients stay
    /// writable through const handles: they are the only mutable part of a tensor.
    std::span<T> grad() const
    {
        ensure_grad();
        return s_->grad;
    }

    void ensure_grad() const
    {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    }
    void zero_grad() const
    {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    /// Gradient as a standalone tensor (zeros if never touched).
    Tensor grad_tensor() const
    {
        ensure_grad();
        return Tensor(shape(), s_->grad);
    }

    /// Deep copy of shape and data; the copy has no gradient and does not require grad.
    Tensor clone() const { return Tensor(shape(), s_->data); }

    /// Same shape, new data buffer; keeps the gradient flag. Used for in-place parameter loads.
    void assign(std::span<const T> values)
    {
        if (values.size() != numel())
            throw ShapeError("assign: length mismatch for shape " + shape().str());
        std::copy(values.begin(), values.end(), s_->data.begin());
    }

    bool is_same(const Tensor& other) const noexcept { return s_ == other.s_; }

    bool all_finite() const
    {
        return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
    }

private:
    std::shared_ptr<Storage> s_;
};

/// Converts a tensor between scalar types (no gradient).
template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t)
{
    std::vector<To> values(t.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<To>(t[i]);
    return Tensor<To>(t.shape(), std::move(values));
}

/// Records operations in execution order for reverse-mode differentiation.
template <class T>
class Tape {
public:
    struct Record {
        std::string op;
        Tensor<T> output;
        std::function<void()> backward;
    };

    void record(std::string_view op, Tensor<T> output, std::function<void()> backward)
    {
        records_.push_back(Record{std::string(op), std::move(output), std::move(backward)});
    }

    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    void clear() noexcept { records_.clear(); }
    const std::vector<Record>& records() const noexcept { return records_; }

private:
    std::vector<Record> records_;
};

namespace detail {

/// Marks `out` and records the backward closure when a tape is active and some input needs grad.
template <class T>
void finish(Tape<T>* tape, std::string_view op, Tensor<T>& out, bool needs_grad,
            std::function<void()> backward)
{
    if (xnmoe::checked_mode() && !out.all_finite())
        throw NumericError("non-finite value produced by " + std::string(op));
    if (tape && needs_grad) {
        out.set_requires_grad(true);
        tape->record(op, out, std::move(backward));
    }
}

} // namespace detail

/// Propagates d(loss)/d(.) through the tape in reverse order.
///
/// Intermediate results recorded on the tape are reset first, so replaying the
/// same tape twice accumulates exactly twice into leaf gradients.
template <class T>
void backward(const Tensor<T>& loss, Tape<T>& tape)
{
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss");
    const auto& records = tape.records();
    std::size_t end = records.size();
    for (std::size_t i = records.size(); i-- > 0;) {
        if (records[i].output.is_same(loss)) {
            end = i + 1;
            break;
        }
    }
    if (end == records.size() && (records.empty() || !records.back().output.is_same(loss)))
        throw Error("backward: loss tensor was not produced on this tape");

    for (std::size_t i = 0; i < end; ++i) {
        Tensor<T> out = records[i].output;
        out.ensure_grad();
        out.zero_grad();
    }
    Tensor<T> seed = loss;
    seed.grad()[0] = T(1);
    for (std::size_t i = end; i-- > 0;) records[i].backward();
}

} // namespace xnmoe
