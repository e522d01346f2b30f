#pragma once

#include "xnmoe/tensor.hpp"

#include <string>
#include <vector>

namespace xnmoe {

/// Named tensor owned by a layer. Non-trainable entries are buffers such as
/// batch-norm running statistics; they are checkpointed but never optimized.
template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

/// Ordered view over every parameter and buffer of a model, in registration order.
template <class T>
class ParameterStore {
public:
    void add(std::string name, Tensor<T> tensor, bool trainable)
    {
        if (find(name)) throw Error("duplicate parameter name: " + name);
        entries_.push_back(NamedTensor<T>{std::move(name), std::move(tensor), trainable});
    }

    const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    const NamedTensor<T>* find(const std::string& name) const
    {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<NamedTensor<T>> trainable() const
    {
        std::vector<NamedTensor<T>> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e);
        return out;
    }

    /// Number of trainable scalars.
    std::size_t trainable_count() const
    {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    void zero_grad()
    {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

private:
    std::vector<NamedTensor<T>> entries_;
};

} // namespace xnmoe
