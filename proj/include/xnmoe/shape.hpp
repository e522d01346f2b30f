#pragma once

#include "xnmoe/error.hpp"

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace xnmoe {

/// Ordered list of positive extents. Rank 0 is a scalar with one element.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
    explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
    const std::vector<std::size_t>& dims() const noexcept { return dims_; }

    std::size_t numel() const noexcept
    {
        return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
    }

    /// Extent of the last axis (1 for a scalar).
    std::size_t last() const noexcept { return dims_.empty() ? 1 : dims_.back(); }

    bool operator==(const Shape&) const = default;

    std::string str() const
    {
        std::string out = "[";
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(dims_[i]);
        }
        return out + "]";
    }

private:
    void validate() const
    {
        for (auto d : dims_)
            if (d == 0) throw ShapeError("shape extents must be >= 1, got " + str());
    }

    std::vector<std::size_t> dims_;
};

} // namespace xnmoe
