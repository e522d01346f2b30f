#pragma once

#include <cstddef>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xnmoe::detail {

/// Runs fn(i) for i in [0, n). Iterations must write disjoint outputs; each output is
/// then produced by a single fixed-order loop, so results do not depend on thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn)
{
#ifdef _OPENMP
    const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (count > 1)
    for (std::int64_t i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
#else
    for (std::size_t i = 0; i < n; ++i) fn(i);
#endif
}

} // namespace xnmoe::detail
