#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace xnmoe {

/// splitmix64 finalizer; used to expand seeds and derive child streams.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept
{
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Deterministic random source: xoshiro256** seeded through splitmix64.
///
/// All draws are defined by integer arithmetic only, so sequences are identical
/// across compilers and platforms. Do not route draws through <random>
/// distributions, whose algorithms are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept
    {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    /// Independent stream keyed by (seed, a, b), e.g. (run seed, epoch) or (seed, step).
    static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept
    {
        std::uint64_t sm = seed;
        std::uint64_t k = splitmix64(sm) ^ (a * 0xD1B54A32D192ED03ULL);
        k = splitmix64(k) ^ (b * 0x8CB92BA72F3D8DD7ULL);
        return Rng(splitmix64(k));
    }

    std::uint64_t next() noexcept
    {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n) (Lemire's multiply-and-reject).
    std::uint64_t below(std::uint64_t n) noexcept
    {
        if (n <= 1) return 0;
        unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Fisher-Yates shuffle.
    template <class E>
    void shuffle(std::span<E> items) noexcept
    {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept
    {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t s_[4]{};
};

} // namespace xnmoe
