#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <utility>

namespace glacier {

/// Portable seeded generator.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The distributions below are implemented here instead of using
/// <random> distributions, whose algorithms are implementation-defined, so a
/// given seed yields the same draws on every platform:
///   - uniform():      (next() >> 11) * 2^-53, in [0, 1)
///   - uniform_int(n): rejection sampling on the top bits, exact in [0, n)
///   - normal():       Box-Muller on two uniform() draws (no caching)
///   - shuffle():      Fisher-Yates from the back using uniform_int
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Derive an independent stream from a seed and a list of stream tags.
    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::uint64_t h = splitmix(seed);
        for (auto t : tags) h = splitmix(h ^ (t + 0x9e3779b97f4a7c15ULL));
        return Rng(h);
    }

    std::uint64_t next() { return engine_(); }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        // Smallest all-ones mask covering n-1, then reject out-of-range draws.
        std::uint64_t mask = n - 1;
        mask |= mask >> 1;
        mask |= mask >> 2;
        mask |= mask >> 4;
        mask |= mask >> 8;
        mask |= mask >> 16;
        mask |= mask >> 32;
        for (;;) {
            std::uint64_t v = next() & mask;
            if (v < n) return v;
        }
    }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(uniform_int(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace glacier
