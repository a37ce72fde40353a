#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vireid/tensor.hpp"

namespace vireid {

// Deterministic RNG wrapper. Every draw is a pure function of the engine
// state, so serializing the engine is enough to resume a run bit-identically
// (no cached distribution state: gaussians use an uncached Box-Muller).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t raw() { return eng_(); }

    // Uniform in [0, 1).
    real uniform() {
        return static_cast<real>(eng_() >> 11) * 0x1.0p-53;
    }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) { return static_cast<int>(eng_() % static_cast<uint64_t>(n)); }

    real normal() {
        real u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    real normal(real mean, real stddev) { return mean + stddev * normal(); }

    void fill_normal(Tensor& t, real mean, real stddev) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
    }

    void fill_uniform(Tensor& t, real lo, real hi) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
    }

private:
    std::mt19937_64 eng_;
};

// splitmix64-style mixing, used to derive independent sub-seeds from
// (seed, context) pairs so generation stays a pure function of its arguments.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix_seed(mix_seed(a, b, c), d);
}

}  // namespace vireid
