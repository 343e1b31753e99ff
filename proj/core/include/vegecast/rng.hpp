#pragma once

#include <cstdint>
#include <random>

#include "vegecast/ndarray.hpp"

namespace vegecast {

/// Deterministic RNG. Uniform/normal draws are derived from raw mt19937_64
/// bits (no std::*_distribution) so streams are reproducible bit-for-bit.
///
/// Child streams are derived by splitmix64-mixing the parent seed with a
/// stream id; splitting never consumes parent state.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

    uint64_t seed() const { return seed_; }

    /// splitmix64 finalizer.
    static uint64_t mix(uint64_t x);

    /// Independent child stream; pure function of (seed, stream_id).
    Rng split(uint64_t stream_id) const {
        return Rng(mix(seed_ ^ mix(stream_id + 0x9E3779B97F4A7C15ULL)));
    }

    uint64_t bits() { return gen_(); }

    /// Uniform in [0,1) with 53-bit mantissa.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// True with probability p.
    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n).
    int64_t below(int64_t n) { return static_cast<int64_t>(uniform() * static_cast<double>(n)); }

    /// Standard normal via Box-Muller; pairs are cached.
    double normal();

    NDArray normal_array(std::vector<int> shape);
    void fill_normal(NDArray& a);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace vegecast
