#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "spos/error.hpp"

namespace spos {

// Deterministic RNG. Bit generation is std::mt19937_64 (fully specified by
// the standard); the value distributions are hand-rolled because the
// standard library's distribution objects are allowed to differ between
// implementations, which would break reproducible data generation and init.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [lo, hi], both ends inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw ContractError("uniform_int: empty range");
        std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        if (range == 0) return static_cast<std::int64_t>(gen_());  // full 64-bit span
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return lo + static_cast<std::int64_t>(x % range);
    }

    // Standard normal via Box-Muller; the pair's second value is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle, in place.
    template <class Vec>
    void shuffle(Vec& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::int64_t j = uniform_int(0, i);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace spos
