#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "cllab/errors.hpp"

namespace cllab {

/// Deterministic PRNG used on every code path that affects results.
/// Distribution sampling is written out explicitly (std::*_distribution output
/// is implementation-defined and would not reproduce across toolchains).
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n); n must be positive.
    uint64_t below(uint64_t n) {
        if (n == 0) throw DomainError("Rng::below: n must be positive");
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller. Pairs are cached, so the stream
    /// advances by two uniforms every other call.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Fisher-Yates shuffle with a pinned draw order.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Derive an independent stream seed from a base seed plus a textual and/or
/// ordinal key. Streams keyed by distinct (index, key) pairs are unrelated,
/// which keeps parallel work bit-reproducible.
uint64_t mix_seed(uint64_t seed, std::string_view key);
uint64_t mix_seed(uint64_t seed, uint64_t index);
uint64_t mix_seed(uint64_t seed, uint64_t index, std::string_view key);

}  // namespace cllab
