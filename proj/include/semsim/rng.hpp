#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace semsim {

/// Counter-based random stream.
///
/// Every draw is a pure function of (key, counter), so a stream can be
/// split into independent named children without touching the parent's
/// sequence. Distributions are implemented here instead of through
/// <random> so that sequences do not depend on the standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

    std::uint64_t next_u64() { return mix(key_ + mix(counter_++)); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller; the second variate is discarded to keep draws stateless.
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Child stream identified by an integer; does not advance this stream.
    Rng split(std::uint64_t id) const {
        Rng child;
        child.key_ = mix(key_ ^ mix(id + 0x632be59bd9b4e019ULL));
        return child;
    }

    /// Child stream identified by a name (FNV-1a of the bytes).
    Rng split(std::string_view name) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return split(h);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace semsim
