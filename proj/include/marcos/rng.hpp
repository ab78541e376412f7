#pragma once

#include <cmath>
#include <cstdint>

namespace marcos {

// SplitMix64 generator. The standard library distributions are not pinned
// across implementations, so all randomness in the project goes through this
// generator to keep seeded runs bit-reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0. Rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n) {
        if ((n & (n - 1)) == 0) return next_u64() & (n - 1);
        std::uint64_t limit = ~0ull - (~0ull % n + 1) % n;
        std::uint64_t v = next_u64();
        while (v > limit) v = next_u64();
        return v % n;
    }

    long long range(long long lo, long long hi) {  // inclusive bounds
        return lo + static_cast<long long>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; the spare value is cached.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Counter-based seed splitter: sub-streams depend only on the base seed and
// the indices, never on draw order or batch composition.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    Rng r(base ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full) ^ (c * 0x165667b19e3779f9ull));
    r.next_u64();
    return r.next_u64();
}

}  // namespace marcos
