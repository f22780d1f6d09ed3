#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace bvt {

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

/// Deterministic random source. mt19937_64 is fully specified by the standard;
/// the distributions below are written out so results do not depend on the
/// standard library implementation.
class Rng {
   public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t next() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // N(0, std^2) restricted to [-2 std, 2 std] by rejection.
    double truncated_normal(double std) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * std;
        }
    }

    // Fisher-Yates, from the back.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

   private:
    std::mt19937_64 gen_;
};

}  // namespace bvt
