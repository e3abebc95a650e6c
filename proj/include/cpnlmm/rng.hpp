#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cpnlmm {

// Stateless splitmix64 finaliser.  Used to derive independent engine seeds
// from (base seed, tag...) tuples so that chains, replications and subjects
// get reproducible, non-overlapping streams no matter the execution order.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = mix64(seed);
    h = mix64(h ^ (a + 0x9e3779b97f4a7c15ULL));
    h = mix64(h ^ (b + 0xbf58476d1ce4e5b9ULL));
    h = mix64(h ^ (c + 0x94d049bb133111ebULL));
    return h;
}

// Stream tags for derive_seed; keeps the tag space from colliding by accident.
enum : std::uint64_t {
    kStreamChain = 0x01,
    kStreamInit = 0x02,
    kStreamSimData = 0x03,
    kStreamSimFit = 0x04,
    kStreamDemo = 0x05,
    kStreamTest = 0xFE,
};

// mt19937_64 plus the Marsaglia polar transform with a cached spare, so a
// fixed seed yields a bit-identical normal sequence on any platform.
class RandomStream {
  public:
    explicit RandomStream(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // uniform on [0,1) with 53 random bits
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cpnlmm
