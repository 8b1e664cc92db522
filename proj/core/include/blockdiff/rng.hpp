#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace blockdiff {

// Deterministic RNG with fixed sampling algorithms. std::mt19937_64 is
// bit-stable across platforms; the distribution transforms below are our own
// so streams are reproducible independent of the standard library build.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform double in [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // uniform int in [0, n)
    int uniform_int(int n) {
        // modulo bias is negligible for n << 2^64 and keeps the stream simple
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller; two draws per call, no caching, so the
    // stream position never depends on call parity
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Rng fork() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

  private:
    std::mt19937_64 engine_;
};

}  // namespace blockdiff
