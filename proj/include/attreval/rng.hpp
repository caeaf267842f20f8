#pragma once

#include <cmath>
#include <cstdint>

namespace attreval {

// SplitMix64-based generator. Self-contained so that streams are bit-identical
// across platforms and standard-library versions (std:: distributions are
// implementation-defined). Good enough statistically for data synthesis,
// weight init and mask sampling.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // [0,1) with 24 bits of mantissa, exact in f32
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // [0,n), n > 0
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Box-Muller, two fresh draws per call (no cached spare, keeps streams
    // position-independent)
    float gaussian() {
        float u1 = uniform();
        float u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.2831853071795864769f * u2);
    }

    // independent substream for (seed, stream id) pairs
    static Rng derive(uint64_t seed, uint64_t stream) {
        Rng mix(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
        // burn one step so adjacent streams decorrelate
        mix.next_u64();
        return mix;
    }

  private:
    uint64_t state_;
};

} // namespace attreval
