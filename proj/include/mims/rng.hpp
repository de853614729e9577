#pragma once

#include <cstdint>

namespace mims {

// Counter-based 64-bit generator (splitmix64). The state advances by the
// golden-ratio increment and each output is the splitmix64 finalizer of the
// counter, so stream element n is a pure function of (seed, n). All sampling
// rules below are fixed so that generated datasets are bit-identical across
// platforms:
//   uniform():      top 53 bits of next(), times 2^-53  -> double in [0,1)
//   uniform_int(n): (next() * n) >> 64 via 128-bit multiply
//   gauss():        Irwin-Hall sum of 12 uniforms minus 6 (mean 0, var 1)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased enough for data synthesis; documented fixed-point scheme.
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    double gauss() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += uniform();
        return s - 6.0;
    }

private:
    std::uint64_t state_;
};

// Derives an independent stream for substream `index` of `seed` (per-bag
// seeds, train/test splits, per-layer init). One splitmix64 finalizer round
// applied to seed XOR (index+1)*golden gives well-separated streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed ^ ((index + 1) * 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace mims
