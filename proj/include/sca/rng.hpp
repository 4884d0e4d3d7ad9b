#pragma once

#include <cstdint>
#include <vector>

namespace sca {

// SplitMix64: documented, tiny, cross-platform. Used for everything random
// in the engine (weight init, shuffles, synthetic data, random pruning) so
// results never depend on the platform's std:: distributions.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller, one value per call (the sine half is discarded to keep the
    // consumption pattern independent of call parity).
    double gaussian();

    // Uniform integer in [0, n).
    int uniform_int(int n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = int(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[i], v[std::size_t(j)]);
        }
    }

private:
    std::uint64_t state_;
};

// Decorrelated seed for a named sub-stream of a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace sca
