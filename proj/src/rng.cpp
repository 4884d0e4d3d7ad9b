#include "sca/rng.hpp"

#include <cmath>

namespace sca {

double SplitMix64::gaussian() {
    // Box-Muller on two fresh uniforms; u1 nudged away from 0.
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

int SplitMix64::uniform_int(int n) {
    // Rejection-free modulo is biased; n here is always tiny relative to
    // 2^64 so the bias is far below 2^-32. Keep it simple.
    return int(next() % std::uint64_t(n));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    SplitMix64 g(base ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
    return g.next();
}

}  // namespace sca
