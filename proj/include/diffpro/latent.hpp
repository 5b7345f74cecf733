#pragma once

#include <array>
#include <cmath>

#include "diffpro/core.hpp"

namespace diffpro {

// A toy latent: 4 channels of 8x8, stored channel-major row-major.
struct Latent {
    static constexpr int kChannels = 4;
    static constexpr int kHeight = 8;
    static constexpr int kWidth = 8;
    static constexpr int kSize = kChannels * kHeight * kWidth;

    std::array<double, kSize> v{};

    double& at(int c, int h, int w) { return v[(c * kHeight + h) * kWidth + w]; }
    double at(int c, int h, int w) const { return v[(c * kHeight + h) * kWidth + w]; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    static Latent random_normal(Rng& rng) {
        Latent l;
        for (double& x : l.v) x = rng.normal();
        return l;
    }
};

inline double squared_l2(const Latent& a, const Latent& b) {
    double s = 0.0;
    for (int i = 0; i < Latent::kSize; ++i) {
        const double d = a.v[i] - b.v[i];
        s += d * d;
    }
    return s;
}

}  // namespace diffpro
