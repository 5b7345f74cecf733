#pragma once

#include <cmath>
#include <vector>

#include "diffpro/core.hpp"
#include "diffpro/latent.hpp"

namespace diffpro {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alphas_cumprod;  // strictly decreasing, in (1e-5, 1]

    double alpha_bar(int t) const {
        if (t < 0 || t >= T) throw InvalidArgument("timestep out of range: " + std::to_string(t));
        return alphas_cumprod[t];
    }
};

inline constexpr double kAlphaBarFloor = 1e-5;

// Cosine schedule: abar_t = cos^2(((t/T + s)/(1+s)) * pi/2) normalized at t=0,
// s = 0.008, clamped to (1e-5, 1].
inline NoiseSchedule cosine_schedule(int T) {
    if (T < 2) throw InvalidArgument("cosine_schedule requires T >= 2");
    constexpr double s = 0.008;
    constexpr double half_pi = 1.5707963267948966192313216916398;
    auto f = [&](double t) {
        const double c = std::cos((t / T + s) / (1.0 + s) * half_pi);
        return c * c;
    };
    const double f0 = f(0.0);
    NoiseSchedule sched;
    sched.T = T;
    sched.alphas_cumprod.resize(T);
    for (int t = 0; t < T; ++t) {
        double ab = f(static_cast<double>(t)) / f0;
        ab = std::min(1.0, std::max(kAlphaBarFloor, ab));
        sched.alphas_cumprod[t] = ab;
    }
    return sched;
}

// Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline Latent add_noise(const Latent& x0, int t, const Latent& eps, const NoiseSchedule& sched) {
    const double ab = sched.alpha_bar(t);  // throws on out-of-range t
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    Latent out;
    for (int i = 0; i < Latent::kSize; ++i) out.v[i] = sa * x0.v[i] + sb * eps.v[i];
    return out;
}

// Deterministic DDIM update (eta = 0). t_prev == -1 denotes the final step
// (abar = 1), which returns the x0 estimate directly.
inline Latent ddim_step(const Latent& x_t, const Latent& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched) {
    if (t_prev >= t) throw InvalidArgument("ddim_step requires t_prev < t");
    const double ab_t = sched.alpha_bar(t);
    if (ab_t < kAlphaBarFloor) throw NumericFailure("alpha_bar below clamp floor", "ddim_step");
    const double ab_prev = (t_prev < 0) ? 1.0 : sched.alpha_bar(t_prev);
    const double sa_t = std::sqrt(ab_t);
    const double sb_t = std::sqrt(1.0 - ab_t);
    const double sa_p = std::sqrt(ab_prev);
    const double sb_p = std::sqrt(1.0 - ab_prev);
    Latent out;
    for (int i = 0; i < Latent::kSize; ++i) {
        const double x0_hat = (x_t.v[i] - sb_t * eps_hat.v[i]) / sa_t;
        out.v[i] = sa_p * x0_hat + sb_p * eps_hat.v[i];
    }
    return out;
}

}  // namespace diffpro
