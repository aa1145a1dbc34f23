#pragma once
// Noise schedule tables and the closed-form forward noising process.

#include <cmath>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/tensor.hpp"

namespace phasegen {

enum class ScheduleKind { cosine, linear };

inline std::string to_string(ScheduleKind k) {
    return k == ScheduleKind::cosine ? "cosine" : "linear";
}
inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw Error("unknown schedule kind: " + s);
}

/// Per-step noise rates beta_t and cumulative signal retention
/// alpha_bar_t = prod_{s<=t} (1 - beta_s). Index 0 holds alpha_bar_0 = 1;
/// betas are 1-based conceptually, stored at beta[t-1].
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::cosine;
    int num_steps = 0;                // training step count
    std::vector<double> beta;         // beta_1..beta_T at beta[0..T-1]
    std::vector<double> alpha_bar;    // alpha_bar_0..alpha_bar_T at [0..T]

    double beta_at(int t) const {
        require(t >= 1 && t <= num_steps, "schedule step out of range");
        return beta[t - 1];
    }
    double alpha_bar_at(int t) const {
        require(t >= 0 && t <= num_steps, "schedule step out of range");
        return alpha_bar[t];
    }
};

/// Build the beta / alpha_bar tables.
///
/// cosine: alpha_bar_t = cos^2(((t/T + s)/(1 + s)) * pi/2) normalized so
/// alpha_bar_0 = 1, with offset s = 0.008 and beta clipped at 0.999.
/// linear: beta linearly spaced over [1e-4, 0.02].
inline NoiseSchedule build_schedule(ScheduleKind kind, int num_steps) {
    require(num_steps >= 2, "schedule needs at least 2 steps");
    NoiseSchedule sched;
    sched.kind = kind;
    sched.num_steps = num_steps;
    sched.beta.resize(num_steps);
    sched.alpha_bar.resize(num_steps + 1);
    sched.alpha_bar[0] = 1.0;

    if (kind == ScheduleKind::cosine) {
        const double s = 0.008;
        auto f = [&](double t) {
            double u = (t / num_steps + s) / (1.0 + s) * kPi / 2.0;
            double c = std::cos(u);
            return c * c;
        };
        const double f0 = f(0.0);
        for (int t = 1; t <= num_steps; ++t) {
            double ab_prev = sched.alpha_bar[t - 1];
            double raw_beta = 1.0 - (f(static_cast<double>(t)) / f0) /
                                        (f(static_cast<double>(t - 1)) / f0);
            sched.beta[t - 1] = clamp(raw_beta, 0.0, 0.999);
            sched.alpha_bar[t] = ab_prev * (1.0 - sched.beta[t - 1]);
        }
    } else {
        const double beta_lo = 1e-4, beta_hi = 0.02;
        for (int t = 1; t <= num_steps; ++t) {
            double frac = static_cast<double>(t - 1) / static_cast<double>(num_steps - 1);
            sched.beta[t - 1] = beta_lo + (beta_hi - beta_lo) * frac;
            sched.alpha_bar[t] = sched.alpha_bar[t - 1] * (1.0 - sched.beta[t - 1]);
        }
    }

    for (int t = 1; t <= num_steps; ++t) {
        require(sched.beta[t - 1] > 0.0 && sched.beta[t - 1] < 1.0, "beta out of (0,1)");
        require(sched.alpha_bar[t] < sched.alpha_bar[t - 1], "alpha_bar must strictly decrease");
    }
    require(sched.alpha_bar[num_steps] > 0.0, "alpha_bar underflow at final step");
    return sched;
}

/// Closed-form forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise.
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, int t, const Tensor<S>& noise,
                          const NoiseSchedule& sched) {
    require(x0.same_shape(noise), "x0/noise shape mismatch");
    require(t >= 1 && t <= sched.num_steps, "diffusion step out of range");
    const S a = static_cast<S>(std::sqrt(sched.alpha_bar_at(t)));
    const S b = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
    Tensor<S> out(x0.channels, x0.height, x0.width);
    for (size_t i = 0; i < x0.size(); ++i) out.v[i] = a * x0.v[i] + b * noise.v[i];
    return out;
}

/// i.i.d. standard normal tensor from the given stream.
template <typename S = float>
Tensor<S> sample_noise(int channels, int height, int width, Rng& rng) {
    Tensor<S> out(channels, height, width);
    for (auto& v : out.v) v = static_cast<S>(rng.normal());
    return out;
}

}  // namespace phasegen
