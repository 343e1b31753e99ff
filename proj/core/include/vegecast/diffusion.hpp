#pragma once

#include <string>
#include <vector>

#include "vegecast/ndarray.hpp"
#include "vegecast/rng.hpp"

namespace vegecast {

/// Per-step noise coefficients. alpha_bar[t] is the cumulative product of
/// alpha up to and including t.
struct NoiseSchedule {
    int num_steps = 0;
    std::string kind; // "linear" | "cosine"
    double beta_min = 0.0, beta_max = 0.0;
    std::vector<double> beta, alpha, alpha_bar;

    double sigma(int t) const; // posterior std; sigma(0) == 0
    std::string to_json_string() const;
    static NoiseSchedule from_json_string(const std::string& s);
};

/// linear: beta linearly spaced over [beta_min, beta_max].
/// cosine: squared-cosine cumulative schedule; per-step betas derived from
/// successive alpha_bar ratios and clipped into [beta_min, beta_max].
NoiseSchedule make_schedule(int num_steps, double beta_min, double beta_max,
                            const std::string& kind);

/// Variance-preserving closed form:
/// z_t = sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps.
NDArray forward_noise(const NDArray& z0, int t, const NDArray& eps, const NoiseSchedule& sched);

/// Step-by-step replay of the variance-preserving forward process with a
/// fresh draw per step. eps_aggregate is accumulated from the same stream
/// through the schedule coefficients, so
/// forward_noise(z0, t, eps_aggregate) must reproduce z_t.
struct StepwiseNoise {
    NDArray z_t;
    NDArray eps_aggregate;
};
StepwiseNoise forward_noise_stepwise(const NDArray& z0, int t, const NoiseSchedule& sched,
                                     Rng& rng);

/// Affine-blend recurrence x_t = a*x_{t-1} + (1-a)*eps (no square roots).
/// Not variance preserving; kept for side-by-side inspection against the
/// default formulation.
NDArray forward_noise_affine_blend(const NDArray& z0, int t, const NoiseSchedule& sched,
                                   Rng& rng);

enum class DenoiseMode {
    Standard,    // posterior-mean update with sigma(t) noise
    AffineBlend, // x_{t-1} = (x_t - ((1-a)/a) eps_hat) / a, deterministic
};

NDArray denoise_step(const NDArray& z_t, const NDArray& eps_hat, int t,
                     const NoiseSchedule& sched, Rng& rng,
                     DenoiseMode mode = DenoiseMode::Standard);

/// Noise initialization for the future slots: each of the `horizon` slots is
/// sqrt(w) * temporal_mean(past) + sqrt(1-w) * eps with independent eps.
NDArray init_future_noise(const NDArray& past_latents, int horizon, double w, Rng& rng);

/// The exact noise composing z_t relative to z0 under the closed form.
NDArray implied_noise(const NDArray& z_t, const NDArray& z0, int t, const NoiseSchedule& sched);

/// One training draw: uniform t, fresh eps, and the noised latents.
struct DiffusionBatch {
    NDArray z0;
    int t = 0;
    NDArray eps;
    NDArray z_t;
};
DiffusionBatch draw_diffusion_batch(NDArray z0, const NoiseSchedule& sched, Rng& rng);

} // namespace vegecast
