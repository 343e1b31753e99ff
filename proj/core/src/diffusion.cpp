#include "vegecast/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace vegecast {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_t(int t, const NoiseSchedule& s) {
    if (t < 0 || t >= s.num_steps)
        fail("diffusion: step " + std::to_string(t) + " outside [0," +
             std::to_string(s.num_steps) + ")");
}

} // namespace

double NoiseSchedule::sigma(int t) const {
    if (t == 0) return 0.0;
    double ab_prev = alpha_bar[static_cast<size_t>(t) - 1];
    double var = beta[static_cast<size_t>(t)] * (1.0 - ab_prev) / (1.0 - alpha_bar[static_cast<size_t>(t)]);
    return std::sqrt(std::max(0.0, var));
}

std::string NoiseSchedule::to_json_string() const {
    json j;
    j["num_steps"] = num_steps;
    j["kind"] = kind;
    j["beta_min"] = beta_min;
    j["beta_max"] = beta_max;
    return j.dump();
}

NoiseSchedule NoiseSchedule::from_json_string(const std::string& s) {
    json j = json::parse(s);
    return make_schedule(j.at("num_steps").get<int>(), j.at("beta_min").get<double>(),
                         j.at("beta_max").get<double>(), j.at("kind").get<std::string>());
}

NoiseSchedule make_schedule(int num_steps, double beta_min, double beta_max,
                            const std::string& kind) {
    if (num_steps < 1) fail("make_schedule: num_steps must be >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        fail("make_schedule: need 0 < beta_min <= beta_max < 1");
    if (kind != "linear" && kind != "cosine") fail("make_schedule: kind must be linear|cosine");

    NoiseSchedule s;
    s.num_steps = num_steps;
    s.kind = kind;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.beta.resize(static_cast<size_t>(num_steps));
    if (kind == "linear") {
        for (int t = 0; t < num_steps; ++t)
            s.beta[static_cast<size_t>(t)] =
                num_steps == 1
                    ? beta_min
                    : beta_min + (beta_max - beta_min) * static_cast<double>(t) / (num_steps - 1);
    } else {
        // Squared-cosine cumulative curve; betas from alpha_bar ratios.
        auto f = [&](double u) {
            constexpr double off = 0.008;
            double c = std::cos((u + off) / (1.0 + off) * M_PI / 2.0);
            return c * c;
        };
        double prev = 1.0;
        for (int t = 0; t < num_steps; ++t) {
            double cur = f(static_cast<double>(t + 1) / num_steps) / f(0.0);
            double b = 1.0 - cur / prev;
            b = std::clamp(b, beta_min, beta_max);
            s.beta[static_cast<size_t>(t)] = b;
            prev *= 1.0 - b;
        }
    }
    s.alpha.resize(static_cast<size_t>(num_steps));
    s.alpha_bar.resize(static_cast<size_t>(num_steps));
    double prod = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        s.alpha[static_cast<size_t>(t)] = 1.0 - s.beta[static_cast<size_t>(t)];
        prod *= s.alpha[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] = prod;
        if (!(s.alpha[static_cast<size_t>(t)] > 0.0 && s.alpha[static_cast<size_t>(t)] <= 1.0))
            fail("make_schedule: alpha outside (0,1]");
    }
    for (int t = 1; t < num_steps; ++t)
        if (!(s.alpha_bar[static_cast<size_t>(t)] < s.alpha_bar[static_cast<size_t>(t) - 1]))
            fail("make_schedule: alpha_bar not strictly decreasing");
    return s;
}

NDArray forward_noise(const NDArray& z0, int t, const NDArray& eps, const NoiseSchedule& sched) {
    check_t(t, sched);
    if (!z0.same_shape(eps)) fail("forward_noise: eps shape mismatch");
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    NDArray out(z0.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

StepwiseNoise forward_noise_stepwise(const NDArray& z0, int t, const NoiseSchedule& sched,
                                     Rng& rng) {
    check_t(t, sched);
    StepwiseNoise r;
    r.z_t = z0;
    NDArray accum(z0.shape()); // total injected noise, tracked separately
    for (int s = 0; s <= t; ++s) {
        double sa = std::sqrt(sched.alpha[static_cast<size_t>(s)]);
        double sb = std::sqrt(1.0 - sched.alpha[static_cast<size_t>(s)]);
        NDArray eps = rng.normal_array(z0.shape());
        for (int64_t i = 0; i < r.z_t.size(); ++i) {
            r.z_t[i] = sa * r.z_t[i] + sb * eps[i];
            accum[i] = sa * accum[i] + sb * eps[i];
        }
    }
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    double inv = 1.0 / std::sqrt(1.0 - ab);
    r.eps_aggregate = NDArray(z0.shape());
    for (int64_t i = 0; i < accum.size(); ++i) r.eps_aggregate[i] = accum[i] * inv;
    return r;
}

NDArray forward_noise_affine_blend(const NDArray& z0, int t, const NoiseSchedule& sched,
                                   Rng& rng) {
    check_t(t, sched);
    NDArray z = z0;
    for (int s = 0; s <= t; ++s) {
        double a = sched.alpha[static_cast<size_t>(s)];
        NDArray eps = rng.normal_array(z0.shape());
        for (int64_t i = 0; i < z.size(); ++i) z[i] = a * z[i] + (1.0 - a) * eps[i];
    }
    return z;
}

NDArray denoise_step(const NDArray& z_t, const NDArray& eps_hat, int t,
                     const NoiseSchedule& sched, Rng& rng, DenoiseMode mode) {
    check_t(t, sched);
    if (!z_t.same_shape(eps_hat)) fail("denoise_step: eps_hat shape mismatch");
    NDArray out(z_t.shape());
    if (mode == DenoiseMode::AffineBlend) {
        double a = sched.alpha[static_cast<size_t>(t)];
        double coef = (1.0 - a) / a;
        for (int64_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - coef * eps_hat[i]) / a;
        return out;
    }
    double a = sched.alpha[static_cast<size_t>(t)];
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    double coef = sched.beta[static_cast<size_t>(t)] / std::sqrt(1.0 - ab);
    double inv_sa = 1.0 / std::sqrt(a);
    double sg = sched.sigma(t);
    for (int64_t i = 0; i < out.size(); ++i) {
        double mean = inv_sa * (z_t[i] - coef * eps_hat[i]);
        out[i] = sg > 0.0 ? mean + sg * rng.normal() : mean;
    }
    return out;
}

NDArray init_future_noise(const NDArray& past_latents, int horizon, double w, Rng& rng) {
    if (past_latents.ndim() < 2 || past_latents.dim(0) < 1)
        fail("init_future_noise: empty past");
    if (horizon < 1) fail("init_future_noise: horizon must be >= 1");
    if (w < 0.0 || w > 1.0) fail("init_future_noise: w outside [0,1]");
    const int T = past_latents.dim(0);
    const int64_t inner = past_latents.size() / T;
    NDArray mean_map(std::vector<int>(past_latents.shape().begin() + 1, past_latents.shape().end()));
    for (int t = 0; t < T; ++t)
        for (int64_t i = 0; i < inner; ++i) mean_map[i] += past_latents[t * inner + i];
    for (int64_t i = 0; i < inner; ++i) mean_map[i] /= T;

    std::vector<int> out_shape = past_latents.shape();
    out_shape[0] = horizon;
    NDArray out(out_shape);
    double sw = std::sqrt(w), sn = std::sqrt(1.0 - w);
    for (int k = 0; k < horizon; ++k)
        for (int64_t i = 0; i < inner; ++i)
            out[k * inner + i] = sw * mean_map[i] + (sn > 0.0 ? sn * rng.normal() : 0.0);
    return out;
}

NDArray implied_noise(const NDArray& z_t, const NDArray& z0, int t, const NoiseSchedule& sched) {
    check_t(t, sched);
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    NDArray out(z0.shape());
    double inv = 1.0 / std::sqrt(1.0 - ab);
    double sa = std::sqrt(ab);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (z_t[i] - sa * z0[i]) * inv;
    return out;
}

DiffusionBatch draw_diffusion_batch(NDArray z0, const NoiseSchedule& sched, Rng& rng) {
    DiffusionBatch b;
    b.t = static_cast<int>(rng.below(sched.num_steps));
    b.eps = rng.normal_array(z0.shape());
    b.z_t = forward_noise(z0, b.t, b.eps, sched);
    b.z0 = std::move(z0);
    return b;
}

} // namespace vegecast
