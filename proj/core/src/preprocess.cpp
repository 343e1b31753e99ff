#include "vegecast/preprocess.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace vegecast {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

} // namespace

std::string NormStats::to_json_string() const {
    json j;
    j["frame_mean"] = frame_mean;
    j["frame_std"] = frame_std;
    j["meteo_mean"] = meteo_mean;
    j["meteo_std"] = meteo_std;
    j["env_min"] = env_min;
    j["env_max"] = env_max;
    return j.dump();
}

NormStats NormStats::from_json_string(const std::string& s) {
    json j = json::parse(s);
    NormStats n;
    j.at("frame_mean").get_to(n.frame_mean);
    j.at("frame_std").get_to(n.frame_std);
    j.at("meteo_mean").get_to(n.meteo_mean);
    j.at("meteo_std").get_to(n.meteo_std);
    j.at("env_min").get_to(n.env_min);
    j.at("env_max").get_to(n.env_max);
    return n;
}

std::vector<float> fill_cloud_gaps(const std::vector<float>& frames,
                                   const std::vector<uint8_t>& cloud_mask, int frames_count,
                                   int H, int W) {
    const int C = Minicube::kChannels;
    const size_t plane = static_cast<size_t>(H) * W;
    if (frames.size() != static_cast<size_t>(frames_count) * C * plane)
        fail("fill_cloud_gaps: frames shape mismatch");
    if (cloud_mask.size() != static_cast<size_t>(frames_count) * plane)
        fail("fill_cloud_gaps: mask shape mismatch");

    std::vector<float> out(frames);
    auto masked = [&](int t, size_t i) { return cloud_mask[static_cast<size_t>(t) * plane + i] != 0; };
    auto val = [&](int t, int c, size_t i) -> float {
        return frames[(static_cast<size_t>(t) * C + c) * plane + i];
    };
    for (size_t i = 0; i < plane; ++i) {
        for (int t = 0; t < frames_count; ++t) {
            if (!masked(t, i)) continue;
            int prev = -1, next = -1;
            for (int s = t - 1; s >= 0; --s)
                if (!masked(s, i)) {
                    prev = s;
                    break;
                }
            for (int s = t + 1; s < frames_count; ++s)
                if (!masked(s, i)) {
                    next = s;
                    break;
                }
            if (prev < 0 && next < 0)
                fail("pixel fully occluded at (y=" + std::to_string(i / W) +
                     ", x=" + std::to_string(i % W) + ")");
            for (int c = 0; c < C; ++c) {
                float v;
                if (prev >= 0 && next >= 0)
                    v = 0.5f * (val(prev, c, i) + val(next, c, i));
                else
                    v = prev >= 0 ? val(prev, c, i) : val(next, c, i);
                out[(static_cast<size_t>(t) * C + c) * plane + i] = v;
            }
        }
    }
    return out;
}

std::vector<float> fill_non_vegetation(const std::vector<float>& frames,
                                       const std::vector<uint8_t>& veg_mask, int frames_count,
                                       int H, int W, int context_len) {
    const int C = Minicube::kChannels;
    const size_t plane = static_cast<size_t>(H) * W;
    if (frames.size() != static_cast<size_t>(frames_count) * C * plane)
        fail("fill_non_vegetation: frames shape mismatch");
    if (veg_mask.size() != plane) fail("fill_non_vegetation: mask shape mismatch");
    if (context_len < 1 || context_len > frames_count)
        fail("fill_non_vegetation: context_len outside [1, frames]");

    std::vector<float> out(frames);
    for (size_t i = 0; i < plane; ++i) {
        if (veg_mask[i] != 0) continue;
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int t = 0; t < context_len; ++t)
                s += frames[(static_cast<size_t>(t) * C + c) * plane + i];
            float m = static_cast<float>(s / context_len);
            for (int t = 0; t < frames_count; ++t)
                out[(static_cast<size_t>(t) * C + c) * plane + i] = m;
        }
    }
    return out;
}

Minicube fill_gaps(const Minicube& cube, int context_len) {
    Minicube out(cube);
    out.frames = fill_cloud_gaps(cube.frames, cube.cloud_mask, cube.total_frames(), cube.H, cube.W);
    out.frames = fill_non_vegetation(out.frames, cube.veg_mask, cube.total_frames(), cube.H,
                                     cube.W, context_len);
    return out;
}

NormStats compute_norm_stats(const std::vector<Minicube>& train_cubes) {
    if (train_cubes.empty()) fail("compute_norm_stats: empty training set");
    NormStats st;
    const int C = Minicube::kChannels;
    // Single pass: sums and squared sums per channel / variable.
    std::array<double, 4> fsum{}, fsq{};
    std::array<int64_t, 4> fn{};
    std::array<double, 9> msum{}, msq{};
    std::array<int64_t, 9> mn{};
    std::array<double, 2> emin, emax;
    emin.fill(std::numeric_limits<double>::infinity());
    emax.fill(-std::numeric_limits<double>::infinity());

    for (const auto& cube : train_cubes) {
        const size_t plane = static_cast<size_t>(cube.H) * cube.W;
        for (int t = 0; t < cube.total_frames(); ++t)
            for (int c = 0; c < C; ++c)
                for (size_t i = 0; i < plane; ++i) {
                    double v = cube.frames[(static_cast<size_t>(t) * C + c) * plane + i];
                    fsum[c] += v;
                    fsq[c] += v * v;
                    fn[c]++;
                }
        for (int m = 0; m < cube.meteo_steps(); ++m)
            for (int v = 0; v < Minicube::kMeteoVars; ++v) {
                double x = cube.meteo_at(m, v);
                msum[v] += x;
                msq[v] += x * x;
                mn[v]++;
            }
        for (int e = 0; e < Minicube::kEnvVars; ++e)
            for (size_t i = 0; i < plane; ++i) {
                double x = cube.env[static_cast<size_t>(e) * plane + i];
                emin[e] = std::min(emin[e], x);
                emax[e] = std::max(emax[e], x);
            }
    }
    for (int c = 0; c < C; ++c) {
        double mean = fsum[c] / fn[c];
        double var = fsq[c] / fn[c] - mean * mean;
        if (var <= 1e-12)
            fail("zero-variance channel: " + std::string(kChannelNames[static_cast<size_t>(c)]));
        st.frame_mean[c] = mean;
        st.frame_std[c] = std::sqrt(var);
    }
    for (int v = 0; v < Minicube::kMeteoVars; ++v) {
        double mean = msum[v] / mn[v];
        double var = msq[v] / mn[v] - mean * mean;
        st.meteo_mean[v] = mean;
        // The spare variable is identically zero by construction; keep a unit
        // std so normalization stays defined.
        st.meteo_std[v] = var <= 1e-12 ? 1.0 : std::sqrt(var);
    }
    for (int e = 0; e < Minicube::kEnvVars; ++e) {
        st.env_min[e] = emin[e];
        st.env_max[e] = emax[e];
    }
    return st;
}

NDArray normalize_frames(const std::vector<float>& frames, int frames_count, int H, int W,
                         const NormStats& stats) {
    const int C = Minicube::kChannels;
    const size_t plane = static_cast<size_t>(H) * W;
    NDArray out({frames_count, C, H, W});
    for (int t = 0; t < frames_count; ++t)
        for (int c = 0; c < C; ++c) {
            double mean = stats.frame_mean[c], inv = 1.0 / stats.frame_std[c];
            const float* src = frames.data() + (static_cast<size_t>(t) * C + c) * plane;
            double* dst = out.data() + (static_cast<size_t>(t) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) * inv;
        }
    return out;
}

std::vector<float> denormalize_frames(const NDArray& frames, const NormStats& stats,
                                      bool clamp01) {
    const int C = Minicube::kChannels;
    if (frames.ndim() != 4 || frames.dim(1) != C)
        fail("denormalize_frames: expected [T,4,H,W]");
    const size_t plane = static_cast<size_t>(frames.dim(2)) * frames.dim(3);
    std::vector<float> out(static_cast<size_t>(frames.size()));
    for (int t = 0; t < frames.dim(0); ++t)
        for (int c = 0; c < C; ++c) {
            double mean = stats.frame_mean[c], sd = stats.frame_std[c];
            const double* src = frames.data() + (static_cast<size_t>(t) * C + c) * plane;
            float* dst = out.data() + (static_cast<size_t>(t) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) {
                double v = src[i] * sd + mean;
                if (clamp01) v = std::clamp(v, 0.0, 1.0);
                dst[i] = static_cast<float>(v);
            }
        }
    return out;
}

NDArray normalize_meteo(const std::vector<float>& meteo, int steps, const NormStats& stats) {
    const int M = Minicube::kMeteoVars;
    NDArray out({steps, M});
    for (int s = 0; s < steps; ++s)
        for (int v = 0; v < M; ++v)
            out.at(s, v) =
                (meteo[static_cast<size_t>(s) * M + v] - stats.meteo_mean[v]) / stats.meteo_std[v];
    return out;
}

NDArray normalize_env(const std::vector<float>& env, int H, int W, const NormStats& stats) {
    const size_t plane = static_cast<size_t>(H) * W;
    NDArray out({Minicube::kEnvVars, H, W});
    // Layer 0 (elevation): min-max to [0,1]. Layer 1 (landcover): class id,
    // passed through for one-hot embedding downstream.
    double span = stats.env_max[0] - stats.env_min[0];
    double inv = span > 1e-12 ? 1.0 / span : 1.0;
    for (size_t i = 0; i < plane; ++i)
        out[static_cast<int64_t>(i)] = (env[i] - stats.env_min[0]) * inv;
    for (size_t i = 0; i < plane; ++i)
        out[static_cast<int64_t>(plane + i)] = env[plane + i];
    return out;
}

AugmentOps draw_augment(Rng& rng) {
    AugmentOps ops;
    ops.flip = rng.bernoulli(0.5);
    ops.transpose = rng.bernoulli(0.5);
    return ops;
}

namespace {

template <typename T>
void transform_plane(const T* src, T* dst, int H, int W, AugmentOps ops) {
    // flip first (x axis), then transpose.
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int sy = y, sx = ops.flip ? W - 1 - x : x;
            T v = src[static_cast<size_t>(sy) * W + sx];
            if (ops.transpose)
                dst[static_cast<size_t>(x) * H + y] = v;
            else
                dst[static_cast<size_t>(y) * W + x] = v;
        }
}

} // namespace

Minicube apply_augment(const Minicube& cube, AugmentOps ops) {
    if (ops.transpose && cube.H != cube.W)
        fail("apply_augment: transpose requires square frames");
    if (!ops.flip && !ops.transpose) return cube;
    Minicube out(cube);
    const size_t plane = static_cast<size_t>(cube.H) * cube.W;
    const int planes_frames = cube.total_frames() * Minicube::kChannels;
    for (int p = 0; p < planes_frames; ++p)
        transform_plane(cube.frames.data() + p * plane, out.frames.data() + p * plane, cube.H,
                        cube.W, ops);
    for (int p = 0; p < Minicube::kEnvVars; ++p)
        transform_plane(cube.env.data() + p * plane, out.env.data() + p * plane, cube.H, cube.W,
                        ops);
    for (int p = 0; p < cube.total_frames(); ++p)
        transform_plane(cube.cloud_mask.data() + p * plane, out.cloud_mask.data() + p * plane,
                        cube.H, cube.W, ops);
    transform_plane(cube.veg_mask.data(), out.veg_mask.data(), cube.H, cube.W, ops);
    if (cube.has_history()) {
        const int hp = static_cast<int>(cube.history_times.size()) * Minicube::kChannels;
        for (int p = 0; p < hp; ++p)
            transform_plane(cube.history_frames.data() + p * plane,
                            out.history_frames.data() + p * plane, cube.H, cube.W, ops);
    }
    return out;
}

} // namespace vegecast
