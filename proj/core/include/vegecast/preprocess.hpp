#pragma once

#include <array>
#include <string>
#include <vector>

#include "vegecast/minicube.hpp"
#include "vegecast/ndarray.hpp"
#include "vegecast/rng.hpp"

namespace vegecast {

/// Normalization constants; computed on the training split only.
/// Frames map to zero mean / unit std per channel, meteo per variable,
/// env layers to [0,1] by min-max. The landcover layer is a class id and
/// passes through normalization unchanged (the denoiser one-hot encodes it).
struct NormStats {
    std::array<double, 4> frame_mean{}, frame_std{};
    std::array<double, 9> meteo_mean{}, meteo_std{};
    std::array<double, 2> env_min{}, env_max{};

    std::string to_json_string() const;
    static NormStats from_json_string(const std::string& s);
};

/// Replaces each cloud-masked value with the mean of the nearest unmasked
/// values at the same pixel in the preceding and succeeding frames (one side
/// when only one exists). Throws "pixel fully occluded" listing coordinates.
std::vector<float> fill_cloud_gaps(const std::vector<float>& frames,
                                   const std::vector<uint8_t>& cloud_mask, int frames_count,
                                   int H, int W);

/// Replaces every frame of each non-vegetated pixel with the temporal mean of
/// its first `context_len` frames.
std::vector<float> fill_non_vegetation(const std::vector<float>& frames,
                                       const std::vector<uint8_t>& veg_mask, int frames_count,
                                       int H, int W, int context_len = 10);

/// Both fills, cloud first, applied to a whole cube.
Minicube fill_gaps(const Minicube& cube, int context_len = 10);

NormStats compute_norm_stats(const std::vector<Minicube>& train_cubes);

NDArray normalize_frames(const std::vector<float>& frames, int frames_count, int H, int W,
                         const NormStats& stats);
std::vector<float> denormalize_frames(const NDArray& frames, const NormStats& stats,
                                      bool clamp01 = false);
NDArray normalize_meteo(const std::vector<float>& meteo, int steps, const NormStats& stats);
NDArray normalize_env(const std::vector<float>& env, int H, int W, const NormStats& stats);

struct AugmentOps {
    bool flip = false;      // horizontal (x axis)
    bool transpose = false; // swap spatial axes; requires H == W
};

/// Draws flip and transpose independently, each with probability 0.5.
AugmentOps draw_augment(Rng& rng);

/// Applies the same spatial transform to frames, env, masks and history;
/// meteo is untouched.
Minicube apply_augment(const Minicube& cube, AugmentOps ops);

inline Minicube augment(const Minicube& cube, Rng& rng) {
    return apply_augment(cube, draw_augment(rng));
}

} // namespace vegecast
