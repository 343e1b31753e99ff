#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace vegecast {

/// One spatiotemporal sample: an RGBN frame series with meteorological
/// drivers, static environment layers, and masks. Arrays are row-major
/// float32/uint8, matching the on-disk format bit for bit.
struct Minicube {
    static constexpr int kChannels = 4;  // blue, green, red, nir
    static constexpr int kMeteoVars = 9;
    static constexpr int kEnvVars = 2;   // elevation, landcover

    int T = 10;             // context frames
    int K = 20;             // forecast horizon
    int H = 32, W = 32;
    int meteo_cadence = 5;  // meteo steps per frame

    std::vector<float> frames;       // [T+K, 4, H, W], reflectance in [0,1]
    std::vector<float> meteo;        // [(T+K)*cadence, kMeteoVars]
    std::vector<float> env;          // [kEnvVars, H, W]
    std::vector<uint8_t> cloud_mask; // [T+K, H, W]
    std::vector<uint8_t> veg_mask;   // [H, W]

    // Optional previous-year reference series (cloud-free), with timestamps
    // in frame-index units.
    std::vector<float> history_frames; // [T_hist, 4, H, W]
    std::vector<float> history_times;  // [T_hist]

    int total_frames() const { return T + K; }
    int meteo_steps() const { return (T + K) * meteo_cadence; }
    bool has_history() const { return !history_frames.empty(); }

    float& frame_at(int t, int c, int y, int x) {
        return frames[((static_cast<size_t>(t) * kChannels + c) * H + y) * W + x];
    }
    float frame_at(int t, int c, int y, int x) const {
        return frames[((static_cast<size_t>(t) * kChannels + c) * H + y) * W + x];
    }
    float& env_at(int e, int y, int x) { return env[(static_cast<size_t>(e) * H + y) * W + x]; }
    float env_at(int e, int y, int x) const {
        return env[(static_cast<size_t>(e) * H + y) * W + x];
    }
    bool cloud_at(int t, int y, int x) const {
        return cloud_mask[(static_cast<size_t>(t) * H + y) * W + x] != 0;
    }
    bool veg_at(int y, int x) const { return veg_mask[static_cast<size_t>(y) * W + x] != 0; }
    float meteo_at(int step, int var) const {
        return meteo[static_cast<size_t>(step) * kMeteoVars + var];
    }

    /// Throws std::runtime_error naming the offending field.
    void validate() const;
};

extern const std::array<const char*, 4> kChannelNames;
extern const std::array<const char*, 9> kMeteoNames;
extern const std::array<const char*, 2> kEnvNames;

int meteo_var_index(const std::string& name); // -1 if unknown

/// Writes meta.json plus one raw little-endian binary per array.
void save_minicube(const Minicube& cube, const std::string& dir);
Minicube load_minicube(const std::string& dir);

// ------------------------------------------------------------------ generator

struct GeneratorConfig {
    int H = 32, W = 32, T = 10, K = 20;
    int meteo_cadence = 5;
    double cloud_fraction = 0.08;
    double rain_scale = 1.0;

    // Logistic growth v' = v + r * g(rain,temp) * v * (1 - v/cap).
    double growth_rate = 0.30;
    double rain_sensitivity = 6.0; // slope of the sigmoidal rain response
    double rain_midpoint = 0.45;
    double temp_optimum = 0.55;
    double temp_width = 0.45;

    double veg_fraction = 0.8;
    int landcover_classes = 4; // class 0 = non-vegetation

    bool emit_history = false;
    int history_cadence = 2;
    bool history_identical = false;

    void validate() const;
};

/// Smooth positive growth response, strictly increasing in rain.
double growth_response(double rain, double temp, const GeneratorConfig& cfg);

/// Invertible rendering of a vegetation-index value into RGBN reflectances:
/// nir = tau*(1+v)/2, red = tau*(1-v)/2 so (nir-red)/(nir+red) == v; blue and
/// green carry redundant shading. tau in [0.6, 0.9] is a static texture.
std::array<float, 4> render_rgbn(double v, double tau);

/// Deterministic function of (seed, cfg).
Minicube generate_synthetic_cube(uint64_t seed, const GeneratorConfig& cfg);

// ---------------------------------------------------------------------- split

struct SplitSpec {
    std::vector<std::string> train_paths, val_paths, test_paths;
    uint64_t seed = 0;
};

SplitSpec split_dataset(const std::vector<std::string>& paths,
                        const std::array<double, 3>& ratios, uint64_t seed);

} // namespace vegecast
