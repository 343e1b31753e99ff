#pragma once

#include <optional>
#include <string>
#include <vector>

namespace vegecast {

/// All index functions take [T,4,H,W] reflectance frames (channel order
/// blue, green, red, nir) and return [T,H,W] maps. Denominators carry a
/// delta = 1e-8 guard; outputs are clamped to the documented ranges.
inline constexpr double kIndexDelta = 1e-8;

std::vector<float> ndvi(const std::vector<float>& frames, int frames_count, int H, int W);
std::vector<float> arvi(const std::vector<float>& frames, int frames_count, int H, int W);
std::vector<float> evi(const std::vector<float>& frames, int frames_count, int H, int W);
/// flagged, when given, marks pixels whose raw value fell outside [0,2]
/// (including the nir == red singularity).
std::vector<float> sipi(const std::vector<float>& frames, int frames_count, int H, int W,
                        std::vector<uint8_t>* flagged = nullptr);

/// sqrt(mean squared difference). mask, when given, is a [H,W] vegetation
/// mask replicated across frames (and channels); only true pixels count.
double rmse(const std::vector<float>& pred, const std::vector<float>& target,
            const std::vector<uint8_t>* mask = nullptr, int channels = 1, int H = 0, int W = 0);

/// Mean windowed SSIM over frames and channels: Gaussian window 7, sigma 1.5,
/// C1=(0.01*L)^2, C2=(0.03*L)^2 with data range L=1.
double ssim(const std::vector<float>& pred, const std::vector<float>& target, int frames_count,
            int channels, int H, int W);

struct SsimConstants {
    int window = 7;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
    double data_range = 1.0;
};

/// Per-target, per-lead-time metric table plus aggregates.
struct MetricsReport {
    std::string target; // rgbn | ndvi | arvi | evi | sipi
    bool masked = true;
    std::vector<double> per_lead_rmse;
    std::vector<double> per_lead_ssim;
    double aggregate_rmse = 0.0;
    double aggregate_ssim = 0.0;

    std::string to_json_string() const;
};

/// Computes index maps for a named target ("rgbn" returns frames unchanged).
std::vector<float> target_maps(const std::string& target, const std::vector<float>& frames,
                               int frames_count, int H, int W, int* channels_out);

/// Builds the report for one (forecast, truth) pair; per-lead values are
/// averaged over the supplied per-cube results by the eval harness.
MetricsReport compute_metrics(const std::string& target, const std::vector<float>& forecast,
                              const std::vector<float>& truth, int K, int H, int W,
                              const std::vector<uint8_t>* veg_mask);

} // namespace vegecast
