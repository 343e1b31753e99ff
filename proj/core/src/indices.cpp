#include "vegecast/indices.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "vegecast/minicube.hpp"

using nlohmann::json;

namespace vegecast {

namespace {

struct Px {
    double blue, green, red, nir;
};

template <typename F>
std::vector<float> pointwise_index(const std::vector<float>& frames, int frames_count, int H,
                                   int W, F&& fn) {
    const int C = Minicube::kChannels;
    const size_t plane = static_cast<size_t>(H) * W;
    if (frames.size() != static_cast<size_t>(frames_count) * C * plane)
        throw std::invalid_argument("index: frames shape mismatch");
    std::vector<float> out(static_cast<size_t>(frames_count) * plane);
    for (int t = 0; t < frames_count; ++t) {
        const float* base = frames.data() + static_cast<size_t>(t) * C * plane;
        float* dst = out.data() + static_cast<size_t>(t) * plane;
        for (size_t i = 0; i < plane; ++i) {
            Px p{base[i], base[plane + i], base[2 * plane + i], base[3 * plane + i]};
            dst[i] = static_cast<float>(fn(p, t, i));
        }
    }
    return out;
}

} // namespace

std::vector<float> ndvi(const std::vector<float>& frames, int frames_count, int H, int W) {
    return pointwise_index(frames, frames_count, H, W, [](const Px& p, int, size_t) {
        double v = (p.nir - p.red) / (p.nir + p.red + kIndexDelta);
        return std::clamp(v, -1.0, 1.0);
    });
}

std::vector<float> arvi(const std::vector<float>& frames, int frames_count, int H, int W) {
    // gamma = 1: red_adj = red - (blue - red) = 2*red - blue.
    return pointwise_index(frames, frames_count, H, W, [](const Px& p, int, size_t) {
        double red_adj = 2.0 * p.red - p.blue;
        double v = (p.nir - red_adj) / (p.nir + red_adj + kIndexDelta);
        return std::clamp(v, -1.0, 1.0);
    });
}

std::vector<float> evi(const std::vector<float>& frames, int frames_count, int H, int W) {
    return pointwise_index(frames, frames_count, H, W, [](const Px& p, int, size_t) {
        double v = 2.5 * (p.nir - p.red) / (p.nir + 6.0 * p.red - 7.5 * p.blue + 1.0 + kIndexDelta);
        return std::clamp(v, -1.5, 1.5);
    });
}

std::vector<float> sipi(const std::vector<float>& frames, int frames_count, int H, int W,
                        std::vector<uint8_t>* flagged) {
    const size_t plane = static_cast<size_t>(H) * W;
    if (flagged) flagged->assign(static_cast<size_t>(frames_count) * plane, 0);
    return pointwise_index(frames, frames_count, H, W, [&](const Px& p, int t, size_t i) {
        double v = (p.nir - p.blue) / (p.nir - p.red + kIndexDelta);
        if ((v < 0.0 || v > 2.0) && flagged)
            (*flagged)[static_cast<size_t>(t) * plane + i] = 1;
        return std::clamp(v, 0.0, 2.0);
    });
}

double rmse(const std::vector<float>& pred, const std::vector<float>& target,
            const std::vector<uint8_t>* mask, int channels, int H, int W) {
    if (pred.size() != target.size()) throw std::invalid_argument("rmse: size mismatch");
    double s = 0.0;
    int64_t n = 0;
    if (!mask) {
        for (size_t i = 0; i < pred.size(); ++i) {
            double d = static_cast<double>(pred[i]) - target[i];
            s += d * d;
        }
        n = static_cast<int64_t>(pred.size());
    } else {
        const size_t plane = static_cast<size_t>(H) * W;
        if (plane == 0 || mask->size() != plane)
            throw std::invalid_argument("rmse: mask shape mismatch");
        const size_t planes = pred.size() / plane;
        (void)channels;
        for (size_t p = 0; p < planes; ++p)
            for (size_t i = 0; i < plane; ++i) {
                if (!(*mask)[i]) continue;
                double d = static_cast<double>(pred[p * plane + i]) - target[p * plane + i];
                s += d * d;
                ++n;
            }
    }
    if (n == 0) throw std::invalid_argument("rmse: empty support");
    return std::sqrt(s / static_cast<double>(n));
}

namespace {

std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<size_t>(size));
    int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        double d = i - half;
        k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

double ssim_plane(const float* a, const float* b, int H, int W, const SsimConstants& c,
                  const std::vector<double>& kern) {
    const int win = c.window;
    if (H < win || W < win)
        throw std::invalid_argument("ssim: image smaller than window");
    const int oh = H - win + 1, ow = W - win + 1;
    double total = 0.0;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int ky = 0; ky < win; ++ky) {
                double wy = kern[static_cast<size_t>(ky)];
                const float* ra = a + static_cast<size_t>(oy + ky) * W + ox;
                const float* rb = b + static_cast<size_t>(oy + ky) * W + ox;
                for (int kx = 0; kx < win; ++kx) {
                    double w = wy * kern[static_cast<size_t>(kx)];
                    double va = ra[kx], vb = rb[kx];
                    mx += w * va;
                    my += w * vb;
                    xx += w * va * va;
                    yy += w * vb * vb;
                    xy += w * va * vb;
                }
            }
            double vx = xx - mx * mx;
            double vy = yy - my * my;
            double cxy = xy - mx * my;
            double num = (2.0 * mx * my + c.c1) * (2.0 * cxy + c.c2);
            double den = (mx * mx + my * my + c.c1) * (vx + vy + c.c2);
            total += num / den;
        }
    return total / (static_cast<double>(oh) * ow);
}

} // namespace

double ssim(const std::vector<float>& pred, const std::vector<float>& target, int frames_count,
            int channels, int H, int W) {
    if (pred.size() != target.size()) throw std::invalid_argument("ssim: size mismatch");
    const size_t plane = static_cast<size_t>(H) * W;
    if (pred.size() != static_cast<size_t>(frames_count) * channels * plane)
        throw std::invalid_argument("ssim: shape mismatch");
    SsimConstants c;
    auto kern = gaussian_kernel(c.window, c.sigma);
    double total = 0.0;
    const int planes = frames_count * channels;
    for (int p = 0; p < planes; ++p)
        total += ssim_plane(pred.data() + p * plane, target.data() + p * plane, H, W, c, kern);
    return total / planes;
}

std::vector<float> target_maps(const std::string& target, const std::vector<float>& frames,
                               int frames_count, int H, int W, int* channels_out) {
    if (target == "rgbn") {
        if (channels_out) *channels_out = Minicube::kChannels;
        return frames;
    }
    if (channels_out) *channels_out = 1;
    if (target == "ndvi") return ndvi(frames, frames_count, H, W);
    if (target == "arvi") return arvi(frames, frames_count, H, W);
    if (target == "evi") return evi(frames, frames_count, H, W);
    if (target == "sipi") return sipi(frames, frames_count, H, W);
    throw std::invalid_argument("unknown metric target: " + target);
}

MetricsReport compute_metrics(const std::string& target, const std::vector<float>& forecast,
                              const std::vector<float>& truth, int K, int H, int W,
                              const std::vector<uint8_t>* veg_mask) {
    int C = 0;
    auto fm = target_maps(target, forecast, K, H, W, &C);
    auto tm = target_maps(target, truth, K, H, W, &C);
    const size_t frame_len = static_cast<size_t>(C) * H * W;

    MetricsReport rep;
    rep.target = target;
    rep.masked = veg_mask != nullptr;
    rep.per_lead_rmse.resize(static_cast<size_t>(K));
    rep.per_lead_ssim.resize(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
        std::vector<float> fk(fm.begin() + k * frame_len, fm.begin() + (k + 1) * frame_len);
        std::vector<float> tk(tm.begin() + k * frame_len, tm.begin() + (k + 1) * frame_len);
        rep.per_lead_rmse[static_cast<size_t>(k)] = rmse(fk, tk, veg_mask, C, H, W);
        rep.per_lead_ssim[static_cast<size_t>(k)] = ssim(fk, tk, 1, C, H, W);
    }
    rep.aggregate_rmse = rmse(fm, tm, veg_mask, C, H, W);
    rep.aggregate_ssim = ssim(fm, tm, K, C, H, W);
    return rep;
}

std::string MetricsReport::to_json_string() const {
    SsimConstants c;
    json j;
    j["target"] = target;
    j["masked"] = masked;
    json leads = json::array();
    for (size_t k = 0; k < per_lead_rmse.size(); ++k)
        leads.push_back({{"lead", k + 1}, {"rmse", per_lead_rmse[k]}, {"ssim", per_lead_ssim[k]}});
    j["per_lead_time"] = leads;
    j["aggregate"] = {{"rmse", aggregate_rmse}, {"ssim", aggregate_ssim}};
    j["constants"] = {{"index_delta", kIndexDelta},
                      {"arvi_gamma", 1.0},
                      {"ssim_window", c.window},
                      {"ssim_sigma", c.sigma},
                      {"ssim_c1", c.c1},
                      {"ssim_c2", c.c2},
                      {"data_range", c.data_range}};
    return j.dump(2);
}

} // namespace vegecast
