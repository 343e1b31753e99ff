#include "vegecast/minicube.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "vegecast/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vegecast {

const std::array<const char*, 4> kChannelNames = {"blue", "green", "red", "nir"};
const std::array<const char*, 9> kMeteoNames = {
    "wind_speed",   "relative_humidity", "shortwave_radiation",
    "rainfall",     "sea_level_pressure", "temperature_mean",
    "temperature_min", "temperature_max", "spare"};
const std::array<const char*, 2> kEnvNames = {"elevation", "landcover"};

int meteo_var_index(const std::string& name) {
    for (size_t i = 0; i < kMeteoNames.size(); ++i)
        if (name == kMeteoNames[i]) return static_cast<int>(i);
    return -1;
}

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check_finite_01(const std::vector<float>& v, const std::string& field, bool range01) {
    for (float x : v) {
        if (std::isnan(x)) fail("validation error: " + field + " contains NaN");
        if (std::isinf(x)) fail("validation error: " + field + " contains Inf");
        if (range01 && (x < 0.0f || x > 1.0f))
            fail("validation error: " + field + " outside [0,1]");
    }
}

void check_finite(const std::vector<float>& v, const std::string& field) {
    check_finite_01(v, field, false);
}

} // namespace

void Minicube::validate() const {
    const size_t tt = static_cast<size_t>(total_frames());
    if (T < 1) fail("validation error: context_len must be >= 1");
    if (K < 1) fail("validation error: horizon must be >= 1");
    if (meteo_cadence < 1) fail("validation error: meteo_cadence must be >= 1");
    if (frames.size() != tt * kChannels * H * W)
        fail("validation error: frames has wrong length");
    if (meteo.size() != static_cast<size_t>(meteo_steps()) * kMeteoVars)
        fail("validation error: meteo has wrong length");
    if (env.size() != static_cast<size_t>(kEnvVars) * H * W)
        fail("validation error: env spatial dims do not match frames");
    if (cloud_mask.size() != tt * H * W)
        fail("validation error: cloud_mask leading dimension does not match frames");
    if (veg_mask.size() != static_cast<size_t>(H) * W)
        fail("validation error: veg_mask has wrong length");
    check_finite_01(frames, "frames", true);
    check_finite(meteo, "meteo");
    check_finite(env, "env");
    if (!history_frames.empty()) {
        if (history_times.empty() ||
            history_frames.size() != history_times.size() * kChannels * H * W)
            fail("validation error: history_frames/history_times inconsistent");
        check_finite_01(history_frames, "history_frames", true);
        check_finite(history_times, "history_times");
    }
}

// ------------------------------------------------------------------ disk io

namespace {

constexpr int kFormatVersion = 1;

struct ArrayRef {
    const char* name;
    const void* data;
    size_t count;
    std::vector<int> shape;
    bool is_bool;
};

void write_raw(const fs::path& p, const void* data, size_t bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot open for writing: " + p.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) fail("write failed: " + p.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& p, size_t expect_count) {
    std::ifstream f(p, std::ios::binary | std::ios::ate);
    if (!f) fail("missing file: " + p.string());
    auto bytes = static_cast<size_t>(f.tellg());
    if (bytes != expect_count * sizeof(T))
        fail("shape error: " + p.filename().string() + " holds " +
             std::to_string(bytes / sizeof(T)) + " values, meta.json declares " +
             std::to_string(expect_count));
    f.seekg(0);
    std::vector<T> out(expect_count);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!f) fail("read failed: " + p.string());
    return out;
}

} // namespace

void save_minicube(const Minicube& cube, const std::string& dir) {
    cube.validate();
    fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) fail("unwritable path: " + dir);

    std::vector<ArrayRef> arrays = {
        {"frames", cube.frames.data(), cube.frames.size(),
         {cube.total_frames(), Minicube::kChannels, cube.H, cube.W}, false},
        {"meteo", cube.meteo.data(), cube.meteo.size(),
         {cube.meteo_steps(), Minicube::kMeteoVars}, false},
        {"env", cube.env.data(), cube.env.size(), {Minicube::kEnvVars, cube.H, cube.W}, false},
        {"cloud_mask", cube.cloud_mask.data(), cube.cloud_mask.size(),
         {cube.total_frames(), cube.H, cube.W}, true},
        {"veg_mask", cube.veg_mask.data(), cube.veg_mask.size(), {cube.H, cube.W}, true},
    };
    if (cube.has_history()) {
        int th = static_cast<int>(cube.history_times.size());
        arrays.push_back({"history_frames", cube.history_frames.data(), cube.history_frames.size(),
                          {th, Minicube::kChannels, cube.H, cube.W}, false});
        arrays.push_back({"history_times", cube.history_times.data(), cube.history_times.size(),
                          {th}, false});
    }

    json meta;
    meta["format_version"] = kFormatVersion;
    meta["context_len"] = cube.T;
    meta["horizon"] = cube.K;
    meta["meteo_cadence"] = cube.meteo_cadence;
    meta["channel_names"] = kChannelNames;
    meta["meteo_names"] = kMeteoNames;
    meta["env_names"] = kEnvNames;
    json jarr;
    for (const auto& a : arrays) {
        std::string file = std::string(a.name) + ".bin";
        jarr[a.name] = {{"shape", a.shape},
                        {"dtype", a.is_bool ? "bool8" : "float32"},
                        {"file", file}};
        write_raw(root / file, a.data, a.count * (a.is_bool ? 1 : 4));
    }
    meta["arrays"] = jarr;

    std::ofstream mf(root / "meta.json");
    if (!mf) fail("unwritable path: " + dir);
    mf << meta.dump(2) << "\n";
}

Minicube load_minicube(const std::string& dir) {
    fs::path root(dir);
    std::ifstream mf(root / "meta.json");
    if (!mf) fail("missing file: " + (root / "meta.json").string());
    json meta;
    try {
        mf >> meta;
    } catch (const json::exception& e) {
        fail("malformed meta.json: " + std::string(e.what()));
    }
    int version = meta.at("format_version").get<int>();
    if (version != kFormatVersion)
        fail("unsupported format version " + std::to_string(version));

    Minicube cube;
    cube.T = meta.at("context_len").get<int>();
    cube.K = meta.at("horizon").get<int>();
    cube.meteo_cadence = meta.value("meteo_cadence", 1);
    const json& jarr = meta.at("arrays");

    auto shape_of = [&](const char* name) {
        return jarr.at(name).at("shape").get<std::vector<int>>();
    };
    auto count_of = [](const std::vector<int>& s) {
        return static_cast<size_t>(
            std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<int64_t>()));
    };
    auto file_of = [&](const char* name) {
        return root / jarr.at(name).at("file").get<std::string>();
    };

    auto fshape = shape_of("frames");
    if (fshape.size() != 4 || fshape[1] != Minicube::kChannels)
        fail("shape error: frames must be [T+K,4,H,W]");
    cube.H = fshape[2];
    cube.W = fshape[3];
    if (fshape[0] != cube.total_frames())
        fail("shape error: frames leading dim " + std::to_string(fshape[0]) +
             " != context_len + horizon");

    cube.frames = read_raw<float>(file_of("frames"), count_of(fshape));
    auto mshape = shape_of("meteo");
    if (mshape.size() != 2 || mshape[1] != Minicube::kMeteoVars ||
        mshape[0] % cube.total_frames() != 0)
        fail("shape error: meteo must be [k*(T+K)," + std::to_string(Minicube::kMeteoVars) + "]");
    cube.meteo = read_raw<float>(file_of("meteo"), count_of(mshape));
    cube.meteo_cadence = mshape[0] / cube.total_frames();
    cube.env = read_raw<float>(file_of("env"), count_of(shape_of("env")));
    cube.cloud_mask = read_raw<uint8_t>(file_of("cloud_mask"), count_of(shape_of("cloud_mask")));
    cube.veg_mask = read_raw<uint8_t>(file_of("veg_mask"), count_of(shape_of("veg_mask")));
    if (jarr.contains("history_frames")) {
        cube.history_frames =
            read_raw<float>(file_of("history_frames"), count_of(shape_of("history_frames")));
        cube.history_times =
            read_raw<float>(file_of("history_times"), count_of(shape_of("history_times")));
    }
    cube.validate();
    return cube;
}

// ----------------------------------------------------------------- generator

void GeneratorConfig::validate() const {
    if (H < 4 || W < 4) fail("generator config: H and W must be >= 4");
    if (T < 1 || K < 1) fail("generator config: T and K must be >= 1");
    if (meteo_cadence < 1) fail("generator config: meteo_cadence must be >= 1");
    if (cloud_fraction < 0.0 || cloud_fraction > 0.9)
        fail("generator config: cloud_fraction outside [0, 0.9]");
    if (rain_scale < 0.0) fail("generator config: rain_scale must be >= 0");
    if (landcover_classes < 2) fail("generator config: need >= 2 landcover classes");
    if (veg_fraction <= 0.0 || veg_fraction > 1.0)
        fail("generator config: veg_fraction outside (0, 1]");
    if (emit_history && history_cadence < 1)
        fail("generator config: history_cadence must be >= 1");
}

double growth_response(double rain, double temp, const GeneratorConfig& cfg) {
    double rs = 1.0 / (1.0 + std::exp(-cfg.rain_sensitivity * (rain - cfg.rain_midpoint)));
    double dt = (temp - cfg.temp_optimum) / cfg.temp_width;
    return rs * std::exp(-dt * dt);
}

std::array<float, 4> render_rgbn(double v, double tau) {
    double nir = tau * (1.0 + v) / 2.0;
    double red = tau * (1.0 - v) / 2.0;
    double blue = 0.08 + 0.10 * (1.0 - v);
    double green = 0.12 + 0.30 * v;
    auto c = [](double x) { return static_cast<float>(std::clamp(x, 0.0, 1.0)); };
    return {c(blue), c(green), c(red), c(nir)};
}

namespace {

/// Smooth field in [0,1] as a sum of random cosine waves, min-max scaled.
std::vector<double> smooth_field(Rng rng, int H, int W, int waves = 6) {
    std::vector<double> f(static_cast<size_t>(H) * W, 0.0);
    for (int j = 0; j < waves; ++j) {
        double fy = rng.uniform(0.5, 3.0), fx = rng.uniform(0.5, 3.0);
        double ph = rng.uniform(0.0, 2.0 * M_PI);
        double amp = rng.uniform(0.5, 1.0);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                f[static_cast<size_t>(y) * W + x] +=
                    amp * std::cos(2.0 * M_PI * (fy * y / H + fx * x / W) + ph);
    }
    double lo = *std::min_element(f.begin(), f.end());
    double hi = *std::max_element(f.begin(), f.end());
    double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    for (double& v : f) v = (v - lo) / span;
    return f;
}

/// AR(1) series in roughly [0,1] around a seasonal sinusoid.
std::vector<double> seasonal_series(Rng& rng, int n, double level, double amp, double phase,
                                    double noise_sigma) {
    std::vector<double> s(n);
    double ar = 0.0;
    for (int i = 0; i < n; ++i) {
        ar = 0.9 * ar + noise_sigma * rng.normal();
        double t = static_cast<double>(i) / std::max(1, n - 1);
        s[i] = std::clamp(level + amp * std::sin(2.0 * M_PI * (t + phase)) + ar, 0.01, 0.99);
    }
    return s;
}

struct SceneFields {
    std::vector<double> elevation, v0, tau;
    std::vector<uint8_t> landcover;
};

SceneFields make_scene(const Rng& root, const GeneratorConfig& cfg) {
    SceneFields s;
    const size_t n = static_cast<size_t>(cfg.H) * cfg.W;
    s.elevation = smooth_field(root.split(1), cfg.H, cfg.W);
    std::vector<double> lc_field = smooth_field(root.split(2), cfg.H, cfg.W);
    s.v0 = smooth_field(root.split(3), cfg.H, cfg.W);
    s.tau = smooth_field(root.split(4), cfg.H, cfg.W);

    // Threshold the landcover field into classes; lowest quantile is class 0
    // (non-vegetation) occupying 1 - veg_fraction of pixels.
    std::vector<double> sorted(lc_field);
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        size_t i = std::min(n - 1, static_cast<size_t>(q * static_cast<double>(n)));
        return sorted[i];
    };
    double q0 = quantile(1.0 - cfg.veg_fraction);
    int veg_classes = cfg.landcover_classes - 1;
    s.landcover.resize(n);
    for (size_t i = 0; i < n; ++i) {
        if (lc_field[i] < q0) {
            s.landcover[i] = 0;
        } else {
            int c = 1;
            for (int j = 2; j <= veg_classes; ++j) {
                double qj = quantile(1.0 - cfg.veg_fraction + cfg.veg_fraction *

                                                                  (j - 1.0) / veg_classes);
                if (lc_field[i] >= qj) c = j;
            }
            s.landcover[i] = static_cast<uint8_t>(c);
        }
    }
    for (size_t i = 0; i < n; ++i) {
        s.v0[i] = s.landcover[i] == 0 ? 0.08 : 0.15 + 0.25 * s.v0[i];
        s.tau[i] = 0.6 + 0.3 * s.tau[i];
    }
    return s;
}

double capacity(double elev, int landcover) {
    double cls = 1.0 - 0.12 * (landcover - 1);
    return std::max(0.3, 0.95 * (1.0 - 0.35 * elev) * cls);
}

/// Evolves the per-pixel logistic vegetation state over all frames.
std::vector<std::vector<double>> simulate_v(const SceneFields& scene,
                                            const std::vector<double>& rain_frame,
                                            const std::vector<double>& temp_frame,
                                            const GeneratorConfig& cfg) {
    const size_t n = scene.elevation.size();
    const int tt = cfg.T + cfg.K;
    std::vector<std::vector<double>> v(tt, std::vector<double>(n));
    v[0] = scene.v0;
    for (int t = 0; t + 1 < tt; ++t) {
        double g = growth_response(rain_frame[t], temp_frame[t], cfg);
        for (size_t i = 0; i < n; ++i) {
            if (scene.landcover[i] == 0) {
                v[t + 1][i] = v[t][i];
                continue;
            }
            double cap = capacity(scene.elevation[i], scene.landcover[i]);
            double x = v[t][i];
            double nx = x + cfg.growth_rate * g * x * (1.0 - x / cap);
            v[t + 1][i] = std::clamp(nx, 0.02, 0.98);
        }
    }
    return v;
}

} // namespace

Minicube generate_synthetic_cube(uint64_t seed, const GeneratorConfig& cfg) {
    cfg.validate();
    Rng root(seed);
    const int tt = cfg.T + cfg.K;
    const int tm = tt * cfg.meteo_cadence;
    const size_t n = static_cast<size_t>(cfg.H) * cfg.W;

    SceneFields scene = make_scene(root, cfg);

    // Meteorology at the fine cadence. Rainfall and mean temperature drive
    // the dynamics; the remaining variables are plausible correlates.
    Rng mrng = root.split(5);
    double rain_level = mrng.uniform(0.35, 0.65);
    double rain_amp = mrng.uniform(0.15, 0.30);
    double rain_phase = mrng.uniform(0.0, 1.0);
    double temp_level = mrng.uniform(0.45, 0.65);
    double temp_phase = mrng.uniform(0.0, 1.0);
    std::vector<double> rain = seasonal_series(mrng, tm, rain_level, rain_amp, rain_phase, 0.04);
    std::vector<double> temp = seasonal_series(mrng, tm, temp_level, 0.15, temp_phase, 0.03);
    std::vector<double> wind = seasonal_series(mrng, tm, 0.4, 0.1, mrng.uniform(0.0, 1.0), 0.06);
    std::vector<double> humid = seasonal_series(mrng, tm, 0.6, 0.15, rain_phase, 0.05);
    std::vector<double> rad = seasonal_series(mrng, tm, 0.55, 0.2, temp_phase, 0.04);
    std::vector<double> pres = seasonal_series(mrng, tm, 0.5, 0.05, mrng.uniform(0.0, 1.0), 0.03);
    for (double& r : rain) r *= cfg.rain_scale;

    Minicube cube;
    cube.T = cfg.T;
    cube.K = cfg.K;
    cube.H = cfg.H;
    cube.W = cfg.W;
    cube.meteo_cadence = cfg.meteo_cadence;
    cube.meteo.resize(static_cast<size_t>(tm) * Minicube::kMeteoVars);
    Rng trng = root.split(6);
    for (int m = 0; m < tm; ++m) {
        double spread_lo = 0.05 + 0.05 * trng.uniform();
        double spread_hi = 0.05 + 0.05 * trng.uniform();
        float* row = cube.meteo.data() + static_cast<size_t>(m) * Minicube::kMeteoVars;
        row[0] = static_cast<float>(wind[m]);
        row[1] = static_cast<float>(humid[m]);
        row[2] = static_cast<float>(rad[m]);
        row[3] = static_cast<float>(rain[m]);
        row[4] = static_cast<float>(pres[m]);
        row[5] = static_cast<float>(temp[m]);
        row[6] = static_cast<float>(temp[m] - spread_lo);
        row[7] = static_cast<float>(temp[m] + spread_hi);
        row[8] = 0.0f;
    }

    // Frame-cadence drivers: mean over each frame's meteo window.
    std::vector<double> rain_frame(tt), temp_frame(tt);
    for (int t = 0; t < tt; ++t) {
        double rs = 0.0, ts = 0.0;
        for (int j = 0; j < cfg.meteo_cadence; ++j) {
            rs += rain[static_cast<size_t>(t) * cfg.meteo_cadence + j];
            ts += temp[static_cast<size_t>(t) * cfg.meteo_cadence + j];
        }
        rain_frame[t] = rs / cfg.meteo_cadence;
        temp_frame[t] = ts / cfg.meteo_cadence;
    }

    auto v = simulate_v(scene, rain_frame, temp_frame, cfg);

    cube.env.resize(static_cast<size_t>(Minicube::kEnvVars) * n);
    cube.veg_mask.resize(n);
    for (size_t i = 0; i < n; ++i) {
        cube.env[i] = static_cast<float>(scene.elevation[i]);
        cube.env[n + i] = static_cast<float>(scene.landcover[i]);
        cube.veg_mask[i] = scene.landcover[i] != 0 ? 1 : 0;
    }

    cube.frames.resize(static_cast<size_t>(tt) * Minicube::kChannels * n);
    cube.cloud_mask.assign(static_cast<size_t>(tt) * n, 0);
    Rng crng = root.split(7);
    for (int t = 0; t < tt; ++t) {
        for (int y = 0; y < cfg.H; ++y)
            for (int x = 0; x < cfg.W; ++x) {
                size_t i = static_cast<size_t>(y) * cfg.W + x;
                auto px = render_rgbn(v[t][i], scene.tau[i]);
                bool cloudy = cfg.cloud_fraction > 0.0 && crng.bernoulli(cfg.cloud_fraction);
                if (cloudy) {
                    cube.cloud_mask[static_cast<size_t>(t) * n + i] = 1;
                    float bright = static_cast<float>(0.80 + 0.15 * crng.uniform());
                    px = {bright, bright, bright, static_cast<float>(bright * 0.95)};
                }
                for (int c = 0; c < Minicube::kChannels; ++c)
                    cube.frame_at(t, c, y, x) = px[static_cast<size_t>(c)];
            }
    }

    if (cfg.emit_history) {
        // Previous-year reference: same scene, its own (or identical) weather,
        // sampled at history_cadence and always covering the last frame.
        std::vector<std::vector<double>> vh;
        if (cfg.history_identical) {
            vh = v;
        } else {
            Rng hrng = root.split(8);
            double h_level = rain_level + hrng.uniform(-0.08, 0.08);
            double h_phase = rain_phase + hrng.uniform(-0.05, 0.05);
            std::vector<double> hrain =
                seasonal_series(hrng, tm, h_level, rain_amp, h_phase, 0.04);
            std::vector<double> htemp =
                seasonal_series(hrng, tm, temp_level, 0.15, temp_phase, 0.03);
            for (double& r : hrain) r *= cfg.rain_scale;
            std::vector<double> hrain_f(tt), htemp_f(tt);
            for (int t = 0; t < tt; ++t) {
                double rs = 0.0, ts = 0.0;
                for (int j = 0; j < cfg.meteo_cadence; ++j) {
                    rs += hrain[static_cast<size_t>(t) * cfg.meteo_cadence + j];
                    ts += htemp[static_cast<size_t>(t) * cfg.meteo_cadence + j];
                }
                hrain_f[t] = rs / cfg.meteo_cadence;
                htemp_f[t] = ts / cfg.meteo_cadence;
            }
            vh = simulate_v(scene, hrain_f, htemp_f, cfg);
        }
        std::vector<int> stamps;
        for (int t = 0; t < tt; t += cfg.history_cadence) stamps.push_back(t);
        if (stamps.back() != tt - 1) stamps.push_back(tt - 1);
        cube.history_times.reserve(stamps.size());
        cube.history_frames.resize(stamps.size() * Minicube::kChannels * n);
        for (size_t si = 0; si < stamps.size(); ++si) {
            cube.history_times.push_back(static_cast<float>(stamps[si]));
            for (int y = 0; y < cfg.H; ++y)
                for (int x = 0; x < cfg.W; ++x) {
                    size_t i = static_cast<size_t>(y) * cfg.W + x;
                    auto px = render_rgbn(vh[static_cast<size_t>(stamps[si])][i], scene.tau[i]);
                    for (int c = 0; c < Minicube::kChannels; ++c)
                        cube.history_frames[((si * Minicube::kChannels + c) * cfg.H + y) * cfg.W +
                                            x] = px[static_cast<size_t>(c)];
                }
        }
    }

    cube.validate();
    return cube;
}

// --------------------------------------------------------------------- split

SplitSpec split_dataset(const std::vector<std::string>& paths,
                        const std::array<double, 3>& ratios, uint64_t seed) {
    if (paths.empty()) fail("split_dataset: empty path list");
    double sum = ratios[0] + ratios[1] + ratios[2];
    for (double r : ratios)
        if (r < 0.0) fail("split_dataset: bad ratios (negative)");
    if (std::abs(sum - 1.0) > 1e-9) fail("split_dataset: bad ratios (sum != 1)");

    std::vector<std::string> shuffled(paths);
    Rng rng(seed);
    rng.shuffle(shuffled);

    const int n = static_cast<int>(shuffled.size());
    std::array<int, 3> counts{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = ratios[static_cast<size_t>(i)] * n;
        counts[static_cast<size_t>(i)] = static_cast<int>(std::floor(exact));
        frac[static_cast<size_t>(i)] = exact - counts[static_cast<size_t>(i)];
        assigned += counts[static_cast<size_t>(i)];
    }
    // Largest-remainder rounding; ties resolved train > val > test.
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (frac[static_cast<size_t>(i)] > frac[static_cast<size_t>(best)] + 1e-12) best = i;
        counts[static_cast<size_t>(best)]++;
        frac[static_cast<size_t>(best)] = -1.0;
        ++assigned;
    }

    SplitSpec spec;
    spec.seed = seed;
    auto it = shuffled.begin();
    spec.train_paths.assign(it, it + counts[0]);
    it += counts[0];
    spec.val_paths.assign(it, it + counts[1]);
    it += counts[1];
    spec.test_paths.assign(it, it + counts[2]);
    return spec;
}

} // namespace vegecast
