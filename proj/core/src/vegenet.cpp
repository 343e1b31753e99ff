#include "vegecast/vegenet.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace vegecast {

using ad::Var;

void VegeNetConfig::validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("VegeNetConfig: " + m); };
    if (patch_size < 1) bad("patch_size must be >= 1");
    if (embed_dim < 4 || embed_dim % 4 != 0) bad("embed_dim must be a positive multiple of 4");
    if (num_blocks < 1) bad("num_blocks must be >= 1");
    if (num_heads < 1 || embed_dim % num_heads != 0) bad("embed_dim not divisible by num_heads");
    if (context_frames < 1 || horizon < 1) bad("context_frames and horizon must be >= 1");
    if (latent_channels < 1) bad("latent_channels must be >= 1");
    if (latent_h % patch_size != 0 || latent_w % patch_size != 0)
        bad("latent dims not divisible by patch_size");
    if (meteo_vars < 1 || meteo_per_frame < 1) bad("meteo dims must be >= 1");
    if (landcover_classes < 1) bad("landcover_classes must be >= 1");
    if (mlp_ratio < 1) bad("mlp_ratio must be >= 1");
}

std::string VegeNetConfig::to_json_string() const {
    json j;
    j["patch_size"] = patch_size;
    j["embed_dim"] = embed_dim;
    j["num_blocks"] = num_blocks;
    j["num_heads"] = num_heads;
    j["context_frames"] = context_frames;
    j["horizon"] = horizon;
    j["latent_channels"] = latent_channels;
    j["latent_h"] = latent_h;
    j["latent_w"] = latent_w;
    j["meteo_vars"] = meteo_vars;
    j["meteo_per_frame"] = meteo_per_frame;
    j["env_layers"] = env_layers;
    j["landcover_classes"] = landcover_classes;
    j["mlp_ratio"] = mlp_ratio;
    j["use_temporal_attention"] = use_temporal_attention;
    j["use_adaln"] = use_adaln;
    j["use_spatial_attention"] = use_spatial_attention;
    return j.dump();
}

VegeNetConfig VegeNetConfig::from_json_string(const std::string& s) {
    json j = json::parse(s);
    VegeNetConfig c;
    c.patch_size = j.at("patch_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.context_frames = j.at("context_frames").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.latent_h = j.at("latent_h").get<int>();
    c.latent_w = j.at("latent_w").get<int>();
    c.meteo_vars = j.at("meteo_vars").get<int>();
    c.meteo_per_frame = j.at("meteo_per_frame").get<int>();
    c.env_layers = j.at("env_layers").get<int>();
    c.landcover_classes = j.at("landcover_classes").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.use_temporal_attention = j.at("use_temporal_attention").get<bool>();
    c.use_adaln = j.at("use_adaln").get<bool>();
    c.use_spatial_attention = j.value("use_spatial_attention", true);
    c.validate();
    return c;
}

namespace {

int int_log2(int v) {
    int l = 0;
    while ((1 << l) < v) ++l;
    if ((1 << l) != v) throw std::invalid_argument("VegeNet: factor must be a power of two");
    return l;
}

} // namespace

VegeNet::VegeNet(const VegeNetConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed ^ 0xDE17B10C5ULL));
    const int D = cfg.embed_dim;
    const int P = cfg.patch_size;
    const int F = cfg.total_frames();
    const int L = cfg.tokens_per_frame();

    int patch_in = P * P * cfg.latent_channels;
    if (!cfg.use_temporal_attention) patch_in += P * P * (1 + cfg.landcover_classes);
    if (!cfg.use_adaln) patch_in += P * P * cfg.meteo_per_frame * cfg.meteo_vars;
    patch_proj_ = nn::Linear::create(params_, "patch_proj", patch_in, D, rng);
    final_proj_ = nn::Linear::create_zero(params_, "final_proj", D,
                                          P * P * cfg.latent_channels);

    if (cfg.use_temporal_attention) {
        // Env trunk downsamples from frame resolution to token resolution:
        // frame H = latent_h * f, tokens at latent_h / P.
        int env_in = 1 + cfg.landcover_classes;
        int frame_h = cfg.latent_h; // latent resolution; convs continue below
        (void)frame_h;
        int stages = int_log2((cfg.latent_h * P > 0 ? 1 : 1)); // placeholder, recomputed below
        (void)stages;
        env_convs_.clear();
        int total_factor_log = 0; // set in embed_env path via config
        (void)total_factor_log;
        // Stage widths end at D; the count depends on the frame/latent ratio,
        // which equals f*P with f inferred from latent vs frame dims at call
        // time. The trunk is sized for the configured latent grid: frame dims
        // are latent_h*f x latent_w*f, and f is carried by the checkpointed
        // VAE; tokens sit P strides below the latents. We build for the
        // common case where env arrives at frame resolution.
        // stages = log2(frame_h / token_h); frame_h = latent_h * f.
        // f is not part of this config, so the trunk is built lazily-fixed:
        // we require env input dims divisible down to the token grid.
        int token_h = cfg.latent_h / P;
        (void)token_h;
        // Defer stage count to construction-time constant: assume env comes
        // at latent_h * 4 (f=4 default) unless env_trunk_stages overrides.
        int assumed_frame = cfg.latent_h * 4;
        int s = int_log2(assumed_frame / (cfg.latent_h / P));
        int w_in = env_in;
        for (int i = 0; i < s; ++i) {
            int w_out = D >> (s - 1 - i);
            if (w_out < 8) w_out = 8;
            env_convs_.push_back(nn::Conv2d::create(params_, "env.conv" + std::to_string(i), w_in,
                                                    w_out, 3, 2, 1, rng));
            w_in = w_out;
        }
    }

    int meteo_in = cfg.meteo_per_frame * cfg.meteo_vars;
    meteo_fc1_ = nn::Linear::create(params_, "meteo.fc1", meteo_in, D, rng);
    meteo_fc2_ = nn::Linear::create(params_, "meteo.fc2", D, D, rng);
    temb_fc1_ = nn::Linear::create(params_, "temb.fc1", D, D, rng);
    temb_fc2_ = nn::Linear::create(params_, "temb.fc2", D, D, rng);
    if (!cfg.use_adaln)
        token_temb_ = nn::Linear::create(params_, "token_temb", D, D, rng);

    blocks_.reserve(static_cast<size_t>(cfg.num_blocks));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        Block blk;
        std::string pre = "block" + std::to_string(b);
        if (cfg.use_spatial_attention)
            blk.spatial = nn::MultiHeadSelfAttention::create(params_, pre + ".spatial", D,
                                                             cfg.num_heads, rng);
        if (cfg.use_temporal_attention)
            blk.temporal = nn::MultiHeadSelfAttention::create(params_, pre + ".temporal", D,
                                                              cfg.num_heads, rng);
        blk.mlp = nn::Mlp::create(params_, pre + ".mlp", D, cfg.mlp_ratio * D, rng);
        if (cfg.use_adaln)
            blk.ada = nn::Linear::create_zero(params_, pre + ".ada", D, 9 * D);
        blocks_.push_back(std::move(blk));
    }

    // Fixed sinusoidal encodings: spatial (2-D, half dims per axis) plus
    // temporal, precombined into one [F,L,D] table.
    pos_encoding_ = NDArray({F, L, D});
    const int gy = cfg.latent_h / P, gx = cfg.latent_w / P;
    std::vector<NDArray> row_pe(static_cast<size_t>(gy)), col_pe(static_cast<size_t>(gx));
    for (int y = 0; y < gy; ++y) row_pe[static_cast<size_t>(y)] = nn::sinusoidal_embedding(y, D / 2);
    for (int x = 0; x < gx; ++x) col_pe[static_cast<size_t>(x)] = nn::sinusoidal_embedding(x, D / 2);
    for (int f = 0; f < F; ++f) {
        NDArray tpe = nn::sinusoidal_embedding(f, D);
        for (int y = 0; y < gy; ++y)
            for (int x = 0; x < gx; ++x) {
                int l = y * gx + x;
                for (int d = 0; d < D / 2; ++d) {
                    pos_encoding_.at(f, l, d) = row_pe[static_cast<size_t>(y)][d] + tpe[d];
                    pos_encoding_.at(f, l, D / 2 + d) =
                        col_pe[static_cast<size_t>(x)][d] + tpe[D / 2 + d];
                }
            }
    }
}

Var VegeNet::tokenize(const Var& latents, const NDArray* extra_channels) const {
    if (latents->val.ndim() != 4 || latents->val.dim(0) != cfg_.total_frames() ||
        latents->val.dim(1) != cfg_.latent_channels || latents->val.dim(2) != cfg_.latent_h ||
        latents->val.dim(3) != cfg_.latent_w)
        throw std::invalid_argument("VegeNet::tokenize: latents shape mismatch, expected " +
                                    NDArray::shape_str({cfg_.total_frames(), cfg_.latent_channels,
                                                        cfg_.latent_h, cfg_.latent_w}));
    Var x = latents;
    if (extra_channels && !extra_channels->empty()) {
        const NDArray& ex = *extra_channels;
        if (ex.ndim() != 4 || ex.dim(0) != cfg_.total_frames() || ex.dim(2) != cfg_.latent_h ||
            ex.dim(3) != cfg_.latent_w)
            throw std::invalid_argument("VegeNet::tokenize: extra channel shape mismatch");
        int F = cfg_.total_frames(), C = cfg_.latent_channels, E = ex.dim(1);
        int hw = cfg_.latent_h * cfg_.latent_w;
        Var a = ad::reshape(x, {F, C, hw});
        Var b = ad::constant(ex.reshaped({F, E, hw}));
        x = ad::reshape(ad::concat_axis1(a, b), {F, C + E, cfg_.latent_h, cfg_.latent_w});
    }
    Var tokens = patch_proj_(ad::patchify(x, cfg_.patch_size));
    return ad::add(tokens, ad::constant(pos_encoding_));
}

NDArray VegeNet::one_hot_env(const NDArray& env) const {
    if (env.ndim() != 3 || env.dim(0) != cfg_.env_layers)
        throw std::invalid_argument("VegeNet: env must be [" + std::to_string(cfg_.env_layers) +
                                    ",H,W]");
    const int H = env.dim(1), W = env.dim(2);
    const int nc = cfg_.landcover_classes;
    NDArray out({1 + nc, H, W});
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int64_t i = 0; i < plane; ++i) out[i] = env[i]; // elevation
    for (int64_t i = 0; i < plane; ++i) {
        double idv = env[plane + i];
        int id = static_cast<int>(std::lround(idv));
        if (id < 0 || id >= nc)
            throw std::invalid_argument("VegeNet: unknown land-cover id " + std::to_string(id) +
                                        " with " + std::to_string(nc) + " configured classes");
        out[(1 + id) * plane + i] = 1.0;
    }
    return out;
}

Var VegeNet::embed_env(const NDArray& env) const {
    if (!cfg_.use_temporal_attention)
        throw std::logic_error("VegeNet::embed_env: temporal attention is ablated");
    NDArray oh = one_hot_env(env);
    const int H = oh.dim(1), W = oh.dim(2);
    // The trunk must land exactly on the token grid.
    int token_h = cfg_.latent_h / cfg_.patch_size;
    int token_w = cfg_.latent_w / cfg_.patch_size;
    int expect = token_h << static_cast<int>(env_convs_.size());
    if (H != expect || W != token_w << static_cast<int>(env_convs_.size()))
        throw std::invalid_argument("VegeNet::embed_env: env dims " + std::to_string(H) + "x" +
                                    std::to_string(W) + " do not reduce to the token grid");
    Var x = ad::constant(oh.reshaped({1, oh.dim(0), H, W}));
    for (size_t i = 0; i < env_convs_.size(); ++i) {
        x = env_convs_[i](x);
        if (i + 1 < env_convs_.size()) x = ad::silu(x);
    }
    const int D = cfg_.embed_dim, L = cfg_.tokens_per_frame();
    Var flat = ad::reshape(x, {D, L});
    return ad::reshape(ad::transpose2d(flat), {1, L, D});
}

Var VegeNet::embed_meteo(const Var& meteo) const {
    const int F = cfg_.total_frames();
    if (meteo->val.ndim() != 2 || meteo->val.dim(1) != cfg_.meteo_vars)
        throw std::invalid_argument("VegeNet::embed_meteo: expected [steps," +
                                    std::to_string(cfg_.meteo_vars) + "]");
    if (meteo->val.dim(0) % F != 0)
        throw std::invalid_argument("VegeNet::embed_meteo: steps not divisible by frames");
    int c = meteo->val.dim(0) / F;
    if (c != cfg_.meteo_per_frame)
        throw std::invalid_argument("VegeNet::embed_meteo: cadence " + std::to_string(c) +
                                    " != configured " + std::to_string(cfg_.meteo_per_frame));
    Var grouped = ad::reshape(meteo, {F, c * cfg_.meteo_vars});
    return meteo_fc2_(ad::silu(meteo_fc1_(grouped)));
}

Var VegeNet::conditioning(const Var& m_tokens, int diffusion_t) const {
    NDArray se = nn::sinusoidal_embedding(diffusion_t, cfg_.embed_dim);
    Var t = ad::constant(se.reshaped({1, cfg_.embed_dim}));
    Var temb = temb_fc2_(ad::silu(temb_fc1_(t)));
    Var temb_flat = ad::reshape(temb, {cfg_.embed_dim});
    return ad::silu(ad::add_vec(m_tokens, temb_flat));
}

Var VegeNet::run_blocks(Var z_tokens, const Var& e_tokens, const Var& cond) const {
    const int F = cfg_.total_frames();
    const int L = cfg_.tokens_per_frame();
    const int D = cfg_.embed_dim;
    if (cfg_.use_temporal_attention) {
        if (!e_tokens || e_tokens->val.ndim() != 3 || e_tokens->val.dim(1) != L)
            throw std::invalid_argument("VegeNet::run_blocks: E token L mismatch");
    }
    Var x = z_tokens;
    for (const auto& blk : blocks_) {
        std::vector<Var> mods(9);
        if (cfg_.use_adaln) {
            Var p = blk.ada(cond); // [F, 9D], exactly zero at init
            for (int i = 0; i < 9; ++i) mods[static_cast<size_t>(i)] = ad::slice_lastdim(p, i * D, (i + 1) * D);
        }
        auto modulate = [&](const Var& u, int i) {
            return cfg_.use_adaln ? ad::scale_shift(u, mods[static_cast<size_t>(i)], mods[static_cast<size_t>(i) + 1]) : u;
        };
        auto gated = [&](const Var& y, int i) {
            return cfg_.use_adaln ? ad::gate_mul(y, mods[static_cast<size_t>(i)]) : y;
        };
        if (cfg_.use_spatial_attention) {
            Var u = modulate(ad::layernorm(x), 0);
            x = ad::add(x, gated(blk.spatial(u), 2));
        }
        if (cfg_.use_temporal_attention) {
            Var u = modulate(ad::layernorm(x), 3);
            Var seq = ad::permute102(u); // [L,F,D]
            Var e = ad::permute102(ad::layernorm(e_tokens)); // [L,1,D]
            seq = ad::concat_axis1(e, seq);                  // [L,F+1,D]
            Var out = blk.temporal(seq);
            out = ad::permute102(ad::slice_axis1(out, 1, F + 1)); // E slot discarded
            x = ad::add(x, gated(out, 5));
        }
        Var u = modulate(ad::layernorm(x), 6);
        x = ad::add(x, gated(blk.mlp(u), 8));
    }
    return x;
}

Var VegeNet::readout(const Var& tokens) const {
    Var y = final_proj_(tokens);
    return ad::unpatchify(y, cfg_.patch_size, cfg_.latent_channels, cfg_.latent_h, cfg_.latent_w);
}

NDArray VegeNet::env_concat_planes(const NDArray& env) const {
    NDArray oh = one_hot_env(env);
    const int C = oh.dim(0), H = oh.dim(1), W = oh.dim(2);
    const int f = H / cfg_.latent_h;
    if (f < 1 || cfg_.latent_h * f != H || cfg_.latent_w * f != W)
        throw std::invalid_argument("VegeNet::env_concat_planes: env dims not a multiple of the latent grid");
    const int F = cfg_.total_frames();
    NDArray out({F, C, cfg_.latent_h, cfg_.latent_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < cfg_.latent_h; ++y)
            for (int x = 0; x < cfg_.latent_w; ++x) {
                double s = 0.0;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx) s += oh.at(c, y * f + dy, x * f + dx);
                double v = s / (f * f);
                for (int fr = 0; fr < F; ++fr) out.at(fr, c, y, x) = v;
            }
    return out;
}

NDArray VegeNet::meteo_concat_planes(const NDArray& meteo) const {
    const int F = cfg_.total_frames();
    const int c = cfg_.meteo_per_frame, M = cfg_.meteo_vars;
    if (meteo.ndim() != 2 || meteo.dim(0) != F * c || meteo.dim(1) != M)
        throw std::invalid_argument("VegeNet::meteo_concat_planes: meteo shape mismatch");
    NDArray out({F, c * M, cfg_.latent_h, cfg_.latent_w});
    for (int fr = 0; fr < F; ++fr)
        for (int j = 0; j < c; ++j)
            for (int v = 0; v < M; ++v) {
                double val = meteo.at(fr * c + j, v);
                for (int y = 0; y < cfg_.latent_h; ++y)
                    for (int x = 0; x < cfg_.latent_w; ++x) out.at(fr, j * M + v, y, x) = val;
            }
    return out;
}

Var VegeNet::predict_noise(const Var& z_all, const NDArray& meteo, const NDArray& env,
                           int diffusion_t) const {
    const int F = cfg_.total_frames();
    NDArray extra;
    if (!cfg_.use_temporal_attention || !cfg_.use_adaln) {
        std::vector<NDArray> parts;
        if (!cfg_.use_temporal_attention) parts.push_back(env_concat_planes(env));
        if (!cfg_.use_adaln) parts.push_back(meteo_concat_planes(meteo));
        if (parts.size() == 1) {
            extra = std::move(parts[0]);
        } else {
            int C0 = parts[0].dim(1), C1 = parts[1].dim(1);
            extra = NDArray({F, C0 + C1, cfg_.latent_h, cfg_.latent_w});
            const int64_t plane = static_cast<int64_t>(cfg_.latent_h) * cfg_.latent_w;
            for (int fr = 0; fr < F; ++fr) {
                std::copy_n(parts[0].data() + static_cast<int64_t>(fr) * C0 * plane, C0 * plane,
                            extra.data() + static_cast<int64_t>(fr) * (C0 + C1) * plane);
                std::copy_n(parts[1].data() + static_cast<int64_t>(fr) * C1 * plane, C1 * plane,
                            extra.data() + (static_cast<int64_t>(fr) * (C0 + C1) + C0) * plane);
            }
        }
    }
    Var tokens = tokenize(z_all, extra.empty() ? nullptr : &extra);

    Var cond;
    if (cfg_.use_adaln) {
        Var m_tokens = embed_meteo(ad::constant(meteo));
        cond = conditioning(m_tokens, diffusion_t);
    } else {
        // Timestep injection without adaLN: a learned projection of the step
        // embedding added to every token.
        NDArray se = nn::sinusoidal_embedding(diffusion_t, cfg_.embed_dim);
        Var t = ad::constant(se.reshaped({1, cfg_.embed_dim}));
        Var proj = ad::reshape(token_temb_(t), {cfg_.embed_dim});
        tokens = ad::add_vec(tokens, proj);
    }
    Var e_tokens = cfg_.use_temporal_attention ? embed_env(env) : nullptr;
    Var x = run_blocks(tokens, e_tokens, cond);
    Var out = readout(x);
    return ad::slice_axis0(out, cfg_.context_frames, F);
}

} // namespace vegecast
