#pragma once

#include <string>
#include <vector>

#include "vegecast/autodiff.hpp"
#include "vegecast/nn.hpp"

namespace vegecast {

struct VegeNetConfig {
    int patch_size = 2;   // P
    int embed_dim = 128;  // D
    int num_blocks = 4;   // N
    int num_heads = 4;
    int context_frames = 10; // T
    int horizon = 20;        // K
    int latent_channels = 4;
    int latent_h = 8, latent_w = 8;
    int meteo_vars = 9;
    int meteo_per_frame = 5; // fine meteo steps per frame
    int env_layers = 2;      // elevation + landcover id
    int landcover_classes = 4;
    int mlp_ratio = 4;

    // Architecture switches for the ablation studies. The full model keeps
    // all of them on.
    bool use_temporal_attention = true;
    bool use_adaln = true;
    bool use_spatial_attention = true;

    int total_frames() const { return context_frames + horizon; }
    int tokens_per_frame() const {
        return (latent_h / patch_size) * (latent_w / patch_size);
    }
    void validate() const;
    std::string to_json_string() const;
    static VegeNetConfig from_json_string(const std::string& s);
    bool operator==(const VegeNetConfig&) const = default;
};

/// DiT-style denoiser over per-frame latent tokens. Meteorology conditions
/// globally through adaLN-zero, static environment locally through the
/// temporal attention sequences, and the diffusion step is summed into the
/// conditioning vector.
class VegeNet {
public:
    VegeNet(const VegeNetConfig& cfg, uint64_t init_seed);

    const VegeNetConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    /// latents [F,C,h,w] -> Z tokens [F,L,D] with positional encodings added.
    /// extra_channels, when ablations are active, are concatenated before the
    /// projection (pass {} otherwise).
    ad::Var tokenize(const ad::Var& latents, const NDArray* extra_channels = nullptr) const;

    /// env (normalized, [2,H,W]) -> E tokens [1,L,D]. One-hot expands the
    /// landcover layer; unknown ids throw.
    ad::Var embed_env(const NDArray& env) const;

    /// meteo (normalized, [F*c, M]) -> M tokens [F,D].
    ad::Var embed_meteo(const ad::Var& meteo) const;

    /// conditioning vectors [F,D]: SiLU(M_tokens + t_embed(diffusion_t)).
    ad::Var conditioning(const ad::Var& m_tokens, int diffusion_t) const;

    /// Runs all DiT blocks. e_tokens/cond may be null when the matching
    /// switch is off.
    ad::Var run_blocks(ad::Var z_tokens, const ad::Var& e_tokens, const ad::Var& cond) const;

    /// tokens [F,L,D] -> latents [F,C,h,w] (zero-initialized projection).
    ad::Var readout(const ad::Var& tokens) const;

    /// Full pass: tokenize, condition, run blocks, read out, keep the last
    /// K frames as the noise estimate.
    ad::Var predict_noise(const ad::Var& z_all, const NDArray& meteo, const NDArray& env,
                          int diffusion_t) const;

    /// Average-pooled env planes (one-hot landcover) at latent resolution,
    /// replicated per frame: the concat path used when temporal attention is
    /// ablated.
    NDArray env_concat_planes(const NDArray& env) const;
    /// Per-frame meteo planes at latent resolution: the concat path used when
    /// adaLN is ablated.
    NDArray meteo_concat_planes(const NDArray& meteo) const;

private:
    NDArray one_hot_env(const NDArray& env) const; // [1, 1+classes, H, W]

    VegeNetConfig cfg_;
    nn::ParamStore params_;

    nn::Linear patch_proj_;
    nn::Linear final_proj_;
    std::vector<nn::Conv2d> env_convs_;
    nn::Linear meteo_fc1_, meteo_fc2_;
    nn::Linear temb_fc1_, temb_fc2_;
    nn::Linear token_temb_; // timestep injection when adaLN is off

    struct Block {
        nn::MultiHeadSelfAttention spatial, temporal;
        nn::Mlp mlp;
        nn::Linear ada; // -> 9*D modulation parameters, zero-initialized
    };
    std::vector<Block> blocks_;

    NDArray pos_encoding_; // [F,L,D], spatial + temporal, fixed
};

} // namespace vegecast
