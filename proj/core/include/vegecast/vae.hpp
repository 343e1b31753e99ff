#pragma once

#include <string>
#include <utility>

#include "vegecast/autodiff.hpp"
#include "vegecast/nn.hpp"
#include "vegecast/rng.hpp"

namespace vegecast {

struct VaeConfig {
    int in_channels = 4;
    int base_width = 16;
    int num_down = 2; // spatial factor f = 2^num_down
    int latent_channels = 4;
    double kl_weight = 1e-3;
    double output_bound = 10.0; // decoder output bounded to (-b, b)

    int downsample_factor() const { return 1 << num_down; }
    void validate() const;
    std::string to_json_string() const;
    static VaeConfig from_json_string(const std::string& s);
    bool operator==(const VaeConfig&) const = default;
};

/// Per-frame convolutional VAE. Frames are encoded independently; all
/// temporal structure is left to the denoiser.
class VegeVae {
public:
    VegeVae(const VaeConfig& cfg, uint64_t init_seed);

    const VaeConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    struct Moments {
        ad::Var mean, logvar;
    };

    /// frames [B,4,H,W] -> moments [B,C_lat,H/f,W/f]. H, W must divide by f.
    Moments encode(const ad::Var& frames) const;
    ad::Var reparameterize(const Moments& m, Rng& rng) const;
    ad::Var decode(const ad::Var& latent) const;

    // No-grad conveniences over NDArray values.
    std::pair<NDArray, NDArray> encode_moments(const NDArray& frames) const;
    NDArray encode_mean(const NDArray& frames) const;
    NDArray encode_sample(const NDArray& frames, Rng& rng) const;
    NDArray decode_values(const NDArray& latent) const;

private:
    VaeConfig cfg_;
    nn::ParamStore params_;
    std::vector<nn::Conv2d> enc_, dec_;
    nn::Conv2d enc_head_, dec_head_;
};

struct VaeLossTerms {
    ad::Var total, recon, kl;
};

/// recon = MSE(recon, target); kl = 0.5*mean(exp(lv)+mean^2-1-lv);
/// total = recon + beta*kl.
VaeLossTerms vae_loss(const ad::Var& recon, const ad::Var& target, const ad::Var& mean,
                      const ad::Var& logvar, double beta);

} // namespace vegecast
