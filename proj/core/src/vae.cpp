#include "vegecast/vae.hpp"

#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace vegecast {

using ad::Var;

void VaeConfig::validate() const {
    if (in_channels < 1) throw std::invalid_argument("VaeConfig: in_channels must be >= 1");
    if (base_width < 1) throw std::invalid_argument("VaeConfig: base_width must be >= 1");
    if (num_down < 0 || num_down > 5) throw std::invalid_argument("VaeConfig: num_down outside [0,5]");
    if (latent_channels < 1) throw std::invalid_argument("VaeConfig: latent_channels must be >= 1");
    if (kl_weight < 0.0) throw std::invalid_argument("VaeConfig: kl_weight must be >= 0");
    if (output_bound <= 0.0) throw std::invalid_argument("VaeConfig: output_bound must be > 0");
}

std::string VaeConfig::to_json_string() const {
    json j;
    j["in_channels"] = in_channels;
    j["base_width"] = base_width;
    j["num_down"] = num_down;
    j["latent_channels"] = latent_channels;
    j["kl_weight"] = kl_weight;
    j["output_bound"] = output_bound;
    return j.dump();
}

VaeConfig VaeConfig::from_json_string(const std::string& s) {
    json j = json::parse(s);
    VaeConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.num_down = j.at("num_down").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.kl_weight = j.at("kl_weight").get<double>();
    c.output_bound = j.at("output_bound").get<double>();
    c.validate();
    return c;
}

VegeVae::VegeVae(const VaeConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed ^ 0x7AE5EEDULL));
    int w = cfg.base_width;

    // Encoder: stem, num_down stride-2 stages doubling width, mid, head.
    enc_.push_back(nn::Conv2d::create(params_, "enc.stem", cfg.in_channels, w, 3, 1, 1, rng));
    for (int i = 0; i < cfg.num_down; ++i) {
        enc_.push_back(nn::Conv2d::create(params_, "enc.down" + std::to_string(i), w, 2 * w, 3, 2,
                                          1, rng));
        w *= 2;
    }
    enc_.push_back(nn::Conv2d::create(params_, "enc.mid", w, w, 3, 1, 1, rng));
    enc_head_ =
        nn::Conv2d::create(params_, "enc.head", w, 2 * cfg.latent_channels, 3, 1, 1, rng);

    // Decoder mirrors the encoder with nearest-neighbour upsampling.
    dec_.push_back(nn::Conv2d::create(params_, "dec.stem", cfg.latent_channels, w, 3, 1, 1, rng));
    dec_.push_back(nn::Conv2d::create(params_, "dec.mid", w, w, 3, 1, 1, rng));
    for (int i = 0; i < cfg.num_down; ++i) {
        dec_.push_back(nn::Conv2d::create(params_, "dec.up" + std::to_string(i), w, w / 2, 3, 1, 1,
                                          rng));
        w /= 2;
    }
    dec_head_ = nn::Conv2d::create(params_, "dec.head", w, cfg.in_channels, 3, 1, 1, rng);
}

VegeVae::Moments VegeVae::encode(const Var& frames) const {
    if (frames->val.ndim() != 4 || frames->val.dim(1) != cfg_.in_channels)
        throw std::invalid_argument("VegeVae::encode: expected [B," +
                                    std::to_string(cfg_.in_channels) + ",H,W]");
    int f = cfg_.downsample_factor();
    if (frames->val.dim(2) % f != 0 || frames->val.dim(3) % f != 0)
        throw std::invalid_argument("VegeVae::encode: spatial dims not divisible by " +
                                    std::to_string(f));
    Var x = frames;
    for (const auto& conv : enc_) x = ad::silu(conv(x));
    Var h = enc_head_(x);
    // Split channels into mean / logvar via a 3-D view.
    int B = h->val.dim(0), C2 = h->val.dim(1), hh = h->val.dim(2), ww = h->val.dim(3);
    int C = C2 / 2;
    Var flat = ad::reshape(h, {B, C2, hh * ww});
    Var mean = ad::reshape(ad::slice_axis1(flat, 0, C), {B, C, hh, ww});
    Var logvar = ad::reshape(ad::slice_axis1(flat, C, C2), {B, C, hh, ww});
    // Soft clamp keeps exp(logvar) finite through early training.
    logvar = ad::bounded_tanh(logvar, 8.0);
    return {mean, logvar};
}

Var VegeVae::reparameterize(const Moments& m, Rng& rng) const {
    NDArray eps = rng.normal_array(m.mean->val.shape());
    Var noise = ad::constant(std::move(eps));
    Var std = ad::exp_op(ad::mul_scalar(m.logvar, 0.5));
    return ad::add(m.mean, ad::mul(std, noise));
}

Var VegeVae::decode(const Var& latent) const {
    if (latent->val.ndim() != 4 || latent->val.dim(1) != cfg_.latent_channels)
        throw std::invalid_argument("VegeVae::decode: expected [B," +
                                    std::to_string(cfg_.latent_channels) + ",h,w]");
    Var x = ad::silu(dec_[0](latent));
    x = ad::silu(dec_[1](x));
    for (int i = 0; i < cfg_.num_down; ++i) x = ad::silu(dec_[2 + static_cast<size_t>(i)](ad::upsample2x(x)));
    return ad::bounded_tanh(dec_head_(x), cfg_.output_bound);
}

std::pair<NDArray, NDArray> VegeVae::encode_moments(const NDArray& frames) const {
    ad::NoGradGuard ng;
    Moments m = encode(ad::constant(frames));
    return {m.mean->val, m.logvar->val};
}

NDArray VegeVae::encode_mean(const NDArray& frames) const {
    ad::NoGradGuard ng;
    return encode(ad::constant(frames)).mean->val;
}

NDArray VegeVae::encode_sample(const NDArray& frames, Rng& rng) const {
    ad::NoGradGuard ng;
    Moments m = encode(ad::constant(frames));
    return reparameterize(m, rng)->val;
}

NDArray VegeVae::decode_values(const NDArray& latent) const {
    ad::NoGradGuard ng;
    return decode(ad::constant(latent))->val;
}

VaeLossTerms vae_loss(const Var& recon, const Var& target, const Var& mean, const Var& logvar,
                      double beta) {
    if (!recon->val.same_shape(target->val))
        throw std::invalid_argument("vae_loss: recon/target shape mismatch");
    if (!mean->val.same_shape(logvar->val))
        throw std::invalid_argument("vae_loss: mean/logvar shape mismatch");
    VaeLossTerms out;
    out.recon = ad::mse(recon, target);
    // 0.5 * mean(exp(lv) + mu^2 - 1 - lv)
    Var inner = ad::sub(ad::add_scalar(ad::add(ad::exp_op(logvar), ad::square(mean)), -1.0), logvar);
    out.kl = ad::mul_scalar(ad::mean_all(inner), 0.5);
    out.total = ad::add(out.recon, ad::mul_scalar(out.kl, beta));
    return out;
}

} // namespace vegecast
