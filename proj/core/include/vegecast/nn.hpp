#pragma once

#include <map>
#include <string>
#include <vector>

#include "vegecast/autodiff.hpp"
#include "vegecast/rng.hpp"

namespace vegecast::nn {

using ad::Var;

/// Ordered, named registry of trainable leaves. Checkpoints and optimizers
/// address parameters through it.
class ParamStore {
public:
    Var add(const std::string& name, NDArray init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const;

    const std::vector<std::pair<std::string, Var>>& all() const { return params_; }
    int64_t scalar_count() const;

    void zero_grads();
    void freeze(); // drops requires_grad on every parameter

    std::map<std::string, NDArray> snapshot() const;
    void restore(const std::map<std::string, NDArray>& snap);

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::map<std::string, size_t> index_;
};

NDArray xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng);

struct Linear {
    Var w, b;
    static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                         bool bias = true);
    static Linear create_zero(ParamStore& ps, const std::string& name, int in, int out,
                              bool bias = true);
    Var operator()(const Var& x) const { return ad::linear(x, w, b); }
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 1;
    static Conv2d create(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                         int stride, int pad, Rng& rng);
    Var operator()(const Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

/// Self-attention over axis 1 of a [B, T, D] tensor.
struct MultiHeadSelfAttention {
    Linear q, k, v, o;
    int heads = 1;
    static MultiHeadSelfAttention create(ParamStore& ps, const std::string& name, int dim,
                                         int heads, Rng& rng);
    Var operator()(const Var& x) const;
};

struct Mlp {
    Linear fc1, fc2;
    static Mlp create(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng);
    Var operator()(const Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

/// Adam with optional decoupled weight decay (the AdamW update).
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
         double weight_decay = 0.0, bool decoupled = false);

    void step(ParamStore& params);
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    bool decoupled_;
    int64_t t_ = 0;
    std::map<std::string, NDArray> m_, v_;
};

/// Fixed sin/cos embedding of an integer position into `dim` channels.
NDArray sinusoidal_embedding(int pos, int dim, double max_period = 10000.0);

} // namespace vegecast::nn
