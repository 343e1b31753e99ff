#include "vegecast/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace vegecast::nn {

Var ParamStore::add(const std::string& name, NDArray init) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Var v = ad::leaf(std::move(init), true, name);
    index_[name] = params_.size();
    params_.emplace_back(name, v);
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return params_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

int64_t ParamStore::scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : params_) n += v->val.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, v] : params_) {
        if (v->grad.size() == v->val.size()) {
            std::fill(v->grad.vec().begin(), v->grad.vec().end(), 0.0);
        }
    }
}

void ParamStore::freeze() {
    for (auto& [name, v] : params_) v->requires_grad = false;
}

std::map<std::string, NDArray> ParamStore::snapshot() const {
    std::map<std::string, NDArray> snap;
    for (const auto& [name, v] : params_) snap.emplace(name, v->val);
    return snap;
}

void ParamStore::restore(const std::map<std::string, NDArray>& snap) {
    for (auto& [name, v] : params_) {
        auto it = snap.find(name);
        if (it == snap.end()) throw std::invalid_argument("ParamStore::restore: missing " + name);
        if (!it->second.same_shape(v->val))
            throw std::invalid_argument("ParamStore::restore: shape mismatch for " + name);
        v->val = it->second;
    }
}

NDArray xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    NDArray a(std::move(shape));
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (int64_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-bound, bound);
    return a;
}

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                      bool bias) {
    Linear l;
    l.w = ps.add(name + ".w", xavier_uniform({out, in}, in, out, rng));
    l.b = bias ? ps.add(name + ".b", NDArray({out})) : nullptr;
    return l;
}

Linear Linear::create_zero(ParamStore& ps, const std::string& name, int in, int out, bool bias) {
    Linear l;
    l.w = ps.add(name + ".w", NDArray({out, in}));
    l.b = bias ? ps.add(name + ".b", NDArray({out})) : nullptr;
    return l;
}

Conv2d Conv2d::create(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                      int stride, int pad, Rng& rng) {
    Conv2d c;
    int fan_in = in_ch * k * k, fan_out = out_ch * k * k;
    c.w = ps.add(name + ".w", xavier_uniform({out_ch, in_ch, k, k}, fan_in, fan_out, rng));
    c.b = ps.add(name + ".b", NDArray({out_ch}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

MultiHeadSelfAttention MultiHeadSelfAttention::create(ParamStore& ps, const std::string& name,
                                                      int dim, int heads, Rng& rng) {
    if (dim % heads != 0)
        throw std::invalid_argument("MultiHeadSelfAttention: dim not divisible by heads");
    MultiHeadSelfAttention a;
    a.q = Linear::create(ps, name + ".q", dim, dim, rng);
    a.k = Linear::create(ps, name + ".k", dim, dim, rng);
    a.v = Linear::create(ps, name + ".v", dim, dim, rng);
    a.o = Linear::create(ps, name + ".o", dim, dim, rng);
    a.heads = heads;
    return a;
}

Var MultiHeadSelfAttention::operator()(const Var& x) const {
    int D = x->val.shape().back();
    int dh = D / heads;
    Var Q = ad::split_heads(q(x), heads);
    Var K = ad::split_heads(k(x), heads);
    Var V = ad::split_heads(v(x), heads);
    Var scores = ad::mul_scalar(ad::bmm(Q, K, /*trans_b=*/true), 1.0 / std::sqrt(double(dh)));
    Var attn = ad::softmax_lastdim(scores);
    Var ctx = ad::merge_heads(ad::bmm(attn, V), heads);
    return o(ctx);
}

Mlp Mlp::create(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng) {
    Mlp m;
    m.fc1 = Linear::create(ps, name + ".fc1", dim, hidden, rng);
    m.fc2 = Linear::create(ps, name + ".fc2", hidden, dim, rng);
    return m;
}

Adam::Adam(double lr, double beta1, double beta2, double eps, double weight_decay, bool decoupled)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay),
      decoupled_(decoupled) {}

void Adam::step(ParamStore& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
        if (p->grad.size() != p->val.size()) continue; // never touched this step
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            m_.emplace(name, NDArray(p->val.shape()));
            v_.emplace(name, NDArray(p->val.shape()));
            mit = m_.find(name);
        }
        NDArray& m = mit->second;
        NDArray& v = v_.at(name);
        for (int64_t i = 0; i < p->val.size(); ++i) {
            double g = p->grad[i];
            if (!decoupled_ && weight_decay_ != 0.0) g += weight_decay_ * p->val[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            double upd = lr_ * mhat / (std::sqrt(vhat) + eps_);
            if (decoupled_ && weight_decay_ != 0.0) upd += lr_ * weight_decay_ * p->val[i];
            p->val[i] -= upd;
        }
    }
}

NDArray sinusoidal_embedding(int pos, int dim, double max_period) {
    NDArray e({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / half);
        e[i] = std::cos(pos * freq);
        e[half + i] = std::sin(pos * freq);
    }
    return e;
}

} // namespace vegecast::nn
