#include "vegecast/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vegecast::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {

thread_local int g_no_grad_depth = 0;

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument("autodiff: " + msg);
}

Var make_node(NDArray val, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (grad_enabled()) {
        bool need = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) need = true;
        if (need) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(bw);
        }
    }
    return n;
}

// Leading-dims-by-last-dim view: [..., D] as a [rows, D] matrix.
int64_t rows_of(const NDArray& a) {
    int D = a.shape().back();
    return a.size() / D;
}

} // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

NDArray& Node::ensure_grad() {
    if (grad.size() != val.size()) grad = NDArray(val.shape());
    return grad;
}

void Node::add_grad(const NDArray& g) {
    NDArray& acc = ensure_grad();
    for (int64_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

Var constant(NDArray v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

Var leaf(NDArray v, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

void backward(const Var& root) {
    check(root != nullptr, "backward on null");
    // Iterative post-order DFS for topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    NDArray& g = root->ensure_grad();
    for (int64_t i = 0; i < g.size(); ++i) g[i] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->val.size()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check(a->val.same_shape(b->val), "add: shape mismatch");
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] + b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->add_grad(n.grad);
        if (b->requires_grad) b->add_grad(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check(a->val.same_shape(b->val), "sub: shape mismatch");
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] - b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->add_grad(n.grad);
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int64_t i = 0; i < bg.size(); ++i) bg[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check(a->val.same_shape(b->val), "mul: shape mismatch");
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            NDArray& ag = a->ensure_grad();
            for (int64_t i = 0; i < ag.size(); ++i) ag[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int64_t i = 0; i < bg.size(); ++i) bg[i] += n.grad[i] * a->val[i];
        }
    });
}

Var add_scalar(const Var& a, double s) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] + s;
    return make_node(std::move(out), {a}, [a](Node& n) { a->add_grad(n.grad); });
}

Var mul_scalar(const Var& a, double s) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += n.grad[i] * s;
    });
}

Var square(const Var& a) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a->val[i] * a->val[i];
    return make_node(std::move(out), {a}, [a](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += 2.0 * a->val[i] * n.grad[i];
    });
}

Var exp_op(const Var& a) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->val[i]);
    auto self_val = std::make_shared<NDArray>(out);
    return make_node(std::move(out), {a}, [a, self_val](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += (*self_val)[i] * n.grad[i];
    });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var silu(const Var& a) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-a->val[i]));
        out[i] = a->val[i] * s;
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-a->val[i]));
            ag[i] += n.grad[i] * s * (1.0 + a->val[i] * (1.0 - s));
        }
    });
}

Var gelu(const Var& a) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) {
        double x = a->val[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        NDArray& ag = a->ensure_grad();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (int64_t i = 0; i < ag.size(); ++i) {
            double x = a->val[i];
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            ag[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

Var sigmoid_op(const Var& a) {
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a->val[i]));
    auto self_val = std::make_shared<NDArray>(out);
    return make_node(std::move(out), {a}, [a, self_val](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) {
            double y = (*self_val)[i];
            ag[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

Var bounded_tanh(const Var& a, double bound) {
    check(bound > 0, "bounded_tanh: bound must be positive");
    NDArray out(a->val.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = bound * std::tanh(a->val[i] / bound);
    return make_node(std::move(out), {a}, [a, bound](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) {
            double t = std::tanh(a->val[i] / bound);
            ag[i] += n.grad[i] * (1.0 - t * t);
        }
    });
}

// ---------------------------------------------------------------- reductions

Var mean_all(const Var& a) {
    NDArray out({1});
    double s = 0.0;
    for (int64_t i = 0; i < a->val.size(); ++i) s += a->val[i];
    double inv_n = 1.0 / static_cast<double>(a->val.size());
    out[0] = s * inv_n;
    return make_node(std::move(out), {a}, [a, inv_n](Node& n) {
        NDArray& ag = a->ensure_grad();
        double g = n.grad[0] * inv_n;
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += g;
    });
}

Var sum_all(const Var& a) {
    NDArray out({1});
    double s = 0.0;
    for (int64_t i = 0; i < a->val.size(); ++i) s += a->val[i];
    out[0] = s;
    return make_node(std::move(out), {a}, [a](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += n.grad[0];
    });
}

Var mse(const Var& a, const Var& b) {
    check(a->val.same_shape(b->val), "mse: shape mismatch");
    NDArray out({1});
    double s = 0.0;
    for (int64_t i = 0; i < a->val.size(); ++i) {
        double d = a->val[i] - b->val[i];
        s += d * d;
    }
    double inv_n = 1.0 / static_cast<double>(a->val.size());
    out[0] = s * inv_n;
    return make_node(std::move(out), {a, b}, [a, b, inv_n](Node& n) {
        double g = 2.0 * inv_n * n.grad[0];
        if (a->requires_grad) {
            NDArray& ag = a->ensure_grad();
            for (int64_t i = 0; i < ag.size(); ++i) ag[i] += g * (a->val[i] - b->val[i]);
        }
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int64_t i = 0; i < bg.size(); ++i) bg[i] -= g * (a->val[i] - b->val[i]);
        }
    });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
    check(a->val.ndim() == 2 && b->val.ndim() == 2, "matmul: need 2-D");
    int M = a->val.dim(0), K = a->val.dim(1), K2 = b->val.dim(0), N = b->val.dim(1);
    check(K == K2, "matmul: inner dims differ");
    NDArray out({M, N});
    MMap(out.data(), M, N).noalias() = CMap(a->val.data(), M, K) * CMap(b->val.data(), K, N);
    return make_node(std::move(out), {a, b}, [a, b, M, K, N](Node& n) {
        CMap dY(n.grad.data(), M, N);
        if (a->requires_grad) {
            MMap(a->ensure_grad().data(), M, K).noalias() += dY * CMap(b->val.data(), K, N).transpose();
        }
        if (b->requires_grad) {
            MMap(b->ensure_grad().data(), K, N).noalias() += CMap(a->val.data(), M, K).transpose() * dY;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    int Din = x->val.shape().back();
    check(w->val.ndim() == 2 && w->val.dim(1) == Din, "linear: W shape mismatch");
    int Dout = w->val.dim(0);
    int64_t M = rows_of(x->val);
    std::vector<int> out_shape = x->val.shape();
    out_shape.back() = Dout;
    NDArray out(out_shape);
    MMap Y(out.data(), M, Dout);
    Y.noalias() = CMap(x->val.data(), M, Din) * CMap(w->val.data(), Dout, Din).transpose();
    if (b) {
        check(b->val.size() == Dout, "linear: bias shape mismatch");
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->val.data(), Dout);
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, M, Din, Dout](Node& n) {
        CMap dY(n.grad.data(), M, Dout);
        if (x->requires_grad)
            MMap(x->ensure_grad().data(), M, Din).noalias() += dY * CMap(w->val.data(), Dout, Din);
        if (w->requires_grad)
            MMap(w->ensure_grad().data(), Dout, Din).noalias() +=
                dY.transpose() * CMap(x->val.data(), M, Din);
        if (b && b->requires_grad) {
            Eigen::Map<Eigen::RowVectorXd>(b->ensure_grad().data(), Dout) += dY.colwise().sum();
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
    check(a->val.ndim() == 3 && b->val.ndim() == 3, "bmm: need 3-D");
    int B = a->val.dim(0), M = a->val.dim(1), K = a->val.dim(2);
    check(b->val.dim(0) == B, "bmm: batch mismatch");
    int N = trans_b ? b->val.dim(1) : b->val.dim(2);
    check((trans_b ? b->val.dim(2) : b->val.dim(1)) == K, "bmm: inner dims differ");
    NDArray out({B, M, N});
    for (int i = 0; i < B; ++i) {
        CMap A(a->val.data() + static_cast<int64_t>(i) * M * K, M, K);
        MMap C(out.data() + static_cast<int64_t>(i) * M * N, M, N);
        if (trans_b) {
            CMap Bm(b->val.data() + static_cast<int64_t>(i) * N * K, N, K);
            C.noalias() = A * Bm.transpose();
        } else {
            CMap Bm(b->val.data() + static_cast<int64_t>(i) * K * N, K, N);
            C.noalias() = A * Bm;
        }
    }
    return make_node(std::move(out), {a, b}, [a, b, B, M, K, N, trans_b](Node& n) {
        for (int i = 0; i < B; ++i) {
            CMap dC(n.grad.data() + static_cast<int64_t>(i) * M * N, M, N);
            CMap A(a->val.data() + static_cast<int64_t>(i) * M * K, M, K);
            if (trans_b) {
                CMap Bm(b->val.data() + static_cast<int64_t>(i) * N * K, N, K);
                if (a->requires_grad)
                    MMap(a->ensure_grad().data() + static_cast<int64_t>(i) * M * K, M, K)
                        .noalias() += dC * Bm;
                if (b->requires_grad)
                    MMap(b->ensure_grad().data() + static_cast<int64_t>(i) * N * K, N, K)
                        .noalias() += dC.transpose() * A;
            } else {
                CMap Bm(b->val.data() + static_cast<int64_t>(i) * K * N, K, N);
                if (a->requires_grad)
                    MMap(a->ensure_grad().data() + static_cast<int64_t>(i) * M * K, M, K)
                        .noalias() += dC * Bm.transpose();
                if (b->requires_grad)
                    MMap(b->ensure_grad().data() + static_cast<int64_t>(i) * K * N, K, N)
                        .noalias() += A.transpose() * dC;
            }
        }
    });
}

// ------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int> shape) {
    NDArray out = a->val.reshaped(std::move(shape));
    return make_node(std::move(out), {a}, [a](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t i = 0; i < ag.size(); ++i) ag[i] += n.grad[i];
    });
}

Var transpose2d(const Var& a) {
    check(a->val.ndim() == 2, "transpose2d: need 2-D");
    int M = a->val.dim(0), N = a->val.dim(1);
    NDArray out({N, M});
    MMap(out.data(), N, M) = CMap(a->val.data(), M, N).transpose();
    return make_node(std::move(out), {a}, [a, M, N](Node& n) {
        MMap(a->ensure_grad().data(), M, N) += CMap(n.grad.data(), N, M).transpose();
    });
}

Var permute102(const Var& a) {
    check(a->val.ndim() == 3, "permute102: need 3-D");
    int A = a->val.dim(0), B = a->val.dim(1), C = a->val.dim(2);
    NDArray out({B, A, C});
    for (int i = 0; i < A; ++i)
        for (int j = 0; j < B; ++j)
            for (int c = 0; c < C; ++c) out.at(j, i, c) = a->val.at(i, j, c);
    return make_node(std::move(out), {a}, [a, A, B, C](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int i = 0; i < A; ++i)
            for (int j = 0; j < B; ++j)
                for (int c = 0; c < C; ++c) ag.at(i, j, c) += n.grad.at(j, i, c);
    });
}

Var slice_axis0(const Var& a, int begin, int end) {
    check(begin >= 0 && end <= a->val.dim(0) && begin < end, "slice_axis0: bad range");
    int64_t inner = a->val.size() / a->val.dim(0);
    std::vector<int> shape = a->val.shape();
    shape[0] = end - begin;
    NDArray out(shape);
    std::copy(a->val.data() + begin * inner, a->val.data() + end * inner, out.data());
    return make_node(std::move(out), {a}, [a, begin, inner](Node& n) {
        NDArray& ag = a->ensure_grad();
        int64_t off = begin * inner;
        for (int64_t i = 0; i < n.grad.size(); ++i) ag[off + i] += n.grad[i];
    });
}

Var slice_axis1(const Var& a, int begin, int end) {
    check(a->val.ndim() == 3, "slice_axis1: need 3-D");
    int A = a->val.dim(0), B = a->val.dim(1), C = a->val.dim(2);
    check(begin >= 0 && end <= B && begin < end, "slice_axis1: bad range");
    NDArray out({A, end - begin, C});
    for (int i = 0; i < A; ++i)
        for (int j = begin; j < end; ++j)
            for (int c = 0; c < C; ++c) out.at(i, j - begin, c) = a->val.at(i, j, c);
    return make_node(std::move(out), {a}, [a, A, begin, end, C](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int i = 0; i < A; ++i)
            for (int j = begin; j < end; ++j)
                for (int c = 0; c < C; ++c) ag.at(i, j, c) += n.grad.at(i, j - begin, c);
    });
}

Var concat_axis0(const Var& a, const Var& b) {
    check(a->val.ndim() == b->val.ndim(), "concat_axis0: rank mismatch");
    for (int i = 1; i < a->val.ndim(); ++i)
        check(a->val.dim(i) == b->val.dim(i), "concat_axis0: trailing dims differ");
    std::vector<int> shape = a->val.shape();
    shape[0] += b->val.dim(0);
    NDArray out(shape);
    std::copy(a->val.data(), a->val.data() + a->val.size(), out.data());
    std::copy(b->val.data(), b->val.data() + b->val.size(), out.data() + a->val.size());
    int64_t na = a->val.size();
    return make_node(std::move(out), {a, b}, [a, b, na](Node& n) {
        if (a->requires_grad) {
            NDArray& ag = a->ensure_grad();
            for (int64_t i = 0; i < na; ++i) ag[i] += n.grad[i];
        }
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int64_t i = 0; i < bg.size(); ++i) bg[i] += n.grad[na + i];
        }
    });
}

Var concat_axis1(const Var& a, const Var& b) {
    check(a->val.ndim() == 3 && b->val.ndim() == 3, "concat_axis1: need 3-D");
    int A = a->val.dim(0), Ba = a->val.dim(1), Bb = b->val.dim(1), C = a->val.dim(2);
    check(b->val.dim(0) == A && b->val.dim(2) == C, "concat_axis1: dims differ");
    NDArray out({A, Ba + Bb, C});
    for (int i = 0; i < A; ++i) {
        for (int j = 0; j < Ba; ++j)
            for (int c = 0; c < C; ++c) out.at(i, j, c) = a->val.at(i, j, c);
        for (int j = 0; j < Bb; ++j)
            for (int c = 0; c < C; ++c) out.at(i, Ba + j, c) = b->val.at(i, j, c);
    }
    return make_node(std::move(out), {a, b}, [a, b, A, Ba, Bb, C](Node& n) {
        if (a->requires_grad) {
            NDArray& ag = a->ensure_grad();
            for (int i = 0; i < A; ++i)
                for (int j = 0; j < Ba; ++j)
                    for (int c = 0; c < C; ++c) ag.at(i, j, c) += n.grad.at(i, j, c);
        }
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int i = 0; i < A; ++i)
                for (int j = 0; j < Bb; ++j)
                    for (int c = 0; c < C; ++c) bg.at(i, j, c) += n.grad.at(i, Ba + j, c);
        }
    });
}

Var concat_lastdim(const Var& a, const Var& b) {
    int Da = a->val.shape().back(), Db = b->val.shape().back();
    int64_t Ma = rows_of(a->val), Mb = rows_of(b->val);
    check(Ma == Mb, "concat_lastdim: leading dims differ");
    std::vector<int> shape = a->val.shape();
    shape.back() = Da + Db;
    NDArray out(shape);
    for (int64_t r = 0; r < Ma; ++r) {
        for (int i = 0; i < Da; ++i) out[r * (Da + Db) + i] = a->val[r * Da + i];
        for (int i = 0; i < Db; ++i) out[r * (Da + Db) + Da + i] = b->val[r * Db + i];
    }
    return make_node(std::move(out), {a, b}, [a, b, Ma, Da, Db](Node& n) {
        if (a->requires_grad) {
            NDArray& ag = a->ensure_grad();
            for (int64_t r = 0; r < Ma; ++r)
                for (int i = 0; i < Da; ++i) ag[r * Da + i] += n.grad[r * (Da + Db) + i];
        }
        if (b->requires_grad) {
            NDArray& bg = b->ensure_grad();
            for (int64_t r = 0; r < Ma; ++r)
                for (int i = 0; i < Db; ++i) bg[r * Db + i] += n.grad[r * (Da + Db) + Da + i];
        }
    });
}

Var slice_lastdim(const Var& a, int begin, int end) {
    int D = a->val.shape().back();
    check(begin >= 0 && end <= D && begin < end, "slice_lastdim: bad range");
    int64_t M = rows_of(a->val);
    std::vector<int> shape = a->val.shape();
    shape.back() = end - begin;
    NDArray out(shape);
    int W = end - begin;
    for (int64_t r = 0; r < M; ++r)
        for (int i = 0; i < W; ++i) out[r * W + i] = a->val[r * D + begin + i];
    return make_node(std::move(out), {a}, [a, M, D, begin, W](Node& n) {
        NDArray& ag = a->ensure_grad();
        for (int64_t r = 0; r < M; ++r)
            for (int i = 0; i < W; ++i) ag[r * D + begin + i] += n.grad[r * W + i];
    });
}

Var split_heads(const Var& x, int heads) {
    check(x->val.ndim() == 3, "split_heads: need 3-D");
    int B = x->val.dim(0), T = x->val.dim(1), D = x->val.dim(2);
    check(D % heads == 0, "split_heads: D not divisible by heads");
    int dh = D / heads;
    NDArray out({B * heads, T, dh});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < dh; ++j)
                    out.at(b * heads + h, t, j) = x->val.at(b, t, h * dh + j);
    return make_node(std::move(out), {x, nullptr}, [x, heads](Node& n) {
        int B = x->val.dim(0), T = x->val.dim(1), D = x->val.dim(2);
        int dh = D / heads;
        NDArray& xg = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                for (int h = 0; h < heads; ++h)
                    for (int j = 0; j < dh; ++j)
                        xg.at(b, t, h * dh + j) += n.grad.at(b * heads + h, t, j);
    });
}

Var merge_heads(const Var& x, int heads) {
    check(x->val.ndim() == 3, "merge_heads: need 3-D");
    int BH = x->val.dim(0), T = x->val.dim(1), dh = x->val.dim(2);
    check(BH % heads == 0, "merge_heads: batch not divisible by heads");
    int B = BH / heads;
    NDArray out({B, T, dh * heads});
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
            for (int h = 0; h < heads; ++h)
                for (int j = 0; j < dh; ++j)
                    out.at(b, t, h * dh + j) = x->val.at(b * heads + h, t, j);
    return make_node(std::move(out), {x, nullptr}, [x, heads](Node& n) {
        int BH = x->val.dim(0), T = x->val.dim(1), dh = x->val.dim(2);
        int B = BH / heads;
        NDArray& xg = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                for (int h = 0; h < heads; ++h)
                    for (int j = 0; j < dh; ++j)
                        xg.at(b * heads + h, t, j) += n.grad.at(b, t, h * dh + j);
    });
}

// ---------------------------------------------------------- broadcast helpers

Var add_vec(const Var& x, const Var& v) {
    int D = x->val.shape().back();
    check(v->val.size() == D, "add_vec: vector length mismatch");
    int64_t M = rows_of(x->val);
    NDArray out(x->val.shape());
    for (int64_t r = 0; r < M; ++r)
        for (int i = 0; i < D; ++i) out[r * D + i] = x->val[r * D + i] + v->val[i];
    return make_node(std::move(out), {x, v}, [x, v, M, D](Node& n) {
        if (x->requires_grad) x->add_grad(n.grad);
        if (v->requires_grad) {
            NDArray& vg = v->ensure_grad();
            for (int64_t r = 0; r < M; ++r)
                for (int i = 0; i < D; ++i) vg[i] += n.grad[r * D + i];
        }
    });
}

Var scale_shift(const Var& x, const Var& scale, const Var& shift) {
    check(x->val.ndim() == 3, "scale_shift: need [F,L,D]");
    int F = x->val.dim(0), L = x->val.dim(1), D = x->val.dim(2);
    check(scale->val.ndim() == 2 && scale->val.dim(0) == F && scale->val.dim(1) == D,
          "scale_shift: scale shape mismatch");
    check(shift->val.same_shape(scale->val), "scale_shift: shift shape mismatch");
    NDArray out({F, L, D});
    for (int f = 0; f < F; ++f)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d)
                out.at(f, l, d) = x->val.at(f, l, d) * (1.0 + scale->val.at(f, d)) + shift->val.at(f, d);
    return make_node(std::move(out), {x, scale, shift}, [x, scale, shift, F, L, D](Node& n) {
        if (x->requires_grad) {
            NDArray& xg = x->ensure_grad();
            for (int f = 0; f < F; ++f)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        xg.at(f, l, d) += n.grad.at(f, l, d) * (1.0 + scale->val.at(f, d));
        }
        if (scale->requires_grad) {
            NDArray& sg = scale->ensure_grad();
            for (int f = 0; f < F; ++f)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        sg.at(f, d) += n.grad.at(f, l, d) * x->val.at(f, l, d);
        }
        if (shift->requires_grad) {
            NDArray& hg = shift->ensure_grad();
            for (int f = 0; f < F; ++f)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d) hg.at(f, d) += n.grad.at(f, l, d);
        }
    });
}

Var gate_mul(const Var& x, const Var& gate) {
    check(x->val.ndim() == 3, "gate_mul: need [F,L,D]");
    int F = x->val.dim(0), L = x->val.dim(1), D = x->val.dim(2);
    check(gate->val.ndim() == 2 && gate->val.dim(0) == F && gate->val.dim(1) == D,
          "gate_mul: gate shape mismatch");
    NDArray out({F, L, D});
    for (int f = 0; f < F; ++f)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < D; ++d) out.at(f, l, d) = x->val.at(f, l, d) * gate->val.at(f, d);
    return make_node(std::move(out), {x, gate}, [x, gate, F, L, D](Node& n) {
        if (x->requires_grad) {
            NDArray& xg = x->ensure_grad();
            for (int f = 0; f < F; ++f)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        xg.at(f, l, d) += n.grad.at(f, l, d) * gate->val.at(f, d);
        }
        if (gate->requires_grad) {
            NDArray& gg = gate->ensure_grad();
            for (int f = 0; f < F; ++f)
                for (int l = 0; l < L; ++l)
                    for (int d = 0; d < D; ++d)
                        gg.at(f, d) += n.grad.at(f, l, d) * x->val.at(f, l, d);
        }
    });
}

// ------------------------------------------------- layernorm / softmax

Var layernorm(const Var& x, double eps) {
    int D = x->val.shape().back();
    int64_t M = rows_of(x->val);
    NDArray out(x->val.shape());
    auto stats = std::make_shared<NDArray>(NDArray({static_cast<int>(M), 2}));
    for (int64_t r = 0; r < M; ++r) {
        const double* xr = x->val.data() + r * D;
        double mu = 0.0;
        for (int i = 0; i < D; ++i) mu += xr[i];
        mu /= D;
        double var = 0.0;
        for (int i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= D;
        double inv_std = 1.0 / std::sqrt(var + eps);
        stats->at(static_cast<int>(r), 0) = mu;
        stats->at(static_cast<int>(r), 1) = inv_std;
        double* yr = out.data() + r * D;
        for (int i = 0; i < D; ++i) yr[i] = (xr[i] - mu) * inv_std;
    }
    auto y_val = std::make_shared<NDArray>(out);
    return make_node(std::move(out), {x}, [x, stats, y_val, M, D](Node& n) {
        NDArray& xg = x->ensure_grad();
        for (int64_t r = 0; r < M; ++r) {
            const double* dy = n.grad.data() + r * D;
            const double* yh = y_val->data() + r * D;
            double inv_std = stats->at(static_cast<int>(r), 1);
            double mean_dy = 0.0, mean_dyy = 0.0;
            for (int i = 0; i < D; ++i) {
                mean_dy += dy[i];
                mean_dyy += dy[i] * yh[i];
            }
            mean_dy /= D;
            mean_dyy /= D;
            double* gx = xg.data() + r * D;
            for (int i = 0; i < D; ++i)
                gx[i] += inv_std * (dy[i] - mean_dy - yh[i] * mean_dyy);
        }
    });
}

Var softmax_lastdim(const Var& x) {
    int D = x->val.shape().back();
    int64_t M = rows_of(x->val);
    NDArray out(x->val.shape());
    for (int64_t r = 0; r < M; ++r) {
        const double* xr = x->val.data() + r * D;
        double* yr = out.data() + r * D;
        double mx = xr[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, xr[i]);
        double s = 0.0;
        for (int i = 0; i < D; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            s += yr[i];
        }
        double inv = 1.0 / s;
        for (int i = 0; i < D; ++i) yr[i] *= inv;
    }
    auto p_val = std::make_shared<NDArray>(out);
    return make_node(std::move(out), {x}, [x, p_val, M, D](Node& n) {
        NDArray& xg = x->ensure_grad();
        for (int64_t r = 0; r < M; ++r) {
            const double* dy = n.grad.data() + r * D;
            const double* p = p_val->data() + r * D;
            double dot = 0.0;
            for (int i = 0; i < D; ++i) dot += dy[i] * p[i];
            double* gx = xg.data() + r * D;
            for (int i = 0; i < D; ++i) gx[i] += p[i] * (dy[i] - dot);
        }
    });
}

// ----------------------------------------------------------------- conv

namespace {

struct ConvDims {
    int B, C, H, W, O, k, stride, pad, OH, OW;
};

void im2col(const NDArray& x, const ConvDims& d, NDArray& cols) {
    // cols: [B*OH*OW, C*k*k]
    const int ck2 = d.C * d.k * d.k;
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
                int64_t row = (static_cast<int64_t>(b) * d.OH + oy) * d.OW + ox;
                double* dst = cols.data() + row * ck2;
                for (int c = 0; c < d.C; ++c)
                    for (int ky = 0; ky < d.k; ++ky) {
                        int iy = oy * d.stride + ky - d.pad;
                        for (int kx = 0; kx < d.k; ++kx) {
                            int ix = ox * d.stride + kx - d.pad;
                            double v = 0.0;
                            if (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                                v = x.at(b, c, iy, ix);
                            dst[(c * d.k + ky) * d.k + kx] = v;
                        }
                    }
            }
}

void col2im_add(const NDArray& cols, const ConvDims& d, NDArray& dx) {
    const int ck2 = d.C * d.k * d.k;
    for (int b = 0; b < d.B; ++b)
        for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
                int64_t row = (static_cast<int64_t>(b) * d.OH + oy) * d.OW + ox;
                const double* src = cols.data() + row * ck2;
                for (int c = 0; c < d.C; ++c)
                    for (int ky = 0; ky < d.k; ++ky) {
                        int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.H) continue;
                        for (int kx = 0; kx < d.k; ++kx) {
                            int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.W) continue;
                            dx.at(b, c, iy, ix) += src[(c * d.k + ky) * d.k + kx];
                        }
                    }
            }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check(x->val.ndim() == 4 && w->val.ndim() == 4, "conv2d: need 4-D input and kernel");
    ConvDims d;
    d.B = x->val.dim(0);
    d.C = x->val.dim(1);
    d.H = x->val.dim(2);
    d.W = x->val.dim(3);
    d.O = w->val.dim(0);
    d.k = w->val.dim(2);
    check(w->val.dim(1) == d.C && w->val.dim(3) == d.k, "conv2d: kernel shape mismatch");
    d.stride = stride;
    d.pad = pad;
    d.OH = (d.H + 2 * pad - d.k) / stride + 1;
    d.OW = (d.W + 2 * pad - d.k) / stride + 1;
    check(d.OH > 0 && d.OW > 0, "conv2d: empty output");

    const int ck2 = d.C * d.k * d.k;
    const int64_t rows = static_cast<int64_t>(d.B) * d.OH * d.OW;
    auto cols = std::make_shared<NDArray>(NDArray({static_cast<int>(rows), ck2}));
    im2col(x->val, d, *cols);

    NDArray ymat({static_cast<int>(rows), d.O});
    MMap Y(ymat.data(), rows, d.O);
    Y.noalias() = CMap(cols->data(), rows, ck2) * CMap(w->val.data(), d.O, ck2).transpose();
    if (b) {
        check(b->val.size() == d.O, "conv2d: bias shape mismatch");
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->val.data(), d.O);
    }
    // [rows, O] -> [B, O, OH, OW]
    NDArray out({d.B, d.O, d.OH, d.OW});
    for (int bb = 0; bb < d.B; ++bb)
        for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox) {
                int64_t row = (static_cast<int64_t>(bb) * d.OH + oy) * d.OW + ox;
                for (int o = 0; o < d.O; ++o) out.at(bb, o, oy, ox) = ymat[row * d.O + o];
            }
    return make_node(std::move(out), {x, w, b}, [x, w, b, d, cols, rows, ck2](Node& n) {
        NDArray dymat({static_cast<int>(rows), d.O});
        for (int bb = 0; bb < d.B; ++bb)
            for (int oy = 0; oy < d.OH; ++oy)
                for (int ox = 0; ox < d.OW; ++ox) {
                    int64_t row = (static_cast<int64_t>(bb) * d.OH + oy) * d.OW + ox;
                    for (int o = 0; o < d.O; ++o)
                        dymat[row * d.O + o] = n.grad.at(bb, o, oy, ox);
                }
        CMap dY(dymat.data(), rows, d.O);
        if (b && b->requires_grad)
            Eigen::Map<Eigen::RowVectorXd>(b->ensure_grad().data(), d.O) += dY.colwise().sum();
        if (w->requires_grad)
            MMap(w->ensure_grad().data(), d.O, ck2).noalias() +=
                dY.transpose() * CMap(cols->data(), rows, ck2);
        if (x->requires_grad) {
            NDArray dcols({static_cast<int>(rows), ck2});
            MMap(dcols.data(), rows, ck2).noalias() = dY * CMap(w->val.data(), d.O, ck2);
            col2im_add(dcols, d, x->ensure_grad());
        }
    });
}

namespace {

struct PatchDims {
    int F, C, h, w, P, gy, gx, L, plen;
};

PatchDims patch_dims(const std::vector<int>& shape, int P) {
    PatchDims d;
    d.F = shape[0];
    d.C = shape[1];
    d.h = shape[2];
    d.w = shape[3];
    d.P = P;
    check(d.h % P == 0 && d.w % P == 0, "patchify: spatial dims not divisible by P");
    d.gy = d.h / P;
    d.gx = d.w / P;
    d.L = d.gy * d.gx;
    d.plen = P * P * d.C;
    return d;
}

} // namespace

Var patchify(const Var& x, int P) {
    check(x->val.ndim() == 4, "patchify: need [F,C,h,w]");
    PatchDims d = patch_dims(x->val.shape(), P);
    NDArray out({d.F, d.L, d.plen});
    for (int f = 0; f < d.F; ++f)
        for (int by = 0; by < d.gy; ++by)
            for (int bx = 0; bx < d.gx; ++bx) {
                int l = by * d.gx + bx;
                for (int c = 0; c < d.C; ++c)
                    for (int py = 0; py < P; ++py)
                        for (int px = 0; px < P; ++px)
                            out.at(f, l, (c * P + py) * P + px) =
                                x->val.at(f, c, by * P + py, bx * P + px);
            }
    return make_node(std::move(out), {x}, [x, d](Node& n) {
        NDArray& xg = x->ensure_grad();
        for (int f = 0; f < d.F; ++f)
            for (int by = 0; by < d.gy; ++by)
                for (int bx = 0; bx < d.gx; ++bx) {
                    int l = by * d.gx + bx;
                    for (int c = 0; c < d.C; ++c)
                        for (int py = 0; py < d.P; ++py)
                            for (int px = 0; px < d.P; ++px)
                                xg.at(f, c, by * d.P + py, bx * d.P + px) +=
                                    n.grad.at(f, l, (c * d.P + py) * d.P + px);
                }
    });
}

Var unpatchify(const Var& x, int P, int C, int h, int w) {
    check(x->val.ndim() == 3, "unpatchify: need [F,L,plen]");
    PatchDims d = patch_dims({x->val.dim(0), C, h, w}, P);
    check(x->val.dim(1) == d.L && x->val.dim(2) == d.plen, "unpatchify: token shape mismatch");
    NDArray out({d.F, C, h, w});
    for (int f = 0; f < d.F; ++f)
        for (int by = 0; by < d.gy; ++by)
            for (int bx = 0; bx < d.gx; ++bx) {
                int l = by * d.gx + bx;
                for (int c = 0; c < C; ++c)
                    for (int py = 0; py < P; ++py)
                        for (int px = 0; px < P; ++px)
                            out.at(f, c, by * P + py, bx * P + px) =
                                x->val.at(f, l, (c * P + py) * P + px);
            }
    return make_node(std::move(out), {x}, [x, d](Node& n) {
        NDArray& xg = x->ensure_grad();
        for (int f = 0; f < d.F; ++f)
            for (int by = 0; by < d.gy; ++by)
                for (int bx = 0; bx < d.gx; ++bx) {
                    int l = by * d.gx + bx;
                    for (int c = 0; c < d.C; ++c)
                        for (int py = 0; py < d.P; ++py)
                            for (int px = 0; px < d.P; ++px)
                                xg.at(f, l, (c * d.P + py) * d.P + px) +=
                                    n.grad.at(f, c, by * d.P + py, bx * d.P + px);
                }
    });
}

Var upsample2x(const Var& x) {
    check(x->val.ndim() == 4, "upsample2x: need 4-D");
    int B = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    NDArray out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    double v = x->val.at(b, c, y, xx);
                    out.at(b, c, 2 * y, 2 * xx) = v;
                    out.at(b, c, 2 * y, 2 * xx + 1) = v;
                    out.at(b, c, 2 * y + 1, 2 * xx) = v;
                    out.at(b, c, 2 * y + 1, 2 * xx + 1) = v;
                }
    return make_node(std::move(out), {x}, [x, B, C, H, W](Node& n) {
        NDArray& xg = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        xg.at(b, c, y, xx) += n.grad.at(b, c, 2 * y, 2 * xx) +
                                              n.grad.at(b, c, 2 * y, 2 * xx + 1) +
                                              n.grad.at(b, c, 2 * y + 1, 2 * xx) +
                                              n.grad.at(b, c, 2 * y + 1, 2 * xx + 1);
    });
}

} // namespace vegecast::ad
