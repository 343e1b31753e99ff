#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vegecast/ndarray.hpp"

namespace vegecast::ad {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value in a dynamically built computation graph.
struct Node {
    NDArray val;
    NDArray grad; // allocated on demand during backward()
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn; // scatters node.grad into parents
    std::string name;

    NDArray& ensure_grad();
    void add_grad(const NDArray& g);
};

/// While alive, newly created ops detach from the tape: results carry values
/// only (no parents, no backward closures). Used for inference paths.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

Var constant(NDArray v);
Var leaf(NDArray v, bool requires_grad, std::string name = "");

/// Reverse-mode sweep from a scalar (or any) root; seeds root grad with ones.
void backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var square(const Var& a);
Var exp_op(const Var& a);
Var neg(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var sigmoid_op(const Var& a);
/// b * tanh(x / b): smoothly bounds values to (-b, b).
Var bounded_tanh(const Var& a, double bound);

// ---- reductions ----
Var mean_all(const Var& a);
Var sum_all(const Var& a);
/// mean((a-b)^2), as one fused node.
Var mse(const Var& a, const Var& b);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b); // [M,K]x[K,N]
/// X:[...,Din], W:[Dout,Din], b:[Dout] or null -> [...,Dout]
Var linear(const Var& x, const Var& w, const Var& b);
/// Batched matmul on 3-D tensors; trans_b multiplies by B^T per batch.
Var bmm(const Var& a, const Var& b, bool trans_b = false);

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var transpose2d(const Var& a);                  // [M,N] -> [N,M]
Var permute102(const Var& a);                   // [A,B,C] -> [B,A,C]
Var slice_axis0(const Var& a, int begin, int end);
Var slice_axis1(const Var& a, int begin, int end);   // 3-D only
Var concat_axis0(const Var& a, const Var& b);
Var concat_axis1(const Var& a, const Var& b);        // 3-D only
Var concat_lastdim(const Var& a, const Var& b);
Var slice_lastdim(const Var& a, int begin, int end);
Var split_heads(const Var& x, int heads);       // [B,T,D] -> [B*h,T,D/h]
Var merge_heads(const Var& x, int heads);       // [B*h,T,dh] -> [B,T,dh*h]

// ---- broadcasting helpers ----
/// X:[...,D] + v:[D] (or [1,D]) broadcast over leading dims.
Var add_vec(const Var& x, const Var& v);
/// X:[F,L,D], scale/shift:[F,D]: x*(1+scale)+shift broadcast over L.
Var scale_shift(const Var& x, const Var& scale, const Var& shift);
/// X:[F,L,D] * gate:[F,D] broadcast over L.
Var gate_mul(const Var& x, const Var& gate);

// ---- normalization / attention building blocks ----
Var layernorm(const Var& x, double eps = 1e-6); // over last dim, no affine
Var softmax_lastdim(const Var& x);

// ---- conv ----
/// X:[B,C,H,W], W:[O,C,k,k], b:[O] or null.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x(const Var& x); // nearest neighbour

// ---- patches ----
/// [F,C,h,w] -> [F,L,P*P*C] with L=(h/P)*(w/P); patches flattened row-major,
/// patch content laid out (c, py, px).
Var patchify(const Var& x, int P);
/// Inverse of patchify.
Var unpatchify(const Var& x, int P, int C, int h, int w);

} // namespace vegecast::ad
