#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "helix/tensor.hpp"

// Differentiable primitives. Each records its gradient rule when any input
// requires gradients; otherwise it is a plain forward computation.

namespace helix::ad {

/// Elementwise with numpy-style broadcasting (shapes aligned on the right).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor silu(const Tensor& x);

/// Sum of all elements, shape [1].
Tensor sum(const Tensor& x);
/// Mean of all elements, shape [1].
Tensor mean(const Tensor& x);
/// mean((a - b)^2) over all elements; shapes must match.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
/// Swap the last two axes.
Tensor transpose_last2(const Tensor& x);

/// [m x k] * [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B, m, k] * [B, k, n], or [B, m, k] * [B, n, k]^T when transpose_b.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// softmax(scale * q k^T) v for q [B, nq, d], k [B, nk, d], v [B, nk, dv].
/// Same values and gradients as composing batched_matmul and softmax, without
/// keeping the [B, nq, nk] probabilities alive for the backward pass.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);
/// x[..., c] * w[c, d] (+ bias[d]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

/// softmax(scale * x). The fused scale rounds exactly like a separate `scale` op.
Tensor softmax(const Tensor& x, int axis, double scale = 1.0);

/// Cross-correlation of x [N, Cin, H, W] with w [Cout, Cin/groups, kh, kw],
/// zero padding. `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
              int groups);

/// Group normalization over x [N, C, ...] with `groups` dividing C. gamma and
/// beta ([C]) may be undefined for a plain normalization.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, std::span<const std::int64_t> sizes);
std::vector<Tensor> split(const Tensor& x, int axis, std::initializer_list<std::int64_t> sizes);

/// Rows `indices` of a 2-D table, stacked into [indices.size(), cols].
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices);

/// Nearest-neighbour x2 upsampling of [N, C, H, W].
Tensor upsample_nearest2x(const Tensor& x);
/// 2x2 average pooling of [N, C, H, W] (H, W even).
Tensor avg_pool2x(const Tensor& x);

}  // namespace helix::ad
