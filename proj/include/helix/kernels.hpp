#pragma once

#include <cstddef>

// Dense float64 compute kernels.
//
// Two implementations share every signature: `helix::kernels` holds the
// OpenMP-parallel, register-tiled versions used by the autodiff engine, and
// `helix::kernels::reference` holds straightforward serial loops kept for
// testing and benchmarking. Every output element is accumulated in the same
// fixed order by both, so results are bit-identical regardless of thread count
// (the build disables FMA contraction to keep it that way).
//
// Accumulation orders:
//   gemm          c[i][j] = 0 + sum_p a[i][p] * b[p][j], p ascending
//   conv forward  y = bias + sum over (in channel, ky, kx) ascending
//   conv dx       dx = 0 + sum over (out channel, ky, kx) ascending
//   conv dw       dw = 0 + sum over (n, oy, ox) ascending
//   conv dbias    0 + sum over (n, pixel) ascending
//   softmax       row max of scale * x, poly_exp(scale * x - max), sum ascending, divide
//   attention     the gemm/softmax/gemm composition above, so the fused kernels
//                 match the unfused graph; key and value gradients sum over
//                 query rows ascending
// Taps that fall in the zero padding contribute exact zeros in either form.

namespace helix::kernels {

using index_t = std::ptrdiff_t;

struct ConvGeometry {
  index_t batch = 1;
  index_t in_channels = 1;
  index_t in_h = 1;
  index_t in_w = 1;
  index_t out_channels = 1;
  index_t kernel_h = 1;
  index_t kernel_w = 1;
  index_t stride = 1;
  index_t pad = 0;
  index_t groups = 1;

  index_t out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  index_t out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  index_t in_per_group() const { return in_channels / groups; }
  index_t out_per_group() const { return out_channels / groups; }
};

/// c[m x n] = op(a) * op(b). op(a) is m x k (stored k x m when trans_a),
/// op(b) is k x n (stored n x k when trans_b). All row-major, contiguous.
void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, const double* a,
          const double* b, double* c);

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* gy, double* gx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* gy, double* gw);
void conv2d_backward_bias(const ConvGeometry& g, const double* gy, double* gb);

/// Row-wise softmax of scale * x over `cols` contiguous entries.
void softmax_rows(index_t rows, index_t cols, const double* x, double* y, double scale = 1.0);
/// gx = scale * (y * (gy - <gy, y>)) per row.
void softmax_rows_backward(index_t rows, index_t cols, const double* y, const double* gy,
                           double* gx, double scale = 1.0);

/// out = softmax(scale * q k^T) v per batch item, with q [nq x d], k [nk x d],
/// v [nk x dv]. Query rows are processed in blocks, so the nq x nk
/// probabilities are never stored whole.
void attention_forward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                       const double* k, const double* v, double scale, double* out);
/// Gradients of attention_forward given gout [nq x dv]. Probabilities are
/// recomputed block by block. gq, gk, gv are overwritten.
void attention_backward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                        const double* k, const double* v, double scale, const double* gout, double* gq, double* gk,
                        double* gv);

namespace reference {

void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, const double* a,
          const double* b, double* c);
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* gy, double* gx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* gy, double* gw);
void conv2d_backward_bias(const ConvGeometry& g, const double* gy, double* gb);
void softmax_rows(index_t rows, index_t cols, const double* x, double* y, double scale = 1.0);
void softmax_rows_backward(index_t rows, index_t cols, const double* y, const double* gy,
                           double* gx, double scale = 1.0);
void attention_forward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                       const double* k, const double* v, double scale, double* out);
void attention_backward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                        const double* k, const double* v, double scale, const double* gout, double* gq, double* gk,
                        double* gv);

}  // namespace reference

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace helix::kernels
