#include "helix/kernels.hpp"
#include "helix/poly_exp.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace helix::kernels {
namespace {

constexpr index_t kRowTile = 4;
constexpr index_t kColTile = 16;

// c block rows [i0, i1) x columns [j0, j1) of a (m x k) times b (k x n), both
// row-major. Every c element is
// init + sum_p a*b with p ascending, where init is 0 or the existing c value
// when `accumulate` is set.
void gemm_block(index_t i0, index_t i1, index_t j0, index_t j1, index_t n, index_t k, const double* a,
                const double* b, double* c, bool accumulate) {
  if (i1 - i0 == kRowTile && j1 - j0 == kColTile) {
    double acc[kRowTile][kColTile];
    for (index_t r = 0; r < kRowTile; ++r)
      for (index_t jj = 0; jj < kColTile; ++jj) acc[r][jj] = accumulate ? c[(i0 + r) * n + j0 + jj] : 0.0;
    const double* arow = a + i0 * k;
    for (index_t p = 0; p < k; ++p) {
      const double* brow = b + p * n + j0;
      const double* ap = arow + p;
#pragma GCC unroll 8
      for (index_t r = 0; r < kRowTile; ++r) {
        const double av = ap[r * k];
#pragma omp simd
        for (index_t jj = 0; jj < kColTile; ++jj) acc[r][jj] += av * brow[jj];
      }
    }
    for (index_t r = 0; r < kRowTile; ++r) std::copy_n(acc[r], kColTile, c + (i0 + r) * n + j0);
    return;
  }
  for (index_t i = i0; i < i1; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow + j0, crow + j1, 0.0);
    for (index_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
#pragma omp simd
      for (index_t jj = j0; jj < j1; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

// Same contract for a stored k x m (trans_a). Full tiles hold 16 rows by 16
// columns of c, vectorized along the rows since each a row is contiguous.
constexpr index_t kTaTile = 16;

void gemm_block_ta(index_t i0, index_t i1, index_t j0, index_t j1, index_t m, index_t n, index_t k,
                   const double* a, const double* b, double* c, bool accumulate) {
  if (i1 - i0 == kTaTile && j1 - j0 == kTaTile) {
    double acc[kTaTile][kTaTile];
    for (index_t jj = 0; jj < kTaTile; ++jj)
      for (index_t ii = 0; ii < kTaTile; ++ii) acc[jj][ii] = accumulate ? c[(i0 + ii) * n + j0 + jj] : 0.0;
    for (index_t p = 0; p < k; ++p) {
      const double* ap = a + p * m + i0;
      const double* bp = b + p * n + j0;
#pragma GCC unroll 16
      for (index_t jj = 0; jj < kTaTile; ++jj) {
        const double bv = bp[jj];
#pragma omp simd
        for (index_t ii = 0; ii < kTaTile; ++ii) acc[jj][ii] += ap[ii] * bv;
      }
    }
    for (index_t ii = 0; ii < kTaTile; ++ii)
      for (index_t jj = 0; jj < kTaTile; ++jj) c[(i0 + ii) * n + j0 + jj] = acc[jj][ii];
    return;
  }
  for (index_t i = i0; i < i1; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow + j0, crow + j1, 0.0);
    for (index_t p = 0; p < k; ++p) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      for (index_t jj = j0; jj < j1; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

// Output columns ox whose input column ox*stride + kx - pad lies inside [0, in_w).
struct ColumnRange {
  index_t lo;
  index_t hi;
};

ColumnRange valid_columns(const ConvGeometry& g, index_t kx) {
  const index_t lo = std::max<index_t>(0, (g.pad - kx + g.stride - 1) / g.stride);
  const index_t top = g.in_w - 1 + g.pad - kx;
  const index_t hi = top < 0 ? 0 : std::min<index_t>(g.out_w(), top / g.stride + 1);
  return {lo, std::max(lo, hi)};
}

void transpose(index_t rows, index_t cols, const double* src, double* dst) {
  constexpr index_t kBlock = 32;
  for (index_t r0 = 0; r0 < rows; r0 += kBlock)
    for (index_t c0 = 0; c0 < cols; c0 += kBlock) {
      const index_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (index_t r = r0; r < r1; ++r)
        for (index_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

void gemm_impl(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  std::vector<double> bt;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k * n));
    transpose(n, k, b, bt.data());
    b = bt.data();
  }
  if (trans_a) {
    const index_t row_blocks = (m + kTaTile - 1) / kTaTile, col_blocks = (n + kTaTile - 1) / kTaTile;
#pragma omp parallel for collapse(2) schedule(static) if (m * n * k > 32768)
    for (index_t bi = 0; bi < row_blocks; ++bi)
      for (index_t bj = 0; bj < col_blocks; ++bj)
        gemm_block_ta(bi * kTaTile, std::min(m, (bi + 1) * kTaTile), bj * kTaTile, std::min(n, (bj + 1) * kTaTile), m,
                      n, k, a, b, c, accumulate);
    return;
  }
  // Column panels sized so one k x panel slice of b stays in cache across row blocks.
  const index_t panel = std::max(kColTile, (index_t{32768} / std::max<index_t>(k, 1)) / kColTile * kColTile);
  const index_t panels = (n + panel - 1) / panel;
  const index_t row_blocks = (m + kRowTile - 1) / kRowTile;
#pragma omp parallel for collapse(2) schedule(static) if (m * n * k > 32768)
  for (index_t pj = 0; pj < panels; ++pj)
    for (index_t bi = 0; bi < row_blocks; ++bi) {
      const index_t i0 = bi * kRowTile, i1 = std::min(m, i0 + kRowTile);
      const index_t p1 = std::min(n, (pj + 1) * panel);
      for (index_t j0 = pj * panel; j0 < p1; j0 += kColTile)
        gemm_block(i0, i1, j0, std::min(p1, j0 + kColTile), n, k, a, b, c, accumulate);
    }
}

// Rows (icg, ky, kx), columns output pixels. Out-of-range taps hold exact zeros.
void im2col(const ConvGeometry& g, const double* x_group, double* cols) {
  const index_t oh = g.out_h(), ow = g.out_w(), ohw = oh * ow;
  const index_t taps = g.kernel_h * g.kernel_w;
  for (index_t icg = 0; icg < g.in_per_group(); ++icg) {
    const double* in = x_group + icg * g.in_h * g.in_w;
    for (index_t ky = 0; ky < g.kernel_h; ++ky)
      for (index_t kx = 0; kx < g.kernel_w; ++kx) {
        double* row = cols + (icg * taps + ky * g.kernel_w + kx) * ohw;
        const auto [lo, hi] = valid_columns(g, kx);
        const index_t shift = kx - g.pad;
        for (index_t oy = 0; oy < oh; ++oy) {
          double* out = row + oy * ow;
          const index_t iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.in_h) {
            std::fill_n(out, ow, 0.0);
            continue;
          }
          const double* irow = in + iy * g.in_w;
          std::fill_n(out, lo, 0.0);
          for (index_t ox = lo; ox < hi; ++ox) out[ox] = irow[ox * g.stride + shift];
          std::fill(out + hi, out + ow, 0.0);
        }
      }
  }
}

void conv2d_backward_input_strided(const ConvGeometry& g, const double* w, const double* gy, double* gx) {
  const index_t oh = g.out_h(), ow = g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  const index_t planes = g.batch * g.in_channels;
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < planes; ++job) {
    const index_t n = job / g.in_channels, ic = job % g.in_channels;
    const index_t grp = ic / cig, icg = ic % cig;
    double* gin = gx + job * g.in_h * g.in_w;
    std::fill_n(gin, g.in_h * g.in_w, 0.0);
    for (index_t ocg = 0; ocg < cog; ++ocg) {
      const index_t oc = grp * cog + ocg;
      const double* gout = gy + (n * g.out_channels + oc) * oh * ow;
      const double* wk = w + (oc * cig + icg) * g.kernel_h * g.kernel_w;
      for (index_t ky = 0; ky < g.kernel_h; ++ky)
        for (index_t kx = 0; kx < g.kernel_w; ++kx) {
          const double wv = wk[ky * g.kernel_w + kx];
          const auto [lo, hi] = valid_columns(g, kx);
          const index_t shift = kx - g.pad;
          for (index_t oy = 0; oy < oh; ++oy) {
            const index_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.in_h) continue;
            double* grow = gin + iy * g.in_w;
            const double* orow = gout + oy * ow;
            for (index_t ox = lo; ox < hi; ++ox) grow[ox * g.stride + shift] += wv * orow[ox];
          }
        }
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, const double* a,
          const double* b, double* c) {
  gemm_impl(trans_a, trans_b, m, n, k, a, b, c, false);
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const index_t ohw = g.out_h() * g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  const index_t depth = cig * g.kernel_h * g.kernel_w;
  std::vector<double> cols(static_cast<std::size_t>(depth * ohw));
  for (index_t n = 0; n < g.batch; ++n)
    for (index_t grp = 0; grp < g.groups; ++grp) {
      im2col(g, x + (n * g.in_channels + grp * cig) * g.in_h * g.in_w, cols.data());
      double* out = y + (n * g.out_channels + grp * cog) * ohw;
      for (index_t ocg = 0; ocg < cog; ++ocg)
        std::fill_n(out + ocg * ohw, ohw, bias ? bias[grp * cog + ocg] : 0.0);
      gemm_impl(false, false, cog, ohw, depth, w + grp * cog * depth, cols.data(), out, true);
    }
}

void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* gy, double* gx) {
  if (g.stride != 1) {
    conv2d_backward_input_strided(g, w, gy, gx);
    return;
  }
  const index_t oh = g.out_h(), ow = g.out_w(), ihw = g.in_h * g.in_w;
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  const index_t taps = g.kernel_h * g.kernel_w, depth = cog * taps;
  // wt[icg][(ocg, ky, kx)] and gathered[(ocg, ky, kx)][input pixel]: the gemm
  // then sums (ocg, ky, kx) ascending for every input pixel.
  std::vector<double> wt(static_cast<std::size_t>(cig * depth));
  std::vector<double> gathered(static_cast<std::size_t>(depth * ihw));
  for (index_t grp = 0; grp < g.groups; ++grp) {
    for (index_t icg = 0; icg < cig; ++icg)
      for (index_t ocg = 0; ocg < cog; ++ocg)
        for (index_t t = 0; t < taps; ++t)
          wt[static_cast<std::size_t>(icg * depth + ocg * taps + t)] = w[((grp * cog + ocg) * cig + icg) * taps + t];
    for (index_t n = 0; n < g.batch; ++n) {
      for (index_t ocg = 0; ocg < cog; ++ocg) {
        const double* gout = gy + (n * g.out_channels + grp * cog + ocg) * oh * ow;
        for (index_t ky = 0; ky < g.kernel_h; ++ky)
          for (index_t kx = 0; kx < g.kernel_w; ++kx) {
            double* row = gathered.data() + (ocg * taps + ky * g.kernel_w + kx) * ihw;
            // input column ix reads output column ox = ix + pad - kx
            const index_t lo = std::clamp<index_t>(kx - g.pad, 0, g.in_w);
            const index_t hi = std::clamp<index_t>(ow + kx - g.pad, lo, g.in_w);
            for (index_t iy = 0; iy < g.in_h; ++iy) {
              double* out = row + iy * g.in_w;
              const index_t oy = iy + g.pad - ky;
              if (oy < 0 || oy >= oh) {
                std::fill_n(out, g.in_w, 0.0);
                continue;
              }
              const double* orow = gout + oy * ow + g.pad - kx;
              std::fill_n(out, lo, 0.0);
              for (index_t ix = lo; ix < hi; ++ix) out[ix] = orow[ix];
              std::fill(out + hi, out + g.in_w, 0.0);
            }
          }
      }
      gemm_impl(false, false, cig, ihw, depth, wt.data(), gathered.data(),
                gx + (n * g.in_channels + grp * cig) * ihw, false);
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* gy, double* gw) {
  const index_t ohw = g.out_h() * g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  const index_t depth = cig * g.kernel_h * g.kernel_w;
  std::vector<double> cols(static_cast<std::size_t>(depth * ohw));
  for (index_t grp = 0; grp < g.groups; ++grp)
    for (index_t n = 0; n < g.batch; ++n) {
      im2col(g, x + (n * g.in_channels + grp * cig) * g.in_h * g.in_w, cols.data());
      gemm_impl(false, true, cog, depth, ohw, gy + (n * g.out_channels + grp * cog) * ohw, cols.data(),
                gw + grp * cog * depth, n > 0);
    }
}

void conv2d_backward_bias(const ConvGeometry& g, const double* gy, double* gb) {
  const index_t plane = g.out_h() * g.out_w();
#pragma omp parallel for schedule(static)
  for (index_t oc = 0; oc < g.out_channels; ++oc) {
    double s = 0.0;
    for (index_t n = 0; n < g.batch; ++n) {
      const double* p = gy + (n * g.out_channels + oc) * plane;
      for (index_t i = 0; i < plane; ++i) s += p[i];
    }
    gb[oc] = s;
  }
}

void softmax_rows(index_t rows, index_t cols, const double* x, double* y, double scale) {
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (index_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0] * scale;
    for (index_t j = 1; j < cols; ++j) mx = xr[j] * scale > mx ? xr[j] * scale : mx;
    for (index_t j = 0; j < cols; ++j) yr[j] = poly_exp(xr[j] * scale - mx);
    double s = 0.0;
    for (index_t j = 0; j < cols; ++j) s += yr[j];
    for (index_t j = 0; j < cols; ++j) yr[j] /= s;
  }
}

void softmax_rows_backward(index_t rows, index_t cols, const double* y, const double* gy,
                           double* gx, double scale) {
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (index_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* gr = gy + r * cols;
    double dot = 0.0;
    for (index_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
    double* xr = gx + r * cols;
    for (index_t j = 0; j < cols; ++j) xr[j] = scale * (yr[j] * (gr[j] - dot));
  }
}

namespace {

// Query rows per block: keeps a block of scores near 256 KiB.
index_t attention_rows(index_t nk) { return std::max<index_t>(4, index_t{32768} / std::max<index_t>(nk, 1)); }

}  // namespace

void attention_forward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                       const double* k, const double* v, double scale, double* out) {
  const index_t rows = attention_rows(nk);
#pragma omp parallel if (batch * nq * nk > 16384)
  {
    std::vector<double> kt(static_cast<std::size_t>(d * nk)), p(static_cast<std::size_t>(rows * nk));
#pragma omp for schedule(static)
    for (index_t b = 0; b < batch; ++b) {
      transpose(nk, d, k + b * nk * d, kt.data());
      for (index_t r0 = 0; r0 < nq; r0 += rows) {
        const index_t r = std::min(rows, nq - r0);
        gemm_impl(false, false, r, nk, d, q + (b * nq + r0) * d, kt.data(), p.data(), false);
        softmax_rows(r, nk, p.data(), p.data(), scale);
        gemm_impl(false, false, r, dv, nk, p.data(), v + b * nk * dv, out + (b * nq + r0) * dv, false);
      }
    }
  }
}

void attention_backward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                        const double* k, const double* v, double scale, const double* gout, double* gq, double* gk,
                        double* gv) {
  if (nq == 0) {
    std::fill_n(gk, batch * nk * d, 0.0);
    std::fill_n(gv, batch * nk * dv, 0.0);
    return;
  }
  const index_t rows = attention_rows(nk);
#pragma omp parallel if (batch * nq * nk > 16384)
  {
    std::vector<double> kt(static_cast<std::size_t>(d * nk)), vt(static_cast<std::size_t>(dv * nk));
    std::vector<double> p(static_cast<std::size_t>(rows * nk)), gp(p.size());
#pragma omp for schedule(static)
    for (index_t b = 0; b < batch; ++b) {
      const double *qb = q + b * nq * d, *kb = k + b * nk * d, *vb = v + b * nk * dv;
      transpose(nk, d, kb, kt.data());
      transpose(nk, dv, vb, vt.data());
      for (index_t r0 = 0; r0 < nq; r0 += rows) {
        const index_t r = std::min(rows, nq - r0);
        const bool first = r0 == 0;
        const double* qr = qb + r0 * d;
        const double* gor = gout + (b * nq + r0) * dv;
        gemm_impl(false, false, r, nk, d, qr, kt.data(), p.data(), false);
        softmax_rows(r, nk, p.data(), p.data(), scale);
        gemm_impl(false, false, r, nk, dv, gor, vt.data(), gp.data(), false);
        gemm_impl(true, false, nk, dv, r, p.data(), gor, gv + b * nk * dv, !first);
        softmax_rows_backward(r, nk, p.data(), gp.data(), gp.data(), scale);
        gemm_impl(false, false, r, d, nk, gp.data(), kb, gq + (b * nq + r0) * d, false);
        gemm_impl(true, false, nk, d, r, gp.data(), qr, gk + b * nk * d, !first);
      }
    }
  }
}

}  // namespace helix::kernels
