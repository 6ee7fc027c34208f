#include <cmath>
#include <vector>

#include "helix/kernels.hpp"
#include "helix/poly_exp.hpp"

namespace helix::kernels::reference {

void gemm(bool trans_a, bool trans_b, index_t m, index_t n, index_t k, const double* a,
          const double* b, double* c) {
  for (index_t i = 0; i < m; ++i) {
    for (index_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (index_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = s;
    }
  }
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const index_t oh = g.out_h(), ow = g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  for (index_t n = 0; n < g.batch; ++n)
    for (index_t oc = 0; oc < g.out_channels; ++oc) {
      const index_t grp = oc / cog;
      for (index_t oy = 0; oy < oh; ++oy)
        for (index_t ox = 0; ox < ow; ++ox) {
          double s = bias ? bias[oc] : 0.0;
          for (index_t icg = 0; icg < cig; ++icg) {
            const index_t ic = grp * cig + icg;
            for (index_t ky = 0; ky < g.kernel_h; ++ky)
              for (index_t kx = 0; kx < g.kernel_w; ++kx) {
                const index_t iy = oy * g.stride + ky - g.pad;
                const index_t ix = ox * g.stride + kx - g.pad;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                s += w[((oc * cig + icg) * g.kernel_h + ky) * g.kernel_w + kx] *
                     x[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix];
              }
          }
          y[((n * g.out_channels + oc) * oh + oy) * ow + ox] = s;
        }
    }
}

void conv2d_backward_input(const ConvGeometry& g, const double* w, const double* gy, double* gx) {
  const index_t oh = g.out_h(), ow = g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  for (index_t n = 0; n < g.batch; ++n)
    for (index_t ic = 0; ic < g.in_channels; ++ic) {
      const index_t grp = ic / cig, icg = ic % cig;
      for (index_t iy = 0; iy < g.in_h; ++iy)
        for (index_t ix = 0; ix < g.in_w; ++ix) {
          double s = 0.0;
          for (index_t ocg = 0; ocg < cog; ++ocg) {
            const index_t oc = grp * cog + ocg;
            for (index_t ky = 0; ky < g.kernel_h; ++ky)
              for (index_t kx = 0; kx < g.kernel_w; ++kx) {
                const index_t ty = iy + g.pad - ky, tx = ix + g.pad - kx;
                if (ty < 0 || tx < 0 || ty % g.stride != 0 || tx % g.stride != 0) continue;
                const index_t oy = ty / g.stride, ox = tx / g.stride;
                if (oy >= oh || ox >= ow) continue;
                s += w[((oc * cig + icg) * g.kernel_h + ky) * g.kernel_w + kx] *
                     gy[((n * g.out_channels + oc) * oh + oy) * ow + ox];
              }
          }
          gx[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix] = s;
        }
    }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* gy, double* gw) {
  const index_t oh = g.out_h(), ow = g.out_w();
  const index_t cig = g.in_per_group(), cog = g.out_per_group();
  for (index_t oc = 0; oc < g.out_channels; ++oc) {
    const index_t grp = oc / cog;
    for (index_t icg = 0; icg < cig; ++icg) {
      const index_t ic = grp * cig + icg;
      for (index_t ky = 0; ky < g.kernel_h; ++ky)
        for (index_t kx = 0; kx < g.kernel_w; ++kx) {
          double total = 0.0;
          for (index_t n = 0; n < g.batch; ++n)
            for (index_t oy = 0; oy < oh; ++oy)
              for (index_t ox = 0; ox < ow; ++ox) {
                const index_t iy = oy * g.stride + ky - g.pad;
                const index_t ix = ox * g.stride + kx - g.pad;
                const bool inside = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
                const double xv =
                    inside ? x[((n * g.in_channels + ic) * g.in_h + iy) * g.in_w + ix] : 0.0;
                total += gy[((n * g.out_channels + oc) * oh + oy) * ow + ox] * xv;
              }
          gw[((oc * cig + icg) * g.kernel_h + ky) * g.kernel_w + kx] = total;
        }
    }
  }
}

void conv2d_backward_bias(const ConvGeometry& g, const double* gy, double* gb) {
  const index_t plane = g.out_h() * g.out_w();
  for (index_t oc = 0; oc < g.out_channels; ++oc) {
    double s = 0.0;
    for (index_t n = 0; n < g.batch; ++n)
      for (index_t p = 0; p < plane; ++p) s += gy[(n * g.out_channels + oc) * plane + p];
    gb[oc] = s;
  }
}

void softmax_rows(index_t rows, index_t cols, const double* x, double* y, double scale) {
  for (index_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double* yr = y + r * cols;
    double mx = xr[0] * scale;
    for (index_t j = 1; j < cols; ++j) mx = xr[j] * scale > mx ? xr[j] * scale : mx;
    double s = 0.0;
    for (index_t j = 0; j < cols; ++j) {
      yr[j] = poly_exp(xr[j] * scale - mx);
      s += yr[j];
    }
    for (index_t j = 0; j < cols; ++j) yr[j] /= s;
  }
}

void softmax_rows_backward(index_t rows, index_t cols, const double* y, const double* gy,
                           double* gx, double scale) {
  for (index_t r = 0; r < rows; ++r) {
    const double* yr = y + r * cols;
    const double* gr = gy + r * cols;
    double dot = 0.0;
    for (index_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
    for (index_t j = 0; j < cols; ++j) gx[r * cols + j] = scale * (yr[j] * (gr[j] - dot));
  }
}

void attention_forward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                       const double* k, const double* v, double scale, double* out) {
  std::vector<double> s(static_cast<std::size_t>(nq * nk)), p(s.size());
  for (index_t b = 0; b < batch; ++b) {
    gemm(false, true, nq, nk, d, q + b * nq * d, k + b * nk * d, s.data());
    softmax_rows(nq, nk, s.data(), p.data(), scale);
    gemm(false, false, nq, dv, nk, p.data(), v + b * nk * dv, out + b * nq * dv);
  }
}

void attention_backward(index_t batch, index_t nq, index_t nk, index_t d, index_t dv, const double* q,
                        const double* k, const double* v, double scale, const double* gout, double* gq, double* gk,
                        double* gv) {
  std::vector<double> s(static_cast<std::size_t>(nq * nk)), p(s.size()), gp(s.size()), gs(s.size());
  for (index_t b = 0; b < batch; ++b) {
    const double *qb = q + b * nq * d, *kb = k + b * nk * d, *vb = v + b * nk * dv, *gob = gout + b * nq * dv;
    gemm(false, true, nq, nk, d, qb, kb, s.data());
    softmax_rows(nq, nk, s.data(), p.data(), scale);
    gemm(false, true, nq, nk, dv, gob, vb, gp.data());
    gemm(true, false, nk, dv, nq, p.data(), gob, gv + b * nk * dv);
    softmax_rows_backward(nq, nk, p.data(), gp.data(), gs.data(), scale);
    gemm(false, false, nq, d, nk, gs.data(), kb, gq + b * nq * d);
    gemm(true, false, nk, d, nq, gs.data(), qb, gk + b * nk * d);
  }
}

}  // namespace helix::kernels::reference
