#include "helix/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helix/errors.hpp"
#include "helix/kernels.hpp"
#include "helix/poly_exp.hpp"

namespace helix::ad {
namespace {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

void accumulate(const Impl& target, std::span<const double> delta) {
  if (!target->requires_grad) return;
  auto& g = target->grad_buffer();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

int normalize_axis(int axis, int ndim, const Shape& shape) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim)
    throw DimensionError("axis out of range for shape " + to_string(shape));
  return axis;
}

// Broadcast bookkeeping for binary elementwise ops.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;  // per output axis, 0 on broadcast axes
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  bc.out.assign(nd, 1);
  std::vector<std::int64_t> da(nd, 1), db(nd, 1);
  for (std::size_t i = 0; i < a.size(); ++i) da[nd - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) db[nd - b.size() + i] = b[i];
  for (std::size_t i = 0; i < nd; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(da[i], db[i]);
  }
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  std::int64_t sa = 1, sb = 1;
  for (std::size_t i = nd; i-- > 0;) {
    bc.stride_a[i] = da[i] == 1 ? 0 : sa;
    bc.stride_b[i] = db[i] == 1 ? 0 : sb;
    sa *= da[i];
    sb *= db[i];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::int64_t total = numel(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t nd = bc.out.size();
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = nd; ax-- > 0;) {
      ++idx[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * idx[ax];
      ib -= bc.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, std::string_view name) {
  Broadcast bc = broadcast(a.shape(), b.shape());
  std::vector<double> out(sz(numel(bc.out)));
  const auto ad = a.data(), bd = b.data();
  for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
    const double x = ad[sz(i)], y = bd[sz(j)];
    out[sz(o)] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
  });
  Impl ai = a.impl(), bi = b.impl();
  Shape oshape = bc.out;
  return make_result(name, std::move(oshape), std::move(out), {a, b},
                     [ai, bi, bc, kind](const TensorImpl& o) {
                       const auto& g = o.grad;
                       if (ai->requires_grad) {
                         auto& ga = ai->grad_buffer();
                         const auto& bd = bi->data;
                         for_each_broadcast(bc, [&](std::int64_t k, std::int64_t i, std::int64_t j) {
                           ga[sz(i)] += kind == Binary::kMul ? g[sz(k)] * bd[sz(j)] : g[sz(k)];
                         });
                       }
                       if (bi->requires_grad) {
                         auto& gb = bi->grad_buffer();
                         const auto& ad = ai->data;
                         for_each_broadcast(bc, [&](std::int64_t k, std::int64_t i, std::int64_t j) {
                           const double v = kind == Binary::kMul   ? g[sz(k)] * ad[sz(i)]
                                            : kind == Binary::kSub ? -g[sz(k)]
                                                                   : g[sz(k)];
                           gb[sz(j)] += v;
                         });
                       }
                     });
}

void check_rank(const Tensor& t, int rank, std::string_view op) {
  if (t.ndim() != rank)
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  Impl xi = x.impl();
  return make_result("scale", x.shape(), std::move(out), {x}, [xi, factor](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  Impl xi = x.impl();
  return make_result("add_scalar", x.shape(), std::move(out), {x},
                     [xi](const TensorImpl& o) { accumulate(xi, o.grad); });
}

Tensor silu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] / (1.0 + kernels::poly_exp(-xd[i]));
  Impl xi = x.impl();
  return make_result("silu", x.shape(), std::move(out), {x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    const auto& xd = xi->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + kernels::poly_exp(-xd[i]));
      g[i] += o.grad[i] * s * (1.0 + xd[i] * (1.0 - s));
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Impl xi = x.impl();
  return make_result("sum", {1}, {s}, {x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto ad = a.data(), bd = b.data();
  const double n = static_cast<double>(ad.size());
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = ad[i] - bd[i];
    s += d * d;
  }
  Impl ai = a.impl(), bi = b.impl();
  return make_result("mse", {1}, {s / n}, {a, b}, [ai, bi, n](const TensorImpl& o) {
    const double k = 2.0 * o.grad[0] / n;
    const auto& ad = ai->data;
    const auto& bd = bi->data;
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (ad[i] - bd[i]);
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (ad[i] - bd[i]);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  Impl xi = x.impl();
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [xi](const TensorImpl& o) { accumulate(xi, o.grad); });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.ndim() < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + to_string(x.shape()));
  Shape shape = x.shape();
  const std::int64_t r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  const std::int64_t batch = x.numel() / (r * c);
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) out[sz(b * r * c + j * r + i)] = xd[sz(b * r * c + i * c + j)];
  Impl xi = x.impl();
  return make_result("transpose", std::move(shape), std::move(out), {x},
                     [xi, batch, r, c](const TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t b = 0; b < batch; ++b)
                         for (std::int64_t i = 0; i < r; ++i)
                           for (std::int64_t j = 0; j < c; ++j)
                             g[sz(b * r * c + i * c + j)] += o.grad[sz(b * r * c + j * r + i)];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(sz(m * n));
  kernels::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  Impl ai = a.impl(), bi = b.impl();
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [ai, bi, m, n, k](const TensorImpl& o) {
    if (ai->requires_grad) {
      std::vector<double> tmp(sz(m * k));
      kernels::gemm(false, true, m, k, n, o.grad.data(), bi->data.data(), tmp.data());
      accumulate(ai, tmp);
    }
    if (bi->requires_grad) {
      std::vector<double> tmp(sz(k * n));
      kernels::gemm(true, false, k, n, m, ai->data.data(), o.grad.data(), tmp.data());
      accumulate(bi, tmp);
    }
  });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  check_rank(a, 3, "batched_matmul");
  check_rank(b, 3, "batched_matmul");
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::int64_t kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || kb != k)
    throw DimensionError("batched_matmul shape mismatch: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + (transpose_b ? "^T" : ""));
  std::vector<double> out(sz(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i)
    kernels::gemm(false, transpose_b, m, n, k, a.data().data() + i * m * k,
                  b.data().data() + i * k * n, out.data() + i * m * n);
  Impl ai = a.impl(), bi = b.impl();
  return make_result(
      "batched_matmul", {batch, m, n}, std::move(out), {a, b},
      [ai, bi, batch, m, n, k, transpose_b](const TensorImpl& o) {
        if (ai->requires_grad) {
          std::vector<double> tmp(sz(batch * m * k));
          for (std::int64_t i = 0; i < batch; ++i)
            kernels::gemm(false, !transpose_b, m, k, n, o.grad.data() + i * m * n,
                          bi->data.data() + i * k * n, tmp.data() + i * m * k);
          accumulate(ai, tmp);
        }
        if (bi->requires_grad) {
          std::vector<double> tmp(sz(batch * k * n));
          for (std::int64_t i = 0; i < batch; ++i) {
            if (transpose_b)
              kernels::gemm(true, false, n, k, m, o.grad.data() + i * m * n,
                            ai->data.data() + i * m * k, tmp.data() + i * k * n);
            else
              kernels::gemm(true, false, k, n, m, ai->data.data() + i * m * k,
                            o.grad.data() + i * m * n, tmp.data() + i * k * n);
          }
          accumulate(bi, tmp);
        }
      });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  check_rank(q, 3, "attention");
  check_rank(k, 3, "attention");
  check_rank(v, 3, "attention");
  const std::int64_t batch = q.dim(0), nq = q.dim(1), d = q.dim(2), nk = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != batch || v.dim(0) != batch || k.dim(2) != d || v.dim(1) != nk)
    throw DimensionError("attention shape mismatch: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()));
  std::vector<double> out(sz(batch * nq * dv));
  kernels::attention_forward(batch, nq, nk, d, dv, q.data().data(), k.data().data(), v.data().data(), scale,
                             out.data());
  Impl qi = q.impl(), ki = k.impl(), vi = v.impl();
  return make_result("attention", {batch, nq, dv}, std::move(out), {q, k, v},
                     [qi, ki, vi, batch, nq, nk, d, dv, scale](const TensorImpl& o) {
                       std::vector<double> gq(qi->data.size()), gk(ki->data.size()), gv(vi->data.size());
                       kernels::attention_backward(batch, nq, nk, d, dv, qi->data.data(), ki->data.data(),
                                                   vi->data.data(), scale, o.grad.data(), gq.data(), gk.data(),
                                                   gv.data());
                       if (qi->requires_grad) accumulate(qi, gq);
                       if (ki->requires_grad) accumulate(ki, gk);
                       if (vi->requires_grad) accumulate(vi, gv);
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_rank(w, 2, "linear weight");
  const std::int64_t c = x.shape().back();
  if (c != w.dim(0))
    throw DimensionError("linear shape mismatch: " + to_string(x.shape()) + " x " + to_string(w.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor y = matmul(reshape(x, {x.numel() / c, c}), w);
  if (bias.defined()) y = add(y, bias);
  return reshape(y, std::move(out_shape));
}

Tensor softmax(const Tensor& x, int axis, double scale) {
  const Shape& shape = x.shape();
  axis = normalize_axis(axis, x.ndim(), shape);
  const std::int64_t len = shape[sz(axis)];
  std::int64_t inner = 1;
  for (std::size_t i = sz(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::int64_t outer = x.numel() / (len * inner);
  std::vector<double> out(sz(x.numel()));
  const auto xd = x.data();
  if (inner == 1) {
    kernels::softmax_rows(outer, len, xd.data(), out.data(), scale);
  } else {
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * len * inner + i;
        double mx = xd[sz(base)] * scale;
        for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, xd[sz(base + j * inner)] * scale);
        double s = 0.0;
        for (std::int64_t j = 0; j < len; ++j) {
          out[sz(base + j * inner)] = kernels::poly_exp(xd[sz(base + j * inner)] * scale - mx);
          s += out[sz(base + j * inner)];
        }
        for (std::int64_t j = 0; j < len; ++j) out[sz(base + j * inner)] /= s;
      }
  }
  Impl xi = x.impl();
  return make_result("softmax", shape, std::move(out), {x}, [xi, outer, len, inner, scale](const TensorImpl& o) {
    std::vector<double> gx(o.data.size());
    if (inner == 1) {
      kernels::softmax_rows_backward(outer, len, o.data.data(), o.grad.data(), gx.data(), scale);
    } else {
      for (std::int64_t q = 0; q < outer; ++q)
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = q * len * inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < len; ++j)
            dot += o.grad[sz(base + j * inner)] * o.data[sz(base + j * inner)];
          for (std::int64_t j = 0; j < len; ++j) {
            const std::size_t at = sz(base + j * inner);
            gx[at] = scale * (o.data[at] * (o.grad[at] - dot));
          }
        }
    }
    accumulate(xi, gx);
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int groups) {
  check_rank(x, 4, "conv2d input");
  check_rank(w, 4, "conv2d weight");
  if (groups < 1 || x.dim(1) % groups != 0 || w.dim(0) % groups != 0)
    throw ConfigError("conv2d: channels (in " + std::to_string(x.dim(1)) + ", out " +
                      std::to_string(w.dim(0)) + ") not divisible by groups " + std::to_string(groups));
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel_h = w.dim(2);
  g.kernel_w = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  if (w.dim(1) != g.in_per_group())
    throw DimensionError("conv2d weight " + to_string(w.shape()) + " does not match input " +
                         to_string(x.shape()) + " with groups " + std::to_string(groups));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.out_channels))
    throw DimensionError("conv2d bias shape " + to_string(bias.shape()));
  if (g.out_h() < 1 || g.out_w() < 1)
    throw DimensionError("conv2d kernel larger than padded input " + to_string(x.shape()));
  std::vector<double> out(sz(g.batch * g.out_channels * g.out_h() * g.out_w()));
  kernels::conv2d_forward(g, x.data().data(), w.data().data(),
                          bias.defined() ? bias.data().data() : nullptr, out.data());
  Impl xi = x.impl(), wi = w.impl();
  Impl bi = bias.defined() ? bias.impl() : nullptr;
  return make_result("conv2d", {g.batch, g.out_channels, g.out_h(), g.out_w()}, std::move(out),
                     {x, w, bias}, [xi, wi, bi, g](const TensorImpl& o) {
                       if (xi->requires_grad) {
                         std::vector<double> tmp(xi->data.size());
                         kernels::conv2d_backward_input(g, wi->data.data(), o.grad.data(), tmp.data());
                         accumulate(xi, tmp);
                       }
                       if (wi->requires_grad) {
                         std::vector<double> tmp(wi->data.size());
                         kernels::conv2d_backward_weight(g, xi->data.data(), o.grad.data(), tmp.data());
                         accumulate(wi, tmp);
                       }
                       if (bi && bi->requires_grad) {
                         std::vector<double> tmp(bi->data.size());
                         kernels::conv2d_backward_bias(g, o.grad.data(), tmp.data());
                         accumulate(bi, tmp);
                       }
                     });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.ndim() < 2) throw DimensionError("group_norm needs [N, C, ...], got " + to_string(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (groups < 1 || c % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible by " +
                      std::to_string(groups) + " groups");
  if (gamma.defined() && (gamma.ndim() != 1 || gamma.dim(0) != c))
    throw DimensionError("group_norm gamma shape " + to_string(gamma.shape()));
  if (beta.defined() && (beta.ndim() != 1 || beta.dim(0) != c))
    throw DimensionError("group_norm beta shape " + to_string(beta.shape()));
  const std::int64_t spatial = x.numel() / (n * c);
  const std::int64_t cpg = c / groups;
  const std::int64_t count = cpg * spatial;
  const auto xd = x.data();
  std::vector<double> xhat(xd.size()), out(xd.size());
  std::vector<double> rstd(sz(n * groups));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (b * c + gi * cpg) * spatial;
      double s = 0.0;
      for (std::int64_t i = 0; i < count; ++i) s += xd[sz(base + i)];
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::int64_t i = 0; i < count; ++i) {
        const double d = xd[sz(base + i)] - mu;
        v += d * d;
      }
      const double r = 1.0 / std::sqrt(v / static_cast<double>(count) + eps);
      rstd[sz(b * groups + gi)] = r;
      for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t ch = gi * cpg + i / spatial;
        const double h = (xd[sz(base + i)] - mu) * r;
        xhat[sz(base + i)] = h;
        out[sz(base + i)] = h * (gamma.defined() ? gamma.data()[sz(ch)] : 1.0) +
                            (beta.defined() ? beta.data()[sz(ch)] : 0.0);
      }
    }
  Impl xi = x.impl();
  Impl gmi = gamma.defined() ? gamma.impl() : nullptr;
  Impl bti = beta.defined() ? beta.impl() : nullptr;
  return make_result(
      "group_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xi, gmi, bti, xhat = std::move(xhat), rstd = std::move(rstd), n, c, groups, spatial, cpg,
       count](const TensorImpl& o) {
        const auto& gy = o.grad;
        if (gmi && gmi->requires_grad) {
          auto& gg = gmi->grad_buffer();
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < spatial; ++i) {
                const std::size_t at = sz((b * c + ch) * spatial + i);
                s += gy[at] * xhat[at];
              }
            gg[sz(ch)] += s;
          }
        }
        if (bti && bti->requires_grad) {
          auto& gb = bti->grad_buffer();
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < spatial; ++i) s += gy[sz((b * c + ch) * spatial + i)];
            gb[sz(ch)] += s;
          }
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          std::vector<double> dxhat(sz(count));
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t gi = 0; gi < groups; ++gi) {
              const std::int64_t base = (b * c + gi * cpg) * spatial;
              double m1 = 0.0, m2 = 0.0;
              for (std::int64_t i = 0; i < count; ++i) {
                const std::int64_t ch = gi * cpg + i / spatial;
                const double d = gy[sz(base + i)] * (gmi ? gmi->data[sz(ch)] : 1.0);
                dxhat[sz(i)] = d;
                m1 += d;
                m2 += d * xhat[sz(base + i)];
              }
              m1 /= static_cast<double>(count);
              m2 /= static_cast<double>(count);
              const double r = rstd[sz(b * groups + gi)];
              for (std::int64_t i = 0; i < count; ++i)
                gx[sz(base + i)] += r * (dxhat[sz(i)] - m1 - xhat[sz(base + i)] * m2);
            }
        }
      });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  axis = normalize_axis(axis, parts[0].ndim(), first);
  Shape out_shape = first;
  out_shape[sz(axis)] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != static_cast<int>(first.size()))
      throw DimensionError("concat rank mismatch: " + to_string(first) + " vs " + to_string(p.shape()));
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != sz(axis) && p.shape()[i] != first[i])
        throw DimensionError("concat shape mismatch: " + to_string(first) + " vs " + to_string(p.shape()));
    out_shape[sz(axis)] += p.shape()[sz(axis)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[sz(i)];
  for (std::size_t i = sz(axis) + 1; i < first.size(); ++i) inner *= first[i];
  const std::int64_t out_row = out_shape[sz(axis)] * inner;
  std::vector<double> out(sz(numel(out_shape)));
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t w = p.shape()[sz(axis)] * inner;
    const auto pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + o * w, w, out.begin() + o * out_row + offset);
    widths.push_back(w);
    offset += w;
  }
  std::vector<Impl> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result("concat", std::move(out_shape), std::move(out),
                     std::vector<Tensor>(parts.begin(), parts.end()),
                     [impls, widths, outer, out_row](const TensorImpl& o) {
                       std::int64_t off = 0;
                       for (std::size_t k = 0; k < impls.size(); ++k) {
                         const std::int64_t w = widths[k];
                         if (impls[k]->requires_grad) {
                           auto& g = impls[k]->grad_buffer();
                           for (std::int64_t q = 0; q < outer; ++q)
                             for (std::int64_t i = 0; i < w; ++i)
                               g[sz(q * w + i)] += o.grad[sz(q * out_row + off + i)];
                         }
                         off += w;
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

std::vector<Tensor> split(const Tensor& x, int axis, std::span<const std::int64_t> sizes) {
  const Shape& shape = x.shape();
  axis = normalize_axis(axis, x.ndim(), shape);
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != shape[sz(axis)])
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(shape[sz(axis)]) + " in " + to_string(shape));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[sz(i)];
  for (std::size_t i = sz(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::int64_t row = shape[sz(axis)] * inner;
  std::vector<Tensor> out;
  std::int64_t offset = 0;
  const auto xd = x.data();
  Impl xi = x.impl();
  for (std::int64_t s : sizes) {
    if (s <= 0) throw DimensionError("split sizes must be positive");
    const std::int64_t w = s * inner;
    Shape piece = shape;
    piece[sz(axis)] = s;
    std::vector<double> values(sz(outer * w));
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(xd.begin() + o * row + offset, w, values.begin() + o * w);
    out.push_back(make_result("split", std::move(piece), std::move(values), {x},
                              [xi, outer, row, offset, w](const TensorImpl& o) {
                                auto& g = xi->grad_buffer();
                                for (std::int64_t q = 0; q < outer; ++q)
                                  for (std::int64_t i = 0; i < w; ++i)
                                    g[sz(q * row + offset + i)] += o.grad[sz(q * w + i)];
                              }));
    offset += w;
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, std::initializer_list<std::int64_t> sizes) {
  return split(x, axis, std::span<const std::int64_t>(sizes.begin(), sizes.size()));
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices) {
  check_rank(table, 2, "gather_rows");
  const std::int64_t rows = table.dim(0), cols = table.dim(1);
  const auto n = static_cast<std::int64_t>(indices.size());
  if (n == 0) throw DimensionError("gather_rows with no indices");
  std::vector<double> out(sz(n * cols));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t r = indices[sz(i)];
    if (r < 0 || r >= rows) throw DimensionError("gather_rows index " + std::to_string(r) + " out of range");
    std::copy_n(table.data().begin() + r * cols, cols, out.begin() + i * cols);
  }
  Impl ti = table.impl();
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_result("gather_rows", {n, cols}, std::move(out), {table}, [ti, idx, cols](const TensorImpl& o) {
    auto& g = ti->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::int64_t c = 0; c < cols; ++c) g[sz(idx[i] * cols + c)] += o.grad[i * sz(cols) + sz(c)];
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  check_rank(x, 4, "upsample_nearest2x");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto xd = x.data();
  std::vector<double> out(sz(planes * 4 * h * w));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx)
        out[sz((p * 2 * h + y) * 2 * w + xx)] = xd[sz((p * h + y / 2) * w + xx / 2)];
  Impl xi = x.impl();
  return make_result("upsample", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                     [xi, planes, h, w](const TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t p = 0; p < planes; ++p)
                         for (std::int64_t y = 0; y < h; ++y)
                           for (std::int64_t xx = 0; xx < w; ++xx) {
                             const auto at = [&](std::int64_t dy, std::int64_t dx) {
                               return o.grad[sz((p * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx)];
                             };
                             g[sz((p * h + y) * w + xx)] += at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1);
                           }
                     });
}

Tensor avg_pool2x(const Tensor& x) {
  check_rank(x, 4, "avg_pool2x");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw DimensionError("avg_pool2x needs even H, W: " + to_string(x.shape()));
  const std::int64_t oh = h / 2, ow = w / 2;
  const auto xd = x.data();
  std::vector<double> out(sz(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const auto at = [&](std::int64_t dy, std::int64_t dx) {
          return xd[sz((p * h + 2 * y + dy) * w + 2 * xx + dx)];
        };
        out[sz((p * oh + y) * ow + xx)] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
      }
  Impl xi = x.impl();
  return make_result("avg_pool", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                     [xi, planes, h, w, oh, ow](const TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::int64_t p = 0; p < planes; ++p)
                         for (std::int64_t y = 0; y < oh; ++y)
                           for (std::int64_t xx = 0; xx < ow; ++xx) {
                             const double v = 0.25 * o.grad[sz((p * oh + y) * ow + xx)];
                             for (std::int64_t dy = 0; dy < 2; ++dy)
                               for (std::int64_t dx = 0; dx < 2; ++dx)
                                 g[sz((p * h + 2 * y + dy) * w + 2 * xx + dx)] += v;
                           }
                     });
}

}  // namespace helix::ad
