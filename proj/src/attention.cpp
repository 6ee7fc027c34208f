#include "helix/attention.hpp"

#include <cmath>

#include "helix/errors.hpp"
#include "helix/ops.hpp"
#include "helix/rng.hpp"

namespace helix::attention {

using ad::Tensor;

double AttentionProjections::scale() const {
  return 1.0 / std::sqrt(static_cast<double>(d()) / static_cast<double>(heads));
}

Tensor to_tokens(const Tensor& features) { return ad::transpose_last2(features); }
Tensor from_tokens(const Tensor& tokens) { return ad::transpose_last2(tokens); }

namespace {

void check_features(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 3) throw DimensionError(std::string(what) + " must be [b, c, hw]");
}

void check_pair(const DomainFeatures& df) {
  check_features(df.f_image, "f_image");
  check_features(df.f_annot, "f_annot");
  if (df.f_image.shape() != df.f_annot.shape())
    throw DimensionError("f_image " + ad::to_string(df.f_image.shape()) + " and f_annot " +
                         ad::to_string(df.f_annot.shape()) + " differ");
}

// softmax(q k^T * scale) v, split into heads along the projection columns.
Tensor attend(const Tensor& xq, const Tensor& xkv, const AttentionProjections& p) {
  const int heads = p.heads;
  if (heads < 1 || p.d() % heads != 0 || p.wv.dim(1) % heads != 0)
    throw ConfigError("attention heads must divide the projection widths");
  const double s = p.scale();
  if (heads == 1) {
    Tensor q = ad::linear(xq, p.wq), k = ad::linear(xkv, p.wk), v = ad::linear(xkv, p.wv);
    return ad::attention(q, k, v, s);
  }
  const std::vector<std::int64_t> qk(static_cast<std::size_t>(heads), p.d() / heads);
  const std::vector<std::int64_t> vv(static_cast<std::size_t>(heads), p.wv.dim(1) / heads);
  auto wq = ad::split(p.wq, 1, qk), wk = ad::split(p.wk, 1, qk), wv = ad::split(p.wv, 1, vv);
  std::vector<Tensor> outs;
  for (int h = 0; h < heads; ++h) {
    const auto i = static_cast<std::size_t>(h);
    Tensor q = ad::linear(xq, wq[i]), k = ad::linear(xkv, wk[i]), v = ad::linear(xkv, wv[i]);
    outs.push_back(ad::attention(q, k, v, s));
  }
  return ad::concat(outs, 2);
}

Tensor apply_zero_conv(const Tensor& f, const ZeroConv& z) {
  const std::int64_t b = f.dim(0), c = f.dim(1), hw = f.dim(2);
  Tensor w = ad::reshape(z.weight, {z.weight.dim(0), z.weight.dim(1), 1, 1});
  return ad::reshape(ad::conv2d(ad::reshape(f, {b, c, hw, 1}), w, z.bias, 1, 0, 1), {b, z.weight.dim(0), hw});
}

}  // namespace

ConcatAttentionResult concat_attention(const DomainFeatures& df, const AttentionProjections& proj) {
  check_pair(df);
  const std::int64_t hw = df.f_image.dim(2);
  const double s = proj.scale();
  Tensor x = ad::concat({to_tokens(df.f_image), to_tokens(df.f_annot)}, 1);  // [b, 2hw, c]
  Tensor q = ad::linear(x, proj.wq), k = ad::linear(x, proj.wk), v = ad::linear(x, proj.wv);
  Tensor scores = ad::softmax(ad::batched_matmul(q, k, true), -1, s);  // [b, 2hw, 2hw]
  Tensor out = ad::batched_matmul(scores, v);
  auto rows = ad::split(out, 1, {hw, hw});
  ConcatAttentionResult r;
  r.f_image = ad::add(df.f_image, from_tokens(rows[0]));
  r.f_annot = ad::add(df.f_annot, from_tokens(rows[1]));
  auto row_blocks = ad::split(scores, 1, {hw, hw});
  auto top = ad::split(row_blocks[0], 2, {hw, hw});
  auto bottom = ad::split(row_blocks[1], 2, {hw, hw});
  r.ii = top[0];
  r.ia = top[1];
  r.ai = bottom[0];
  r.aa = bottom[1];
  return r;
}

Tensor image_cross_attention(const DomainFeatures& df, const AttentionProjections& proj, const ZeroConv& zeta) {
  check_features(df.f_image, "f_image");
  if (!df.f_ref.defined()) throw UsageError("image_cross_attention requires a reference feature");
  if (df.f_ref.shape() != df.f_image.shape())
    throw DimensionError("f_ref " + ad::to_string(df.f_ref.shape()) + " does not match f_image " +
                         ad::to_string(df.f_image.shape()));
  Tensor kv = ad::add(apply_zero_conv(df.f_ref, zeta), df.f_image);
  return ad::add(df.f_image, from_tokens(attend(to_tokens(df.f_image), to_tokens(kv), proj)));
}

Tensor annotation_self_attention(const DomainFeatures& df, const AttentionProjections& proj) {
  check_features(df.f_annot, "f_annot");
  Tensor x = to_tokens(df.f_annot);
  return ad::add(df.f_annot, from_tokens(attend(x, x, proj)));
}

std::pair<ScoreMap, ScoreMap> semantic_score_maps(const DomainFeatures& df, const TextEmbedding& text,
                                                  const SsmProjections& proj) {
  check_pair(df);
  if (!text.tokens.defined() || text.tokens.ndim() != 2)
    throw DimensionError("text embedding must be [n_tokens, d_text]");
  const std::int64_t b = df.f_image.dim(0), n = text.n_tokens(), d = proj.wq_image.dim(1);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor k = ad::linear(text.tokens, proj.wk_text);  // [n, d]
  Tensor kb = ad::reshape(k, {1, n, d});
  if (b > 1) {
    std::vector<Tensor> copies(static_cast<std::size_t>(b), kb);
    kb = ad::concat(copies, 0);
  }
  auto maps = [&](const Tensor& f, const Tensor& wq) {
    return ScoreMap{ad::softmax(ad::batched_matmul(ad::linear(to_tokens(f), wq), kb, true), -1, s), true};
  };
  return {maps(df.f_image, proj.wq_image), maps(df.f_annot, proj.wq_annot)};
}

ScoreMap rasterize_control(const Tensor& mask, std::int64_t n_tokens) {
  if (mask.ndim() != 2) throw DimensionError("control mask must be [b, hw], got " + ad::to_string(mask.shape()));
  if (n_tokens < 1) throw DimensionError("rasterize_control needs n_tokens >= 1");
  const std::int64_t b = mask.dim(0), hw = mask.dim(1);
  std::vector<double> out(static_cast<std::size_t>(b * hw * n_tokens));
  const double share = 1.0 / static_cast<double>(n_tokens);
  for (std::int64_t i = 0; i < b * hw; ++i) {
    const double m = mask.at(i);
    if (m != 0.0 && m != 1.0) throw ValidationError("control mask must be binary, found " + std::to_string(m));
    for (std::int64_t j = 0; j < n_tokens; ++j) out[static_cast<std::size_t>(i * n_tokens + j)] = m * share;
  }
  return {Tensor::from({b, hw, n_tokens}, std::move(out)), false};
}

SsmResult ssm_fuse(const DomainFeatures& df, const ScoreMap& s_image, const ScoreMap& s_annot,
                   const ScoreMap* s_control, const SsmFusion& eta, const TextEmbedding& text,
                   const SsmProjections& proj) {
  check_pair(df);
  const ad::Shape& shape = s_image.values.shape();
  if (shape.size() != 3 || s_annot.values.shape() != shape || (s_control && s_control->values.shape() != shape))
    throw DimensionError("score maps must share one [b, hw, n_tokens] shape");
  const std::int64_t b = shape[0], hw = shape[1], n = shape[2];
  if (df.f_image.dim(0) != b || df.f_image.dim(2) != hw || text.n_tokens() != n)
    throw DimensionError("score maps do not match features/text");
  std::vector<Tensor> stack{ad::reshape(s_image.values, {b, 1, hw, n}), ad::reshape(s_annot.values, {b, 1, hw, n})};
  if (s_control) stack.push_back(ad::reshape(s_control->values, {b, 1, hw, n}));
  const bool three = s_control != nullptr;
  Tensor stacked = ad::concat(stack, 1);
  Tensor mu = stack[0];
  for (std::size_t i = 1; i < stack.size(); ++i) mu = ad::add(mu, stack[i]);
  mu = ad::scale(mu, 1.0 / static_cast<double>(stack.size()));
  Tensor fused = ad::add(ad::conv2d(stacked, three ? eta.w3 : eta.w2, three ? eta.b3 : eta.b2, 1, 0, 1), mu);
  auto parts = ad::split(fused, 1, {1, 1});
  Tensor si = ad::reshape(parts[0], {b, hw, n}), sa = ad::reshape(parts[1], {b, hw, n});
  Tensor v = ad::linear(text.tokens, proj.wv_text);  // [n, c]
  auto project = [&](const Tensor& s) { return ad::linear(s, v); };
  SsmResult r;
  r.f_image = ad::add(df.f_image, from_tokens(project(si)));
  r.f_annot = ad::add(df.f_annot, from_tokens(project(sa)));
  r.s_image = {si, false};
  r.s_annot = {sa, false};
  return r;
}

namespace {

Tensor& select(DomainFeatures& df, Domain d) {
  return d == Domain::image ? df.f_image : d == Domain::annot ? df.f_annot : df.f_ref;
}

DomainFeatures detached(const DomainFeatures& df) {
  DomainFeatures out;
  if (df.f_image.defined()) out.f_image = df.f_image.clone();
  if (df.f_annot.defined()) out.f_annot = df.f_annot.clone();
  if (df.f_ref.defined()) out.f_ref = df.f_ref.clone();
  return out;
}

}  // namespace

double cross_jacobian_norm(const std::function<DomainFeatures(const DomainFeatures&)>& block, Domain input,
                           Domain output, const DomainFeatures& probe, std::uint64_t seed) {
  DomainFeatures x = detached(probe);
  Tensor& in = select(x, input);
  if (!in.defined()) return 0.0;
  in.set_requires_grad(true);
  double grad_norm = 0.0;
  {
    DomainFeatures y = block(x);
    Tensor out = select(y, output);
    if (out.defined() && out.requires_grad()) {
      ad::backward(ad::sum(out));
      for (double g : in.grad()) grad_norm += g * g;
      grad_norm = std::sqrt(grad_norm);
    }
  }
  in.set_requires_grad(false);
  ad::NoGradGuard no_grad;
  Rng rng(seed);
  const double h = 1e-6;
  const int probes = 16;
  double total = 0.0;
  for (int p = 0; p < probes; ++p) {
    std::vector<double> dir(static_cast<std::size_t>(in.numel()));
    for (auto& v : dir) v = rng.normal();
    DomainFeatures plus = detached(probe), minus = detached(probe);
    auto pp = select(plus, input).mutable_data(), mm = select(minus, input).mutable_data();
    for (std::size_t i = 0; i < dir.size(); ++i) {
      pp[i] += h * dir[i];
      mm[i] -= h * dir[i];
    }
    DomainFeatures yp = block(plus), ym = block(minus);
    const Tensor& op = select(yp, output);
    const Tensor& om = select(ym, output);
    if (!op.defined()) continue;
    double sq = 0.0;
    for (std::int64_t i = 0; i < op.numel(); ++i) {
      const double jv = (op.at(i) - om.at(i)) / (2.0 * h);
      sq += jv * jv;
    }
    total += sq;
  }
  return std::max(grad_norm, std::sqrt(total / probes));
}

}  // namespace helix::attention
