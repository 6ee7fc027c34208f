#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "helix/attention.hpp"
#include "helix/errors.hpp"
#include "helix/ops.hpp"
#include "helix/rng.hpp"

using namespace helix;
using namespace helix::attention;
using ad::Tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Tensor randn(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

Mat to_mat(const Tensor& t, std::int64_t rows, std::int64_t cols, std::int64_t offset = 0) {
  Mat m(static_cast<std::size_t>(rows), std::vector<double>(static_cast<std::size_t>(cols)));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = t.at(offset + i * cols + j);
  return m;
}

// Token rows of batch item `b` from a [B, c, hw] tensor.
Mat tokens_of(const Tensor& f, std::int64_t b) {
  const std::int64_t c = f.dim(1), hw = f.dim(2);
  Mat m(static_cast<std::size_t>(hw), std::vector<double>(static_cast<std::size_t>(c)));
  for (std::int64_t p = 0; p < hw; ++p)
    for (std::int64_t ch = 0; ch < c; ++ch) m[static_cast<std::size_t>(p)][static_cast<std::size_t>(ch)] = f.at((b * c + ch) * hw + p);
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t p = 0; p < b.size(); ++p) c[i][j] += a[i][p] * b[p][j];
  return c;
}

Mat softmax_rows_naive(Mat s, double scale) {
  for (auto& row : s) {
    double mx = -INFINITY, total = 0.0;
    for (double& v : row) mx = std::max(mx, v * scale);
    for (double& v : row) total += (v = std::exp(v * scale - mx));
    for (double& v : row) v /= total;
  }
  return s;
}

Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

// Residual single-head attention, computed with plain loops.
Mat naive_attention(const Mat& xq, const Mat& xkv, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& residual) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(wq[0].size()));
  Mat p = softmax_rows_naive(mat_mul(mat_mul(xq, wq), transpose(mat_mul(xkv, wk))), scale);
  Mat out = mat_mul(p, mat_mul(xkv, wv));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[0].size(); ++j) out[i][j] += residual[i][j];
  return out;
}

void expect_tokens_near(const Tensor& f, std::int64_t b, const Mat& expect, double tol) {
  Mat got = tokens_of(f, b);
  ASSERT_EQ(got.size(), expect.size());
  for (std::size_t i = 0; i < got.size(); ++i)
    for (std::size_t j = 0; j < got[0].size(); ++j) EXPECT_NEAR(got[i][j], expect[i][j], tol) << i << "," << j;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), static_cast<std::size_t>(a.numel()) * sizeof(double)) == 0;
}

AttentionProjections random_proj(Rng& rng, std::int64_t c, std::int64_t d) {
  return {randn(rng, {c, d}), randn(rng, {c, d}), randn(rng, {c, c})};
}

DomainFeatures random_features(Rng& rng, std::int64_t b, std::int64_t c, std::int64_t hw) {
  return {randn(rng, {b, c, hw}), randn(rng, {b, c, hw}), randn(rng, {b, c, hw})};
}

ZeroConv zero_conv(std::int64_t c) { return {Tensor::zeros({c, c, 1, 1}), Tensor::zeros({c})}; }

TEST(ConcatAttention, IdenticalDomainsGiveEqualBlocks) {
  Rng rng(1);
  auto f = randn(rng, {1, 3, 4});
  auto w = randn(rng, {3, 3});
  AttentionProjections p{w, w, w};
  auto r = concat_attention({f, f, Tensor()}, p);
  EXPECT_TRUE(bit_equal(r.ia, r.ii));
  EXPECT_TRUE(bit_equal(r.ai, r.aa));
}

TEST(ConcatAttention, OrthogonalTokensAndPartitionOfUnity) {
  // Image tokens e0, e1 and annotation tokens e2, e3 with identity weights and
  // a large temperature: every query attends to itself, cross blocks get tiny uniform mass.
  const double big = 20.0;
  std::vector<double> fa4(8, 0.0), fi4(8, 0.0);
  for (int k = 0; k < 2; ++k) {
    fi4[static_cast<std::size_t>(k * 2 + k)] = big;
    fa4[static_cast<std::size_t>((k + 2) * 2 + k)] = big;
  }
  auto eye = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  auto r = concat_attention({Tensor::from({1, 4, 2}, fi4), Tensor::from({1, 4, 2}, fa4), Tensor()}, {eye, eye, eye});
  for (int i = 0; i < 2; ++i) {
    EXPECT_GT(r.ii.at(i * 2 + i), 0.999);
    const double tiny = std::exp(-big * big / 2.0);  // off-self logit gap is big^2 / sqrt(4)
    EXPECT_NEAR(r.ia.at(i * 2 + 0) / tiny, 1.0, 1e-9);
    EXPECT_EQ(r.ia.at(i * 2 + 0), r.ia.at(i * 2 + 1));
    EXPECT_EQ(r.ai.at(i * 2 + 0), r.ai.at(i * 2 + 1));
    double row_i = 0.0, row_a = 0.0;
    for (int j = 0; j < 2; ++j) {
      row_i += r.ii.at(i * 2 + j) + r.ia.at(i * 2 + j);
      row_a += r.ai.at(i * 2 + j) + r.aa.at(i * 2 + j);
    }
    EXPECT_NEAR(row_i, 1.0, 1e-12);
    EXPECT_NEAR(row_a, 1.0, 1e-12);
  }
}

TEST(ConcatAttention, MatchesDenseOracle) {
  Rng rng(2);
  const std::int64_t c = 3, hw = 2;
  auto df = random_features(rng, 2, c, hw);
  auto p = random_proj(rng, c, c);
  auto r = concat_attention(df, p);
  for (std::int64_t b = 0; b < 2; ++b) {
    Mat x = tokens_of(df.f_image, b);
    Mat xa = tokens_of(df.f_annot, b);
    x.insert(x.end(), xa.begin(), xa.end());
    Mat out = naive_attention(x, x, to_mat(p.wq, c, c), to_mat(p.wk, c, c), to_mat(p.wv, c, c), x);
    expect_tokens_near(r.f_image, b, Mat(out.begin(), out.begin() + hw), 1e-12);
    expect_tokens_near(r.f_annot, b, Mat(out.begin() + hw, out.end()), 1e-12);
  }
}

TEST(ConcatAttention, ShapeMismatchIsDimensionError) {
  Rng rng(3);
  auto p = random_proj(rng, 2, 2);
  EXPECT_THROW(concat_attention({randn(rng, {1, 2, 3}), randn(rng, {1, 2, 4}), Tensor()}, p), DimensionError);
}

TEST(ImageCrossAttention, ZeroConvReducesToSelfAttention) {
  Rng rng(4);
  auto df = random_features(rng, 2, 4, 5);
  auto p = random_proj(rng, 4, 3);
  auto cross = image_cross_attention(df, p, zero_conv(4));
  auto self = annotation_self_attention({Tensor(), df.f_image, Tensor()}, p);
  double worst = 0.0;
  for (std::int64_t i = 0; i < cross.numel(); ++i) worst = std::max(worst, std::abs(cross.at(i) - self.at(i)));
  EXPECT_LE(worst, 1e-12);
}

TEST(ImageCrossAttention, IgnoresAnnotationStream) {
  Rng rng(5);
  auto df = random_features(rng, 1, 3, 4);
  auto p = random_proj(rng, 3, 3);
  ZeroConv z{randn(rng, {3, 3, 1, 1}), randn(rng, {3})};
  auto a = image_cross_attention(df, p, z);
  df.f_annot = ad::add(df.f_annot, randn(rng, {1, 3, 4}));
  EXPECT_TRUE(bit_equal(a, image_cross_attention(df, p, z)));
}

TEST(ImageCrossAttention, MatchesOracleWithNonzeroConv) {
  Rng rng(6);
  const std::int64_t c = 2, hw = 3;
  auto df = random_features(rng, 1, c, hw);
  auto p = random_proj(rng, c, c);
  ZeroConv z{randn(rng, {c, c, 1, 1}), randn(rng, {c})};
  auto out = image_cross_attention(df, p, z);
  Mat fi = tokens_of(df.f_image, 0), fr = tokens_of(df.f_ref, 0);
  Mat kv = fi;
  for (std::int64_t t = 0; t < hw; ++t)
    for (std::int64_t o = 0; o < c; ++o) {
      double acc = z.bias.at(o);
      for (std::int64_t i = 0; i < c; ++i) acc += z.weight.at(o * c + i) * fr[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
      kv[static_cast<std::size_t>(t)][static_cast<std::size_t>(o)] += acc;
    }
  expect_tokens_near(out, 0, naive_attention(fi, kv, to_mat(p.wq, c, c), to_mat(p.wk, c, c), to_mat(p.wv, c, c), fi), 1e-12);
}

TEST(ImageCrossAttention, MissingReferenceIsUsageError) {
  Rng rng(7);
  auto df = random_features(rng, 1, 2, 2);
  df.f_ref = Tensor();
  EXPECT_THROW(image_cross_attention(df, random_proj(rng, 2, 2), zero_conv(2)), UsageError);
}

TEST(AnnotationSelfAttention, SingleTokenAddsValue) {
  Rng rng(8);
  auto df = random_features(rng, 1, 3, 1);
  auto p = random_proj(rng, 3, 2);
  auto out = annotation_self_attention(df, p);
  for (std::int64_t o = 0; o < 3; ++o) {
    double v = 0.0;
    for (std::int64_t i = 0; i < 3; ++i) v += df.f_annot.at(i) * p.wv.at(i * 3 + o);
    EXPECT_NEAR(out.at(o), v + df.f_annot.at(o), 1e-14);
  }
}

TEST(AnnotationSelfAttention, IgnoresImageAndReference) {
  Rng rng(9);
  auto df = random_features(rng, 2, 3, 4);
  auto p = random_proj(rng, 3, 3);
  auto a = annotation_self_attention(df, p);
  df.f_image = randn(rng, {2, 3, 4});
  df.f_ref = randn(rng, {2, 3, 4});
  EXPECT_TRUE(bit_equal(a, annotation_self_attention(df, p)));
}

TEST(AnnotationSelfAttention, MatchesOracle) {
  Rng rng(10);
  const std::int64_t c = 3, hw = 4;
  auto df = random_features(rng, 1, c, hw);
  auto p = random_proj(rng, c, 2);
  Mat fa = tokens_of(df.f_annot, 0);
  expect_tokens_near(annotation_self_attention(df, p), 0,
                     naive_attention(fa, fa, to_mat(p.wq, c, 2), to_mat(p.wk, c, 2), to_mat(p.wv, c, c), fa), 1e-12);
}

TEST(AnnotationSelfAttention, MultiHeadMatchesPerHeadOracle) {
  Rng rng(11);
  const std::int64_t c = 4, hw = 3;
  auto df = random_features(rng, 1, c, hw);
  auto p = random_proj(rng, c, 4);
  p.heads = 2;
  auto out = annotation_self_attention(df, p);
  Mat fa = tokens_of(df.f_annot, 0);
  Mat zero(static_cast<std::size_t>(hw), std::vector<double>(2, 0.0));
  Mat wq = to_mat(p.wq, c, 4), wk = to_mat(p.wk, c, 4), wv = to_mat(p.wv, c, 4);
  auto cols = [](const Mat& m, std::size_t lo) {
    Mat r(m.size(), std::vector<double>(2));
    for (std::size_t i = 0; i < m.size(); ++i) r[i] = {m[i][lo], m[i][lo + 1]};
    return r;
  };
  for (std::size_t h = 0; h < 2; ++h) {
    Mat o = naive_attention(fa, fa, cols(wq, 2 * h), cols(wk, 2 * h), cols(wv, 2 * h), zero);
    for (std::int64_t t = 0; t < hw; ++t)
      for (std::size_t j = 0; j < 2; ++j) {
        const auto ch = static_cast<std::int64_t>(2 * h + j);
        EXPECT_NEAR(out.at(ch * hw + t), o[static_cast<std::size_t>(t)][j] + fa[static_cast<std::size_t>(t)][static_cast<std::size_t>(ch)], 1e-12);
      }
  }
}

SsmProjections random_ssm(Rng& rng, std::int64_t c, std::int64_t d, std::int64_t dt) {
  return {randn(rng, {c, d}), randn(rng, {c, d}), randn(rng, {dt, d}), randn(rng, {dt, c})};
}

SsmFusion zero_fusion() {
  return {Tensor::zeros({2, 2, 1, 1}), Tensor::zeros({2}), Tensor::zeros({2, 3, 1, 1}), Tensor::zeros({2})};
}

TEST(SemanticScoreMaps, SingleTokenIsAllOnes) {
  Rng rng(12);
  auto df = random_features(rng, 2, 3, 5);
  auto [si, sa] = semantic_score_maps(df, {randn(rng, {1, 4}), "x"}, random_ssm(rng, 3, 2, 4));
  for (double v : si.values.data()) EXPECT_EQ(v, 1.0);
  for (double v : sa.values.data()) EXPECT_EQ(v, 1.0);
}

TEST(SemanticScoreMaps, SymmetricInputsGiveEqualMaps) {
  Rng rng(13);
  auto f = randn(rng, {1, 3, 4});
  auto p = random_ssm(rng, 3, 2, 5);
  p.wq_annot = p.wq_image;
  auto [si, sa] = semantic_score_maps({f, f, Tensor()}, {randn(rng, {3, 5}), "a b c"}, p);
  EXPECT_TRUE(bit_equal(si.values, sa.values));
}

TEST(SemanticScoreMaps, MatchesOracle) {
  Rng rng(14);
  const std::int64_t c = 3, d = 2, dt = 4, hw = 2;
  auto df = random_features(rng, 1, c, hw);
  auto p = random_ssm(rng, c, d, dt);
  TextEmbedding text{randn(rng, {2, dt}), "a b"};
  auto [si, sa] = semantic_score_maps(df, text, p);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat k = mat_mul(to_mat(text.tokens, 2, dt), to_mat(p.wk_text, dt, d));
  Mat ei = softmax_rows_naive(mat_mul(mat_mul(tokens_of(df.f_image, 0), to_mat(p.wq_image, c, d)), transpose(k)), scale);
  Mat ea = softmax_rows_naive(mat_mul(mat_mul(tokens_of(df.f_annot, 0), to_mat(p.wq_annot, c, d)), transpose(k)), scale);
  for (std::int64_t i = 0; i < hw; ++i)
    for (std::int64_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(si.values.at(i * 2 + j), ei[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
      EXPECT_NEAR(sa.values.at(i * 2 + j), ea[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
    }
  EXPECT_TRUE(si.normalized);
}

TEST(RasterizeControl, AllOnes) {
  auto s = rasterize_control(Tensor::full({1, 4}, 1.0), 2);
  for (double v : s.values.data()) EXPECT_EQ(v, 0.5);
  EXPECT_FALSE(s.normalized);
}

TEST(RasterizeControl, AllZeros) {
  auto s = rasterize_control(Tensor::zeros({2, 4}), 3);
  for (double v : s.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(RasterizeControl, CheckerboardRows) {
  auto s = rasterize_control(Tensor::from({1, 4}, {1, 0, 0, 1}), 3);
  for (int p = 0; p < 4; ++p)
    for (int j = 0; j < 3; ++j) EXPECT_EQ(s.values.at(p * 3 + j), (p == 0 || p == 3) ? 1.0 / 3.0 : 0.0);
}

TEST(RasterizeControl, NonBinaryIsValidationError) {
  EXPECT_THROW(rasterize_control(Tensor::from({1, 2}, {1, 0.5}), 2), ValidationError);
}

TEST(SsmFuse, ZeroFusionIsMeanOfMaps) {
  Rng rng(15);
  auto df = random_features(rng, 1, 3, 4);
  auto p = random_ssm(rng, 3, 2, 5);
  TextEmbedding text{randn(rng, {3, 5}), "a b c"};
  auto [si, sa] = semantic_score_maps(df, text, p);
  auto r = ssm_fuse(df, si, sa, nullptr, zero_fusion(), text, p);
  for (std::int64_t i = 0; i < si.values.numel(); ++i) {
    const double mean = 0.5 * (si.values.at(i) + sa.values.at(i));
    EXPECT_NEAR(r.s_image.values.at(i), mean, 1e-12);
    EXPECT_NEAR(r.s_annot.values.at(i), mean, 1e-12);
  }
  for (std::int64_t row = 0; row < 4; ++row) {
    double total = 0.0;
    for (std::int64_t j = 0; j < 3; ++j) total += r.s_image.values.at(row * 3 + j);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(SsmFuse, ControlMapRaisesActiveRowMass) {
  Rng rng(16);
  auto df = random_features(rng, 1, 2, 4);
  auto p = random_ssm(rng, 2, 2, 3);
  TextEmbedding text{randn(rng, {2, 3}), "a b"};
  ScoreMap uniform{Tensor::full({1, 4, 2}, 0.5), true};
  auto control = rasterize_control(Tensor::from({1, 4}, {1, 0, 1, 0}), 2);
  auto r = ssm_fuse(df, uniform, uniform, &control, zero_fusion(), text, p);
  auto mass = [&](std::int64_t row) { return r.s_image.values.at(row * 2) + r.s_image.values.at(row * 2 + 1); };
  EXPECT_GT(mass(0), mass(1));
  EXPECT_GT(mass(2), mass(3));
  EXPECT_GT(mass(0), mass(3));
}

TEST(SsmFuse, MatchesStackConvMeanOracle) {
  Rng rng(17);
  const std::int64_t c = 2, hw = 3, n = 2, dt = 3;
  auto df = random_features(rng, 1, c, hw);
  auto p = random_ssm(rng, c, 2, dt);
  TextEmbedding text{randn(rng, {n, dt}), "a b"};
  SsmFusion eta{randn(rng, {2, 2, 1, 1}), randn(rng, {2}), randn(rng, {2, 3, 1, 1}), randn(rng, {2})};
  ScoreMap si{randn(rng, {1, hw, n}), false}, sa{randn(rng, {1, hw, n}), false}, so{randn(rng, {1, hw, n}), false};
  for (bool with_control : {false, true}) {
    auto r = ssm_fuse(df, si, sa, with_control ? &so : nullptr, eta, text, p);
    const int k = with_control ? 3 : 2;
    const Tensor& w = with_control ? eta.w3 : eta.w2;
    const Tensor& bias = with_control ? eta.b3 : eta.b2;
    Mat v = mat_mul(to_mat(text.tokens, n, dt), to_mat(p.wv_text, dt, c));
    for (int out = 0; out < 2; ++out) {
      Mat fused(static_cast<std::size_t>(hw), std::vector<double>(static_cast<std::size_t>(n)));
      for (std::int64_t i = 0; i < hw * n; ++i) {
        const double maps[3] = {si.values.at(i), sa.values.at(i), so.values.at(i)};
        double conv = bias.at(out), mean = 0.0;
        for (int m = 0; m < k; ++m) {
          conv += w.at(out * k + m) * maps[m];
          mean += maps[m];
        }
        fused[static_cast<std::size_t>(i / n)][static_cast<std::size_t>(i % n)] = conv + mean / k;
        EXPECT_NEAR((out == 0 ? r.s_image : r.s_annot).values.at(i), conv + mean / k, 1e-12);
      }
      Mat proj = mat_mul(fused, v);
      const Tensor& feat = out == 0 ? df.f_image : df.f_annot;
      Mat expect = tokens_of(feat, 0);
      for (std::size_t t = 0; t < expect.size(); ++t)
        for (std::size_t ch = 0; ch < expect[0].size(); ++ch) expect[t][ch] += proj[t][ch];
      expect_tokens_near(out == 0 ? r.f_image : r.f_annot, 0, expect, 1e-12);
    }
  }
}

TEST(SsmFuse, MixedShapesAreDimensionErrors) {
  Rng rng(18);
  auto df = random_features(rng, 1, 2, 4);
  auto p = random_ssm(rng, 2, 2, 3);
  TextEmbedding text{randn(rng, {2, 3}), "a b"};
  ScoreMap a{Tensor::full({1, 4, 2}, 0.5)}, b{Tensor::full({1, 3, 2}, 0.5)};
  EXPECT_THROW(ssm_fuse(df, a, b, nullptr, zero_fusion(), text, p), DimensionError);
}

TEST(SsmFuse, OutputsLieInTextValueSpan) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t c = 6, hw = 5, n = 1 + trial % 4, dt = 4;
    auto df = random_features(rng, 1, c, hw);
    auto p = random_ssm(rng, c, 3, dt);
    TextEmbedding text{randn(rng, {n, dt}), "t"};
    SsmFusion eta{randn(rng, {2, 2, 1, 1}), randn(rng, {2}), randn(rng, {2, 3, 1, 1}), randn(rng, {2})};
    auto [si, sa] = semantic_score_maps(df, text, p);
    auto r = ssm_fuse(df, si, sa, nullptr, eta, text, p);
    Mat v = mat_mul(to_mat(text.tokens, n, dt), to_mat(p.wv_text, dt, c));
    Eigen::MatrixXd basis(c, n);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j) basis(j, i) = v[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    auto qr = basis.colPivHouseholderQr();
    for (const auto* pair : {&r.f_image, &r.f_annot}) {
      const Tensor& before = pair == &r.f_image ? df.f_image : df.f_annot;
      for (std::int64_t t = 0; t < hw; ++t) {
        Eigen::VectorXd y(c);
        for (std::int64_t ch = 0; ch < c; ++ch) y(ch) = pair->at(ch * hw + t) - before.at(ch * hw + t);
        Eigen::VectorXd coef = qr.solve(y);
        EXPECT_LT((basis * coef - y).norm(), 1e-9);
      }
    }
  }
}

std::function<DomainFeatures(const DomainFeatures&)> dda_block(const AttentionProjections& pi, const AttentionProjections& pa,
                                                               const ZeroConv& z) {
  return [=](const DomainFeatures& df) {
    return DomainFeatures{image_cross_attention(df, pi, z), annotation_self_attention(df, pa), Tensor()};
  };
}

TEST(CrossJacobian, DecoupledBranchesAreExactlyZero) {
  Rng rng(20);
  auto df = random_features(rng, 1, 3, 4);
  auto pi = random_proj(rng, 3, 3), pa = random_proj(rng, 3, 3);
  ZeroConv z{randn(rng, {3, 3, 1, 1}), randn(rng, {3})};
  auto block = dda_block(pi, pa, z);
  EXPECT_EQ(cross_jacobian_norm(block, Domain::annot, Domain::image, df), 0.0);
  EXPECT_EQ(cross_jacobian_norm(block, Domain::image, Domain::annot, df), 0.0);
  EXPECT_EQ(cross_jacobian_norm(block, Domain::ref, Domain::annot, df), 0.0);
  EXPECT_GT(cross_jacobian_norm(block, Domain::ref, Domain::image, df), 1e-3);
}

TEST(CrossJacobian, ConcatAttentionLeaks) {
  Rng rng(21);
  auto df = random_features(rng, 1, 3, 4);
  auto p = random_proj(rng, 3, 3);
  auto block = [&](const DomainFeatures& x) {
    auto r = concat_attention(x, p);
    return DomainFeatures{r.f_image, r.f_annot, Tensor()};
  };
  EXPECT_GT(cross_jacobian_norm(block, Domain::annot, Domain::image, df), 1e-3);
  EXPECT_GT(cross_jacobian_norm(block, Domain::image, Domain::annot, df), 1e-3);
}

TEST(CrossJacobian, LinearMapMatchesFrobeniusNorm) {
  // y = A x: the directional probes estimate ||A||_F and the gradient term is ||A^T 1||.
  Rng rng(22);
  auto a = randn(rng, {4, 4});
  auto block = [&](const DomainFeatures& x) {
    return DomainFeatures{ad::reshape(ad::matmul(a, ad::reshape(x.f_annot, {4, 1})), {1, 4, 1}), x.f_annot, Tensor()};
  };
  DomainFeatures df{randn(rng, {1, 4, 1}), randn(rng, {1, 4, 1}), Tensor()};
  double fro = 0.0, colsum = 0.0;
  for (double v : a.data()) fro += v * v;
  for (int j = 0; j < 4; ++j) {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += a.at(i * 4 + j);
    colsum += s * s;
  }
  const double got = cross_jacobian_norm(block, Domain::annot, Domain::image, df);
  EXPECT_GE(got, std::sqrt(colsum) - 1e-9);
  EXPECT_GT(got, 0.4 * std::sqrt(fro));
  EXPECT_LT(got, 2.0 * std::max(std::sqrt(fro), std::sqrt(colsum)));
}

}  // namespace
