#include "helix/checks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>

#include "helix/attention.hpp"
#include "helix/checkpoint.hpp"
#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/gradcheck.hpp"
#include "helix/image_io.hpp"
#include "helix/ops.hpp"

namespace helix::checks {

using ad::Tensor;
using namespace helix::attention;

std::string CheckResult::line() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6e", metric);
  return std::string(pass ? "PASS " : "FAIL ") + name + " " + buf;
}

namespace {

Tensor randn(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor uniform(Rng& rng, ad::Shape shape, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor binary(Rng& rng, ad::Shape shape) {
  std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
  for (auto& x : v) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return Tensor::from(std::move(shape), std::move(v));
}

struct AttentionCase {
  std::int64_t b, c, d, hw;
  int heads;
  DomainFeatures df;
};

AttentionCase random_case(Rng& rng) {
  AttentionCase k;
  k.heads = rng.uniform() < 0.5 ? 1 : 2;
  k.c = k.heads * (1 + static_cast<std::int64_t>(rng.uniform_int(3)));
  k.d = k.heads * (1 + static_cast<std::int64_t>(rng.uniform_int(3)));
  k.hw = 2 + static_cast<std::int64_t>(rng.uniform_int(8));
  k.b = 1 + static_cast<std::int64_t>(rng.uniform_int(2));
  k.df = {randn(rng, {k.b, k.c, k.hw}), randn(rng, {k.b, k.c, k.hw}), randn(rng, {k.b, k.c, k.hw})};
  return k;
}

AttentionProjections random_proj(Rng& rng, const AttentionCase& k) {
  const double s = 1.0 / std::sqrt(static_cast<double>(k.c));
  return {randn(rng, {k.c, k.d}, s), randn(rng, {k.c, k.d}, s), randn(rng, {k.c, k.c}, s), k.heads};
}

backbone::PromptVocabulary check_vocab() {
  return backbone::PromptVocabulary::from_prompts({"blot on stripes", "slash on checker", "blot on grid"});
}

void randomize(backbone::HelixUNet& model, std::uint64_t seed, double spread) {
  Rng rng(seed);
  for (auto& p : model.parameters().all())
    for (auto& v : p.tensor.mutable_data()) v = rng.uniform(-spread, spread);
}

struct ModelInputs {
  diffusion::JointLatent z;
  diffusion::Conditioning cond;
  Tensor reference_t;
};

// Text embeddings are graph nodes over the embedding table, so anything that
// perturbs parameters must call this again rather than reuse old ones.
std::vector<TextEmbedding> embed_prompts(const backbone::HelixUNet& model, std::int64_t b) {
  const char* prompts[] = {"blot on stripes", "slash on checker", "blot on grid"};
  std::vector<TextEmbedding> out;
  for (std::int64_t i = 0; i < b; ++i) out.push_back(model.embed(prompts[i % 3]));
  return out;
}

ModelInputs random_inputs(const backbone::HelixUNet& model, std::int64_t b, std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t s = model.config().image_size;
  ModelInputs in;
  in.z.image = uniform(rng, {b, 3, s, s}, -1.0, 1.0);
  in.z.annot = uniform(rng, {b, 1, s, s}, -1.0, 1.0);
  for (std::int64_t i = 0; i < b; ++i) in.z.t.push_back(static_cast<int>(3 + 5 * i));
  in.cond.text = embed_prompts(model, b);
  in.cond.support = binary(rng, {b, 1, s, s});
  in.cond.reference = ad::mul(uniform(rng, {b, 3, s, s}, -1.0, 1.0), in.cond.support);
  in.cond.control = binary(rng, {b, 1, s, s});
  in.reference_t = uniform(rng, {b, 3, s, s}, -1.0, 1.0);
  return in;
}

}  // namespace

CheckResult dda_decoupling(int cases, std::uint64_t seed) {
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(i)));
    const auto k = random_case(rng);
    const auto pi = random_proj(rng, k), pa = random_proj(rng, k);
    const ZeroConv zeta{randn(rng, {k.c, k.c, 1, 1}), randn(rng, {k.c})};
    auto block = [&](const DomainFeatures& x) {
      return DomainFeatures{image_cross_attention(x, pi, zeta), annotation_self_attention(x, pa), Tensor()};
    };
    worst = std::max({worst, cross_jacobian_norm(block, Domain::annot, Domain::image, k.df),
                      cross_jacobian_norm(block, Domain::image, Domain::annot, k.df),
                      cross_jacobian_norm(block, Domain::ref, Domain::annot, k.df)});
  }
  return {"dda_cross_jacobian", worst == 0.0, worst};
}

std::vector<CheckResult> concat_entanglement(int cases, std::uint64_t seed) {
  double weakest = INFINITY, partition = 0.0;
  for (int i = 0; i < cases; ++i) {
    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto k = random_case(rng);
    k.heads = 1;
    const auto p = random_proj(rng, k);
    auto block = [&](const DomainFeatures& x) {
      auto r = concat_attention(x, p);
      return DomainFeatures{r.f_image, r.f_annot, Tensor()};
    };
    weakest = std::min({weakest, cross_jacobian_norm(block, Domain::annot, Domain::image, k.df),
                        cross_jacobian_norm(block, Domain::image, Domain::annot, k.df)});
    const auto r = concat_attention(k.df, p);
    for (const auto& [left, right] : {std::pair{&r.ii, &r.ia}, std::pair{&r.ai, &r.aa}})
      for (std::int64_t row = 0; row < k.b * k.hw; ++row) {
        double sum = 0.0;
        for (std::int64_t j = 0; j < k.hw; ++j) sum += left->at(row * k.hw + j) + right->at(row * k.hw + j);
        partition = std::max(partition, std::abs(sum - 1.0));
      }
  }
  return {{"concat_cross_jacobian", weakest > 1e-3, weakest}, {"concat_partition_of_unity", partition <= 1e-9, partition}};
}

std::vector<CheckResult> zero_init_reductions(int cases, std::uint64_t seed) {
  double cross = 0.0, fuse = 0.0;
  const auto cfg = backbone::BackboneConfig::micro();
  for (int i = 0; i < cases; ++i) {
    const auto case_seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(i));
    backbone::HelixUNet model(cfg, backbone::BlockPlacement::preset("default", cfg.depth), check_vocab(), case_seed);
    const auto& ps = model.parameters();
    Rng rng(Rng::derive_seed(case_seed, 1));
    const std::int64_t c = cfg.channels(0), hw = 1 + static_cast<std::int64_t>(rng.uniform_int(16)), b = 2;
    DomainFeatures df{randn(rng, {b, c, hw}), randn(rng, {b, c, hw}), randn(rng, {b, c, hw})};

    const AttentionProjections img{ps.get("enc.0.dda.img.wq"), ps.get("enc.0.dda.img.wk"), ps.get("enc.0.dda.img.wv"), cfg.heads};
    const ZeroConv zeta{ps.get("enc.0.dda.img.zeta.w"), ps.get("enc.0.dda.img.zeta.b")};
    const Tensor got = image_cross_attention(df, img, zeta);
    // Self-attention over the image stream alone: the annotation block with F^I in the annotation slot.
    const Tensor self = annotation_self_attention({Tensor(), df.f_image, Tensor()}, img);
    for (std::int64_t j = 0; j < got.numel(); ++j) cross = std::max(cross, std::abs(got.at(j) - self.at(j)));

    const SsmProjections proj{ps.get("enc.0.ssm.wq_img"), ps.get("enc.0.ssm.wq_ann"), ps.get("enc.0.ssm.wk_text"),
                              ps.get("enc.0.ssm.wv_text")};
    const SsmFusion eta{ps.get("enc.0.ssm.eta2.w"), ps.get("enc.0.ssm.eta2.b"), ps.get("enc.0.ssm.eta3.w"),
                        ps.get("enc.0.ssm.eta3.b")};
    const auto text = model.embed(i % 2 ? "blot on grid" : "slash on checker");
    const auto [si, sa] = semantic_score_maps(df, text, proj);
    const auto sc = rasterize_control(binary(rng, {b, hw}), text.n_tokens());
    for (const ScoreMap* control : {static_cast<const ScoreMap*>(nullptr), &sc}) {
      const auto r = ssm_fuse(df, si, sa, control, eta, text, proj);
      const double k = control ? 3.0 : 2.0;
      for (std::int64_t j = 0; j < si.values.numel(); ++j) {
        const double mean = (si.values.at(j) + sa.values.at(j) + (control ? control->values.at(j) : 0.0)) / k;
        fuse = std::max({fuse, std::abs(r.s_image.values.at(j) - mean), std::abs(r.s_annot.values.at(j) - mean)});
      }
    }
  }
  return {{"zero_init_cross_attention", cross <= 1e-12, cross}, {"zero_init_ssm_fuse", fuse <= 1e-12, fuse}};
}

CheckResult ssm_value_purity(int cases, std::uint64_t seed) {
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(i)));
    const std::int64_t c = 3 + static_cast<std::int64_t>(rng.uniform_int(6)), d = 2 + static_cast<std::int64_t>(rng.uniform_int(4));
    const std::int64_t hw = 2 + static_cast<std::int64_t>(rng.uniform_int(10)), dt = 2 + static_cast<std::int64_t>(rng.uniform_int(4));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(c - 1)));
    DomainFeatures df{randn(rng, {1, c, hw}), randn(rng, {1, c, hw}), Tensor()};
    const SsmProjections proj{randn(rng, {c, d}), randn(rng, {c, d}), randn(rng, {dt, d}), randn(rng, {dt, c})};
    const SsmFusion eta{randn(rng, {2, 2, 1, 1}), randn(rng, {2}), randn(rng, {2, 3, 1, 1}), randn(rng, {2})};
    const TextEmbedding text{randn(rng, {n, dt}), "case"};
    const auto [si, sa] = semantic_score_maps(df, text, proj);
    const auto sc = rasterize_control(binary(rng, {1, hw}), n);
    const auto r = ssm_fuse(df, si, sa, i % 2 ? &sc : nullptr, eta, text, proj);

    // Columns of V = E_text W_v span the admissible updates.
    Eigen::MatrixXd basis(c, n);
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double v = 0.0;
        for (std::int64_t k = 0; k < dt; ++k) v += text.tokens.at(t * dt + k) * proj.wv_text.at(k * c + ch);
        basis(ch, t) = v;
      }
    const auto qr = basis.colPivHouseholderQr();
    for (const auto& [after, before] : {std::pair{&r.f_image, &df.f_image}, std::pair{&r.f_annot, &df.f_annot}})
      for (std::int64_t p = 0; p < hw; ++p) {
        Eigen::VectorXd y(c);
        for (std::int64_t ch = 0; ch < c; ++ch) y(ch) = after->at(ch * hw + p) - before->at(ch * hw + p);
        const Eigen::VectorXd coef = qr.solve(y);
        worst = std::max(worst, (basis * coef - y).norm());
      }
  }
  return {"ssm_value_purity", worst < 1e-9, worst};
}

CheckResult gradient_fidelity(int seeds, int coords_per_seed, std::uint64_t seed) {
  double worst = 0.0;
  const auto cfg = backbone::BackboneConfig::micro();
  for (int sidx = 0; sidx < seeds; ++sidx) {
    const auto run_seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(sidx));
    backbone::HelixUNet model(cfg, backbone::BlockPlacement::preset("default", cfg.depth), check_vocab(), run_seed);
    randomize(model, Rng::derive_seed(run_seed, 1), 0.4);
    const auto in = random_inputs(model, 2, Rng::derive_seed(run_seed, 2));
    const auto schedule = diffusion::make_linear_schedule(50, 1e-4, 0.02);
    const diffusion::JointLatent z0{in.z.image, in.z.annot, {}};
    Rng rng(Rng::derive_seed(run_seed, 3));
    const auto eps = diffusion::draw_noise(z0, rng);
    const std::vector<int> t{static_cast<int>(rng.uniform_int(50)), static_cast<int>(rng.uniform_int(50))};
    auto loss = [&] {
      auto cond = in.cond;
      cond.text = embed_prompts(model, 2);
      return diffusion::dh_loss(model, z0, t, eps, cond, schedule);
    };
    model.parameters().zero_grad();
    ad::backward(loss());
    auto& params = model.parameters().all();
    for (int k = 0; k < coords_per_seed; ++k) {
      auto& p = params[static_cast<std::size_t>(rng.uniform_int(params.size()))];
      const auto idx = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(p.tensor.numel())));
      const auto g = p.tensor.grad();
      const double analytic = g.empty() ? 0.0 : g[static_cast<std::size_t>(idx)];
      const double numeric = ad::finite_difference_at_5pt([&] { return loss().item(); }, p.tensor, idx, 1e-4);
      worst = std::max(worst, ad::relative_error(analytic, numeric, 1e-6));
    }
  }
  return {"gradient_fidelity", worst < 1e-4, worst};
}

std::vector<CheckResult> schedule_statistics(int draws, int T, double beta_start, double beta_end, std::uint64_t seed) {
  const auto s = diffusion::make_linear_schedule(T, beta_start, beta_end);
  diffusion::JointLatent z0;
  z0.image = Tensor::from({1, 3, 1, 1}, {0.7, -0.2, -0.9});
  z0.annot = Tensor::from({1, 1, 1, 1}, {1.0});
  z0.t = {0};
  std::vector<CheckResult> out;
  Rng rng(seed);
  for (int t : {1, T / 2, T - 1}) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    std::vector<double> sum(4, 0.0), sq(4, 0.0), target(4);
    for (int e = 0; e < 4; ++e) target[static_cast<std::size_t>(e)] = std::sqrt(ab) * (e < 3 ? z0.image.at(e) : z0.annot.at(0));
    for (int i = 0; i < draws; ++i) {
      const auto zt = diffusion::q_sample(z0, t, diffusion::draw_noise(z0, rng), s);
      for (int e = 0; e < 4; ++e) {
        const auto u = static_cast<std::size_t>(e);
        const double v = e < 3 ? zt.image.at(e) : zt.annot.at(0);
        sum[u] += v;
        sq[u] += (v - target[u]) * (v - target[u]);
      }
    }
    const double sigma = std::sqrt((1.0 - ab) / draws);
    double mean_z = 0.0, var_rel = 0.0;
    for (std::size_t e = 0; e < 4; ++e) {
      mean_z = std::max(mean_z, std::abs(sum[e] / draws - target[e]) / sigma);
      var_rel = std::max(var_rel, std::abs(sq[e] / draws - (1.0 - ab)) / (1.0 - ab));
    }
    const std::string suffix = "_t" + std::to_string(t);
    out.push_back({"q_sample_mean_sigmas" + suffix, mean_z < 3.0, mean_z});
    out.push_back({"q_sample_variance_rel" + suffix, var_rel < 0.05, var_rel});
  }

  const auto one = diffusion::make_linear_schedule(1, beta_start, beta_start);
  diffusion::JointLatent x0;
  x0.image = uniform(rng, {1, 3, 4, 4}, -1.0, 1.0);
  x0.annot = binary(rng, {1, 1, 4, 4});
  x0.t = {0};
  const auto eps = diffusion::draw_noise(x0, rng);
  const auto back = diffusion::reverse_step(diffusion::q_sample(x0, 0, eps, one), eps, 0, one, rng);
  double err = 0.0;
  for (std::int64_t i = 0; i < x0.image.numel(); ++i) err = std::max(err, std::abs(back.image.at(i) - x0.image.at(i)));
  for (std::int64_t i = 0; i < x0.annot.numel(); ++i) err = std::max(err, std::abs(back.annot.at(i) - x0.annot.at(i)));
  out.push_back({"single_step_inversion", err <= 1e-10, err});
  return out;
}

namespace {

int cell_of(int p, int n, int k) {
  int cell = 0;
  for (int i = 0; i < k; ++i)
    if (static_cast<long>(i) * n / k <= p) cell = i;
  return cell;
}

// Count of grid cells and upsampled pixels where the raw mask disagrees with a per-pixel scan.
int raw_mask_mismatches(const data::BinaryMask& m, int k) {
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(k * k), 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) grid[static_cast<std::size_t>(cell_of(y, m.height, k) * k + cell_of(x, m.width, k))] = 1;
  const auto raw = data::compute_raw_mask(m, k);
  int bad = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) bad += raw.grid[i] != grid[i];
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      bad += raw.upsampled.at(y, x) != grid[static_cast<std::size_t>(cell_of(y, m.height, k) * k + cell_of(x, m.width, k))];
  return bad;
}

}  // namespace

CheckResult raw_mask_oracle(int cases, std::uint64_t seed) {
  Rng rng(seed);
  int bad = 0;
  for (int i = 0; i < cases; ++i) {
    const int w = 3 + static_cast<int>(rng.uniform_int(46)), h = 3 + static_cast<int>(rng.uniform_int(46));
    const int k = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min(w, h))));
    const double density = rng.uniform(0.0, 0.1);
    data::BinaryMask m{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h))};
    for (auto& p : m.pixels) p = rng.uniform() < density ? 1 : 0;
    bad += raw_mask_mismatches(m, k);
  }
  // One pixel, including a non-divisible size: exactly one active cell.
  for (const auto& [size, y, x] : {std::tuple{20, 0, 0}, std::tuple{17, 16, 16}, std::tuple{23, 11, 5}}) {
    data::BinaryMask m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size), 0)};
    m.pixels[static_cast<std::size_t>(y * size + x)] = 1;
    const auto raw = data::compute_raw_mask(m, 5);
    bad += std::abs(static_cast<int>(std::count(raw.grid.begin(), raw.grid.end(), 1)) - 1);
    bad += raw_mask_mismatches(m, 5);
  }
  return {"raw_mask_oracle", bad == 0, static_cast<double>(bad)};
}

CheckResult backbone_decoupling(const backbone::BackboneConfig& cfg, std::uint64_t seed) {
  auto placement = backbone::BlockPlacement::preset("default", cfg.depth);
  placement.ssm_encoder.clear();
  placement.ssm_decoder.clear();
  auto model_cfg = cfg;
  model_cfg.vocab_size = static_cast<int>(check_vocab().size());
  backbone::HelixUNet model(model_cfg, placement, check_vocab(), seed);
  randomize(model, Rng::derive_seed(seed, 1), 0.3);
  const auto in = random_inputs(model, 2, Rng::derive_seed(seed, 2));

  double diff = 0.0, grad = 0.0;
  {
    ad::NoGradGuard no_grad;
    const auto base = model.predict(in.z, in.cond, in.reference_t);
    Rng rng(Rng::derive_seed(seed, 3));
    auto moved = in;
    moved.z.image = ad::add(in.z.image, uniform(rng, in.z.image.shape(), -0.5, 0.5));
    moved.reference_t = ad::add(in.reference_t, uniform(rng, in.reference_t.shape(), -0.5, 0.5));
    const auto after = model.predict(moved.z, moved.cond, moved.reference_t);
    for (std::int64_t i = 0; i < base.annot.numel(); ++i) diff = std::max(diff, std::abs(base.annot.at(i) - after.annot.at(i)));
  }
  auto g = in;
  g.z.image = in.z.image.clone();
  g.z.image.set_requires_grad(true);
  g.reference_t = in.reference_t.clone();
  g.reference_t.set_requires_grad(true);
  const auto out = model.predict(g.z, g.cond, g.reference_t);
  Rng rng(Rng::derive_seed(seed, 4));
  ad::backward(ad::sum(ad::mul(out.annot, uniform(rng, out.annot.shape(), -1.0, 1.0))));
  for (const Tensor* t : {&g.z.image, &g.reference_t})
    for (double v : t->grad()) grad += v * v;
  const double metric = std::max(diff, std::sqrt(grad));
  return {"backbone_decoupling", metric == 0.0, metric};
}

CheckResult io_round_trip(std::uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  io::RgbImage img{7, 5, {}};
  for (int i = 0; i < 7 * 5 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(rng.uniform_int(256)));
  io::GrayImage gray{6, 9, {}};
  for (int i = 0; i < 54; ++i) gray.pixels.push_back(static_cast<std::uint8_t>(rng.uniform_int(256)));
  const auto ppm = io::encode_ppm(img);
  const auto pgm = io::encode_pgm(gray);
  failures += io::encode_ppm(io::parse_ppm(ppm)) != ppm;
  failures += io::encode_pgm(io::parse_pgm(pgm)) != pgm;

  backbone::HelixUNet model(backbone::BackboneConfig::micro(), backbone::BlockPlacement::preset("default", 2), check_vocab(), seed);
  const auto bytes = ckpt::encode(ckpt::snapshot(model.parameters(), "seed = 1\n"));
  failures += ckpt::encode(ckpt::decode(bytes)) != bytes;
  for (int trial = 0; trial < 8; ++trial) {
    auto bad = bytes;
    bad[static_cast<std::size_t>(rng.uniform_int(bad.size()))] ^= static_cast<std::uint8_t>(1 + rng.uniform_int(255));
    try {
      ckpt::decode(bad);
      ++failures;
    } catch (const CorruptCheckpoint&) {
    }
  }
  failures += ckpt::encode(ckpt::decode(ckpt::encode({}))) != ckpt::encode({});
  return {"io_round_trip", failures == 0, static_cast<double>(failures)};
}

std::vector<CheckResult> invariant_suite(const SuiteOptions& o) {
  std::vector<CheckResult> out;
  auto add = [&](std::vector<CheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
  out.push_back(gradient_fidelity(1, 10, Rng::derive_seed(o.seed, 1)));
  out.push_back(dda_decoupling(5, Rng::derive_seed(o.seed, 2)));
  out.push_back(backbone_decoupling(o.backbone, Rng::derive_seed(o.seed, 3)));
  add(concat_entanglement(5, Rng::derive_seed(o.seed, 4)));
  add(zero_init_reductions(3, Rng::derive_seed(o.seed, 5)));
  out.push_back(ssm_value_purity(5, Rng::derive_seed(o.seed, 6)));
  add(schedule_statistics(10000, o.T, o.beta_start, o.beta_end, Rng::derive_seed(o.seed, 7)));
  out.push_back(raw_mask_oracle(50, Rng::derive_seed(o.seed, 8)));
  out.push_back(io_round_trip(Rng::derive_seed(o.seed, 9)));
  return out;
}

}  // namespace helix::checks
