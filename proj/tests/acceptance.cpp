// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,5,9] [--expect-fail 7] [--work DIR] [--seed N]
//
// Exit status counts failures that were not listed in --expect-fail. Listed
// criteria still print their true PASS/FAIL line.

#include <CLI11.hpp>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "helix/checkpoint.hpp"
#include "helix/checks.hpp"
#include "helix/commands.hpp"
#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/image_io.hpp"

namespace fs = std::filesystem;
using namespace helix;

namespace {

// Pinned thresholds.
constexpr double kCrossJacobianMax = 0.0;
constexpr double kEntangledMin = 1e-3;
constexpr double kPartitionTol = 1e-9;
constexpr double kZeroInitTol = 1e-12;
constexpr double kPurityTol = 1e-9;
constexpr double kGradRelTol = 1e-4;
constexpr double kMeanSigmas = 3.0;
constexpr double kVarianceRel = 0.05;
constexpr double kInversionTol = 1e-10;
constexpr double kOverfitLoss = 0.05;
constexpr double kOverfitMse = 0.05;
constexpr double kOverfitIou = 0.9;
constexpr double kDecouplingSeconds = 10.0;
constexpr double kGradientSeconds = 60.0;
constexpr double kOverfitSeconds = 15.0 * 60.0;

// Case counts.
constexpr int kRandomConfigs = 20;
constexpr int kGradSeeds = 5;
constexpr int kGradCoords = 20;
constexpr int kQSampleDraws = 10000;
constexpr int kMaskCases = 200;
constexpr int kOverfitSamples = 8;
constexpr int kOverfitSteps = 2000;
constexpr int kAblationSteps = 50;
constexpr int kLossWindow = 100;  // "final loss" is the mean of the last steps

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double metric_of(const std::vector<checks::CheckResult>& rs, const std::string& name) {
  for (const auto& r : rs)
    if (r.name == name) return r.metric;
  throw std::runtime_error("missing check result " + name);
}

struct Context {
  std::uint64_t seed = 1;
  fs::path work;

  fs::path fixtures() const {
    const auto root = work / "fixtures";
    if (!fs::exists(root)) data::make_synthetic_fixtures(root, seed, kOverfitSamples);
    return root;
  }

  cli::RunConfig config(const std::string& name) const {
    cli::RunConfig c;
    c.seed = seed;
    c.dataset = fixtures().string();
    c.out_dir = (work / name).string();
    c.checkpoint = (work / name / "model.dhdf").string();
    return c;
  }
};

Outcome decoupling(const Context& ctx) {
  Stopwatch sw;
  const auto r = checks::dda_decoupling(kRandomConfigs, ctx.seed);
  const double t = sw.seconds();
  return {r.metric <= kCrossJacobianMax && t < kDecouplingSeconds,
          "max_cross_jacobian=" + fmt("%.3e", r.metric) + " time=" + fmt("%.2fs", t)};
}

Outcome entanglement(const Context& ctx) {
  const auto rs = checks::concat_entanglement(kRandomConfigs, ctx.seed);
  const double cross = metric_of(rs, "concat_cross_jacobian");
  const double unity = metric_of(rs, "concat_partition_of_unity");
  return {cross > kEntangledMin && unity <= kPartitionTol,
          "min_cross_jacobian=" + fmt("%.3e", cross) + " row_sum_error=" + fmt("%.3e", unity)};
}

Outcome zero_init(const Context& ctx) {
  const auto rs = checks::zero_init_reductions(kRandomConfigs, ctx.seed);
  const double attn = metric_of(rs, "zero_init_cross_attention");
  const double fuse = metric_of(rs, "zero_init_ssm_fuse");
  return {attn <= kZeroInitTol && fuse <= kZeroInitTol,
          "cross_attention=" + fmt("%.3e", attn) + " ssm_fuse=" + fmt("%.3e", fuse)};
}

Outcome purity(const Context& ctx) {
  const auto r = checks::ssm_value_purity(kRandomConfigs, ctx.seed);
  return {r.metric < kPurityTol, "max_residual=" + fmt("%.3e", r.metric)};
}

Outcome gradients(const Context& ctx) {
  Stopwatch sw;
  const auto r = checks::gradient_fidelity(kGradSeeds, kGradCoords, ctx.seed);
  const double t = sw.seconds();
  return {r.metric < kGradRelTol && t < kGradientSeconds,
          "max_rel_error=" + fmt("%.3e", r.metric) + " time=" + fmt("%.2fs", t)};
}

Outcome schedule(const Context& ctx) {
  const cli::RunConfig c;
  const auto rs = checks::schedule_statistics(kQSampleDraws, c.T, c.beta_start, c.beta_end, ctx.seed);
  double sigmas = 0.0, var = 0.0, inversion = 0.0;
  for (const auto& r : rs) {
    if (r.name.starts_with("q_sample_mean_sigmas")) sigmas = std::max(sigmas, r.metric);
    if (r.name.starts_with("q_sample_variance_rel")) var = std::max(var, r.metric);
    if (r.name == "single_step_inversion") inversion = r.metric;
  }
  return {sigmas < kMeanSigmas && var < kVarianceRel && inversion <= kInversionTol,
          "max_mean_sigmas=" + fmt("%.3f", sigmas) + " max_variance_rel=" + fmt("%.4f", var) +
              " inversion=" + fmt("%.3e", inversion)};
}

double mse01(const io::RgbImage& a, const io::RgbImage& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = (a.pixels[i] - b.pixels[i]) / 255.0;
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

// Both masks empty counts as a perfect match.
double iou(const data::BinaryMask& a, const data::BinaryMask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    inter += a.pixels[i] && b.pixels[i];
    uni += a.pixels[i] || b.pixels[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Outcome overfit(const Context& ctx) {
  Stopwatch sw;
  auto cfg = ctx.config("overfit");
  cfg.steps = kOverfitSteps;
  std::ostringstream log;
  const auto trained = cli::cmd_train(cfg, log);
  const auto& losses = trained.losses;
  const auto window = std::min<std::size_t>(kLossWindow, losses.size());
  double final_loss = 0.0;
  for (std::size_t i = losses.size() - window; i < losses.size(); ++i) final_loss += losses[i];
  final_loss /= static_cast<double>(window);

  // Moving average of the loss after step 200 should not rise.
  double worst_rise = 0.0;
  for (std::size_t end = 200 + kLossWindow; end < losses.size(); end += kLossWindow) {
    double prev = 0.0, next = 0.0;
    for (std::size_t i = end - 2 * kLossWindow; i < end - kLossWindow; ++i) prev += losses[i];
    for (std::size_t i = end - kLossWindow; i < end; ++i) next += losses[i];
    worst_rise = std::max(worst_rise, (next - prev) / kLossWindow);
  }

  // One sample per training pair, each conditioned on that pair as reference.
  cli::GenerateOptions g;
  g.n = kOverfitSamples;
  const auto files = cli::cmd_generate(cfg, g, log);
  const auto ds = data::load_dataset(cfg.dataset, {cfg.K, cfg.min_fraction});
  double best_mse = INFINITY, best_iou = 0.0;
  int reproduced = 0;
  for (int i = 0; i < g.n; ++i) {
    const auto img = io::read_ppm(files[static_cast<std::size_t>(2 * i)]);
    const auto mask = data::mask_from_gray(io::read_pgm(files[static_cast<std::size_t>(2 * i + 1)]));
    const auto& src = ds.samples[static_cast<std::size_t>(i) % ds.samples.size()];
    const auto z = data::assemble_latent(src, cfg.image_size);
    const auto [want_img, want_mask] = data::decode_outputs(z.image, z.annot);
    const double m = mse01(img, want_img), u = iou(mask, want_mask);
    best_mse = std::min(best_mse, m);
    best_iou = std::max(best_iou, u);
    reproduced += m < kOverfitMse && u > kOverfitIou;
  }
  const double t = sw.seconds();
  return {final_loss < kOverfitLoss && reproduced > 0 && t < kOverfitSeconds,
          "final_loss=" + fmt("%.4f", final_loss) + " last_step_loss=" + fmt("%.4f", losses.back()) +
              " reproduced=" + std::to_string(reproduced) + "/" + std::to_string(g.n) +
              " best_mse=" + fmt("%.4f", best_mse) + " best_iou=" + fmt("%.3f", best_iou) +
              " ma_max_rise=" + fmt("%.4f", worst_rise) + " time=" + fmt("%.0fs", t)};
}

Outcome masks(const Context& ctx) {
  const auto r = checks::raw_mask_oracle(kMaskCases, ctx.seed);
  return {r.pass && r.metric == 0.0, "mismatches=" + fmt("%.0f", r.metric)};
}

Outcome determinism(const Context& ctx) {
  std::vector<std::string> problems;
  std::ostringstream log;
  auto cfg = ctx.config("determinism");
  cfg.steps = 5;
  cli::GenerateOptions g;
  g.n = 2;
  auto run = [&] {
    cli::cmd_train(cfg, log);
    std::vector<std::vector<std::uint8_t>> out{io::read_bytes(fs::path(cfg.out_dir) / "loss.csv"),
                                               io::read_bytes(cfg.checkpoint)};
    for (const auto& f : cli::cmd_generate(cfg, g, log)) out.push_back(io::read_bytes(f));
    return out;
  };
  const auto first = run(), second = run();
  if (first != second) problems.push_back("rerun differs");

  const auto stored = io::read_bytes(cfg.checkpoint);
  auto loaded = cli::load_model(cfg.checkpoint);
  if (ckpt::encode(ckpt::snapshot(loaded.model->parameters(), loaded.config.to_text())) != stored)
    problems.push_back("save-load-save differs");

  int missed = 0;
  const std::size_t stride = std::max<std::size_t>(1, stored.size() / 64);
  for (std::size_t i = 0; i < stored.size(); i += stride) {
    auto bad = stored;
    bad[i] ^= 0x01;
    try {
      ckpt::decode(bad);
      ++missed;
    } catch (const CorruptCheckpoint&) {
    }
  }
  if (missed) problems.push_back(std::to_string(missed) + " corruptions undetected");
  std::string detail = "files_compared=" + std::to_string(first.size());
  for (const auto& p : problems) detail += " " + p;
  return {problems.empty(), detail};
}

Outcome ablation(const Context& ctx) {
  std::vector<std::int64_t> counts;
  std::string detail;
  bool finite = true;
  for (const char* preset : {"tab7-1", "tab7-2", "tab7-3", "tab7-4"}) {
    auto cfg = ctx.config(preset);
    cfg.preset = preset;
    cfg.steps = kAblationSteps;
    std::ostringstream log;
    const auto r = cli::cmd_train(cfg, log);
    for (double l : r.losses) finite = finite && std::isfinite(l);
    counts.push_back(cli::load_model(r.checkpoint).model->parameters().scalar_count());
    detail += std::string(detail.empty() ? "" : " ") + preset + "=" + std::to_string(counts.back());
  }
  // Strict relations implied by module inclusion between the rows.
  const bool ordered = counts[1] < counts[0] && counts[1] < counts[2] && counts[0] < counts[3] && counts[2] < counts[3];
  return {finite && ordered, detail + (ordered ? "" : " order-violated") + (finite ? "" : " non-finite-loss")};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  cli::tune_allocator();
  CLI::App app{"Acceptance criteria runner"};
  std::string only, expect_fail, work;
  std::uint64_t seed = 1;
  app.add_option("--only", only, "comma-separated criteria to run (default all)");
  app.add_option("--expect-fail", expect_fail, "criteria whose failure does not count against the exit status");
  app.add_option("--work", work, "scratch directory (default: a fresh temp dir, removed afterwards)");
  app.add_option("--seed", seed, "seed for every criterion");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.seed = seed;
  const bool own_work = work.empty();
  ctx.work = own_work ? fs::temp_directory_path() / ("helix_acceptance_" + std::to_string(::getpid())) : fs::path(work);
  fs::create_directories(ctx.work);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(const Context&)> run;
  };
  const std::vector<Criterion> all{
      {1, "dda_decoupling", decoupling},  {2, "concat_entanglement", entanglement},
      {3, "zero_init_reductions", zero_init}, {4, "ssm_value_purity", purity},
      {5, "gradient_fidelity", gradients}, {6, "diffusion_statistics", schedule},
      {7, "overfit_convergence", overfit}, {8, "raw_mask_exactness", masks},
      {9, "determinism_persistence", determinism}, {10, "ablation_presets", ablation}};
  const auto selected = parse_list(only);
  const auto expected = parse_list(expect_fail);

  int unexpected = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::string note;
    if (!o.pass && expected.count(c.id)) note = " [expected failure]";
    if (o.pass && expected.count(c.id)) note = " [listed as expected failure but passed]";
    if (!o.pass && !expected.count(c.id)) ++unexpected;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion_" << c.id << " " << c.name << " " << o.detail << note
              << std::endl;
  }
  if (own_work) fs::remove_all(ctx.work);
  return unexpected;
}
