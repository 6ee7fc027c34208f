#include "helix/commands.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "helix/checkpoint.hpp"
#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/image_io.hpp"
#include "helix/ops.hpp"

namespace helix::cli {

namespace fs = std::filesystem;
using ad::Tensor;

namespace {

std::uint64_t stream_seed(const RunConfig& cfg, Stream s) {
  return Rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
}

std::string shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Conditioning tensors of one dataset sample at the model resolution.
struct Prepared {
  Tensor image, annot, reference, support;
  std::string prompt;
};

Prepared prepare(const data::SamplePair& s, int size) {
  Prepared p;
  const auto z = data::assemble_latent(s, size);
  p.image = z.image;
  p.annot = z.annot;
  p.support = data::mask_to_tensor(s.raw.upsampled, size, false);
  p.reference = ad::mul(data::image_to_tensor(s.reference, size), p.support);
  p.prompt = s.prompt;
  return p;
}

data::Dataset load_nonempty(const RunConfig& cfg, std::ostream& log) {
  auto ds = data::load_dataset(cfg.dataset, {cfg.K, cfg.min_fraction});
  for (const auto& line : ds.skipped) log << line << "\n";
  if (ds.samples.empty()) throw ValidationError("dataset " + cfg.dataset + " has no image/mask pairs");
  return ds;
}

fs::path step_checkpoint(const fs::path& final_path, int step) {
  auto p = final_path;
  p.replace_filename(final_path.stem().string() + "_step" + std::to_string(step) + final_path.extension().string());
  return p;
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

std::unique_ptr<backbone::HelixUNet> build_model(const RunConfig& cfg) {
  cfg.validate();
  auto vocab = backbone::PromptVocabulary::from_tokens(cfg.vocabulary);
  return std::make_unique<backbone::HelixUNet>(cfg.backbone(static_cast<int>(vocab.size())), cfg.placement(),
                                               std::move(vocab), stream_seed(cfg, Stream::init));
}

LoadedModel load_model(const fs::path& checkpoint) {
  auto c = ckpt::load(checkpoint);
  LoadedModel out;
  out.config = parse_config(c.config_text);
  out.model = build_model(out.config);
  ckpt::restore(out.model->parameters(), c);
  return out;
}

TrainResult cmd_train(const RunConfig& base, std::ostream& log) {
  base.validate();
  const auto ds = load_nonempty(base, log);
  TrainResult result;
  result.config = base;
  if (result.config.vocabulary.empty()) {
    const auto vocab = backbone::PromptVocabulary::from_prompts(ds.prompts());
    result.config.vocabulary.assign(vocab.tokens().begin() + 1, vocab.tokens().end());
  }
  const RunConfig& cfg = result.config;
  auto model = build_model(cfg);
  const auto schedule = cfg.schedule();
  const std::string config_text = cfg.to_text();

  std::vector<Prepared> items;
  for (const auto& s : ds.samples) items.push_back(prepare(s, cfg.image_size));
  const Tensor no_control = Tensor::zeros({1, 1, cfg.image_size, cfg.image_size});

  fs::create_directories(cfg.out_dir);
  const fs::path csv_path = fs::path(cfg.out_dir) / "loss.csv";
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw UsageError("cannot write " + csv_path.string());
  csv << "step,loss\n";
  result.checkpoint = cfg.checkpoint;
  if (result.checkpoint.has_parent_path()) fs::create_directories(result.checkpoint.parent_path());

  log << "train: " << ds.samples.size() << " samples, " << model->parameters().scalar_count() << " parameters, preset "
      << cfg.preset << "\n";
  Adam adam(model->parameters(), {cfg.lr, 0.9, 0.999, 1e-8});
  Rng rng(stream_seed(cfg, Stream::train));
  const auto b = static_cast<std::size_t>(cfg.batch);
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<Tensor> image(b), annot(b), reference(b), support(b), control(b);
    diffusion::Conditioning cond;
    std::vector<int> t(b);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& it = items[static_cast<std::size_t>(rng.uniform_int(items.size()))];
      image[i] = it.image;
      annot[i] = it.annot;
      reference[i] = it.reference;
      support[i] = it.support;
      cond.text.push_back(model->embed(it.prompt));
    }
    for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.T)));
    for (std::size_t i = 0; i < b; ++i) control[i] = rng.uniform() < cfg.control_rate ? support[i] : no_control;
    const diffusion::JointLatent z0{ad::concat(image, 0), ad::concat(annot, 0), t};
    cond.reference = ad::concat(reference, 0);
    cond.support = ad::concat(support, 0);
    cond.control = ad::concat(control, 0);
    const auto eps = diffusion::draw_noise(z0, rng);

    const Tensor loss = diffusion::dh_loss(*model, z0, t, eps, cond, schedule);
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("loss is " + shortest(value) + " at step " + std::to_string(step));
    ad::backward(loss);
    adam.step();
    model->parameters().zero_grad();

    result.losses.push_back(value);
    csv << step << "," << shortest(value) << "\n";
    if (step % 50 == 0 || step == cfg.steps) log << "step " << step << " loss " << shortest(value) << std::endl;
    if (cfg.save_every > 0 && step % cfg.save_every == 0 && step != cfg.steps)
      ckpt::save(step_checkpoint(result.checkpoint, step), ckpt::snapshot(model->parameters(), config_text));
  }
  csv.close();
  if (!csv) throw UsageError("failed writing " + csv_path.string());
  ckpt::save(result.checkpoint, ckpt::snapshot(model->parameters(), config_text));
  log << "wrote " << result.checkpoint.string() << "\n";
  return result;
}

std::vector<fs::path> cmd_generate(const RunConfig& cfg, const GenerateOptions& opts, std::ostream& log) {
  if (opts.n < 0) throw ConfigError("n must not be negative");
  auto loaded = load_model(cfg.checkpoint);
  const RunConfig& arch = loaded.config;
  const auto& model = *loaded.model;
  const int size = arch.image_size;
  const auto schedule = arch.schedule();

  std::vector<Prepared> refs;
  if (opts.reference) {
    if (opts.prompt.empty()) throw UsageError("--reference needs a --prompt");
    const auto img = io::read_ppm(*opts.reference);
    data::BinaryMask support{img.width, img.height, std::vector<std::uint8_t>(static_cast<std::size_t>(img.width * img.height), 1)};
    if (opts.reference_mask) support = data::mask_from_gray(io::read_pgm(*opts.reference_mask));
    if (support.width != img.width || support.height != img.height)
      throw ValidationError("reference mask dimensions differ from the reference image");
    auto s = data::make_sample(img, support, arch.K, arch.min_fraction, "", "", opts.prompt);
    refs.push_back(prepare(s, size));
  } else if (opts.n > 0) {
    const auto ds = load_nonempty(cfg, log);
    const auto tokens = backbone::PromptVocabulary::tokenize(opts.prompt);
    for (const auto& s : ds.samples) {
      const bool match = opts.prompt.empty() ||
                         std::find(tokens.begin(), tokens.end(), backbone::PromptVocabulary::tokenize(s.category).front()) != tokens.end();
      if (match) refs.push_back(prepare(s, size));
    }
    if (refs.empty()) throw ValidationError("no dataset category appears in prompt '" + opts.prompt + "'; pass --reference");
  }
  diffusion::Conditioning base;
  if (opts.control_mask) {
    const auto m = data::mask_from_gray(io::read_pgm(*opts.control_mask));
    base.control = data::mask_to_tensor(m, size, false);
  }

  fs::create_directories(cfg.out_dir);
  std::vector<fs::path> written;
  ad::NoGradGuard no_grad;
  for (int i = 0; i < opts.n; ++i) {
    const auto& ref = refs[static_cast<std::size_t>(i) % refs.size()];
    auto cond = base;
    cond.reference = ref.reference;
    cond.support = ref.support;
    cond.text = {model.embed(opts.prompt.empty() ? ref.prompt : opts.prompt)};
    Rng rng(Rng::derive_seed(stream_seed(cfg, Stream::generate), static_cast<std::uint64_t>(i)));
    const auto out = diffusion::sample(model, cond, 1, size, schedule, rng);
    const auto [img, mask] = data::decode_outputs(out.image, out.annot);
    char name[32];
    std::snprintf(name, sizeof name, "gen_%03d", i);
    const fs::path dir(cfg.out_dir);
    io::write_ppm(dir / (std::string(name) + ".ppm"), img);
    io::write_pgm(dir / (std::string(name) + "_mask.pgm"), data::mask_to_gray(mask));
    written.push_back(dir / (std::string(name) + ".ppm"));
    written.push_back(dir / (std::string(name) + "_mask.pgm"));
    log << "wrote " << written.back().string() << "\n";
  }
  return written;
}

int cmd_check(const RunConfig& cfg, std::ostream& out, bool ungrouped_debug) {
  cfg.validate();
  checks::SuiteOptions o;
  o.seed = cfg.seed;
  o.backbone = cfg.backbone(1);
  o.backbone.ungrouped_debug = ungrouped_debug;
  o.T = cfg.T;
  o.beta_start = cfg.beta_start;
  o.beta_end = cfg.beta_end;
  int failures = 0;
  for (const auto& r : checks::invariant_suite(o)) {
    out << r.line() << std::endl;
    failures += !r.pass;
  }
  return failures;
}

}  // namespace helix::cli
