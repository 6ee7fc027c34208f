#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "helix/backbone.hpp"
#include "helix/checks.hpp"
#include "helix/run_config.hpp"

namespace helix::cli {

/// Keeps glibc from returning large activation buffers to the kernel after
/// every step, which otherwise dominates training time in page faults. No-op
/// on other C libraries. Call once at program start.
void tune_allocator();

/// Stream indices passed to Rng::derive_seed(config.seed, ...).
enum class Stream : std::uint64_t { init = 0, train = 1, generate = 2 };

/// Model described by a config; the vocabulary must already be filled in.
std::unique_ptr<backbone::HelixUNet> build_model(const RunConfig& cfg);

struct LoadedModel {
  RunConfig config;  // as stored in the checkpoint
  std::unique_ptr<backbone::HelixUNet> model;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct TrainResult {
  std::vector<double> losses;  // one per step
  RunConfig config;            // with the vocabulary resolved
  std::filesystem::path checkpoint;
};

/// Adam on the joint noise-prediction loss. Writes <out_dir>/loss.csv and the
/// checkpoint (plus <stem>_stepN<ext> every save_every steps). Throws
/// ValidationError on an empty dataset and TrainingError on a non-finite loss.
TrainResult cmd_train(const RunConfig& cfg, std::ostream& log);

struct GenerateOptions {
  std::string prompt;  // empty: each reference's own prompt
  std::optional<std::filesystem::path> control_mask;
  std::optional<std::filesystem::path> reference;       // instead of a dataset reference
  std::optional<std::filesystem::path> reference_mask;  // support of --reference; whole image if absent
  int n = 1;
};

/// Samples n image/mask pairs from cfg.checkpoint into cfg.out_dir as
/// gen_NNN.ppm and gen_NNN_mask.pgm. The architecture comes from the
/// checkpoint; seed, dataset and out_dir come from `cfg`.
std::vector<std::filesystem::path> cmd_generate(const RunConfig& cfg, const GenerateOptions& opts, std::ostream& log);

/// Runs the invariant suite, prints one line per check, returns the failure count.
int cmd_check(const RunConfig& cfg, std::ostream& out, bool ungrouped_debug = false);

}  // namespace helix::cli
