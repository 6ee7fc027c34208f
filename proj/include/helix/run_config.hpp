#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "helix/backbone.hpp"
#include "helix/diffusion.hpp"

namespace helix::cli {

/// Every knob of a run. Defaults are desk scale: 32x32 images, T = 50 and
/// batch 4, where full-scale training used far larger images and batch 32.
struct RunConfig {
  std::uint64_t seed = 1;
  int image_size = 32;
  int K = 5;
  int T = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double lr = 1e-4;
  int batch = 4;
  int steps = 2000;
  int save_every = 0;  // 0: only the final checkpoint
  std::string preset = "default";
  std::string dataset = "fixtures";
  std::string checkpoint = "checkpoint.dhdf";
  std::string out_dir = ".";
  int base_channels = 16;
  int depth = 4;
  std::vector<int> channel_mult{1, 2, 2, 2};
  int heads = 1;
  int d_text = 16;
  double min_fraction = 0.0;
  double control_rate = 0.5;  // share of training items that also see their mask as control
  std::vector<std::string> vocabulary;  // empty: built from the dataset prompts

  /// Throws ConfigError naming the first offending key.
  void validate() const;
  /// Flat `key = value` lines in a fixed key order; parse_config(to_text()) round-trips.
  std::string to_text() const;
  backbone::BackboneConfig backbone(int vocab_size) const;
  backbone::BlockPlacement placement() const;
  diffusion::NoiseSchedule schedule() const;
};

/// Sets one key from its text form. Unknown keys and unparsable values are ConfigErrors.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

/// Parses `key = value` lines over `base`. Blank lines and `#` comments are
/// ignored; a repeated key keeps the last value.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace helix::cli
