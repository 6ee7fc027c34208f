#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "helix/diffusion.hpp"
#include "helix/image_io.hpp"

namespace helix::data {

using io::GrayImage;
using io::RgbImage;

/// Pixels in {0, 1}.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
  std::size_t count() const;
};

/// Thresholds at 128: v >= 128 -> 1.
BinaryMask mask_from_gray(const GrayImage& gray);
/// {0, 1} -> {0, 255}.
GrayImage mask_to_gray(const BinaryMask& mask);

/// K x K cell grid. Cell (i, j) spans rows [floor(i h / K), floor((i + 1) h / K))
/// and columns [floor(j w / K), floor((j + 1) w / K)).
struct RawMask {
  int k = 0;
  std::vector<std::uint8_t> grid;  // k * k, row-major
  BinaryMask upsampled;

  bool active(int i, int j) const { return grid[static_cast<std::size_t>(i * k + j)] != 0; }
};

/// A cell is active when it holds at least one anomalous pixel and at least
/// `min_fraction` of its area is anomalous.
RawMask compute_raw_mask(const BinaryMask& mask, int k, double min_fraction = 0.0);

/// Image with every pixel outside the active cells zeroed.
RgbImage crop_reference(const RgbImage& image, const RawMask& raw);

struct SamplePair {
  RgbImage image;
  BinaryMask mask;
  RawMask raw;
  RgbImage reference;
  std::string prompt;
  std::string category;
  std::string anomaly_type;
  std::filesystem::path source;
};

SamplePair make_sample(RgbImage image, BinaryMask mask, int k, double min_fraction, std::string category,
                       std::string anomaly_type, std::string prompt);

/// Nearest-neighbour resize to size x size, uint8 v -> 2 v / 255 - 1, as [1, 3, size, size].
ad::Tensor image_to_tensor(const RgbImage& image, int size);
/// Nearest-neighbour resize; {0, 1} -> {-1, +1} when `signed_range`, else kept as {0, 1}.
ad::Tensor mask_to_tensor(const BinaryMask& mask, int size, bool signed_range);

/// z0 = (image, annotation) at t = 0, batch 1.
diffusion::JointLatent assemble_latent(const SamplePair& sample, int size);

/// Image plane: clamp to [-1, 1], round(255 (v + 1) / 2) half away from zero.
/// Annotation plane: v > 0 -> 1. Reads batch item `index`.
std::pair<RgbImage, BinaryMask> decode_outputs(const ad::Tensor& image, const ad::Tensor& annot, std::int64_t index = 0);

struct DatasetOptions {
  int k = 5;
  double min_fraction = 0.0;
};

struct Dataset {
  std::vector<SamplePair> samples;    // sorted by source path
  std::vector<std::string> skipped;   // "SKIP <path> <reason>"

  std::vector<std::string> prompts() const;  // one per sample
};

/// Reads root/<category>/<anomaly_type>/NNN.ppm with NNN_mask.pgm and an
/// optional prompt.txt per anomaly type (default "<category> <anomaly_type>").
/// Unpaired files are reported in `skipped`; unreadable files throw.
Dataset load_dataset(const std::filesystem::path& root, const DatasetOptions& opts = {});

struct FixtureOptions {
  int size = 32;
  int min_area = 12;   // defect pixels, inclusive
  int max_area = 120;  // inclusive
};

/// Procedural textures (stripes / checker / grid) with blot or slash defects
/// and their exact masks. Deterministic per seed. Returns the written paths.
std::vector<std::filesystem::path> make_synthetic_fixtures(const std::filesystem::path& root, std::uint64_t seed, int n,
                                                           const FixtureOptions& opts = {});

}  // namespace helix::data
