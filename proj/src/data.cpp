#include "helix/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "helix/errors.hpp"
#include "helix/rng.hpp"

namespace helix::data {

namespace fs = std::filesystem;
using ad::Tensor;

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

BinaryMask mask_from_gray(const GrayImage& gray) {
  BinaryMask m{gray.width, gray.height, std::vector<std::uint8_t>(gray.pixels.size())};
  std::transform(gray.pixels.begin(), gray.pixels.end(), m.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<std::uint8_t>(v >= 128 ? 1 : 0); });
  return m;
}

GrayImage mask_to_gray(const BinaryMask& mask) {
  GrayImage g{mask.width, mask.height, std::vector<std::uint8_t>(mask.pixels.size())};
  std::transform(mask.pixels.begin(), mask.pixels.end(), g.pixels.begin(),
                 [](std::uint8_t v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
  return g;
}

// ---------------------------------------------------------------------------
// Preprocessing

RawMask compute_raw_mask(const BinaryMask& mask, int k, double min_fraction) {
  if (mask.width < 1 || mask.height < 1) throw ValidationError("mask must be at least 1x1");
  if (k < 1 || k > std::min(mask.width, mask.height))
    throw ConfigError("raw mask grid K=" + std::to_string(k) + " outside [1, " +
                      std::to_string(std::min(mask.width, mask.height)) + "]");
  if (!(min_fraction >= 0.0 && min_fraction <= 1.0)) throw ConfigError("min_fraction must lie in [0, 1]");
  const int h = mask.height, w = mask.width;
  auto row_edge = [&](int i) { return static_cast<int>(static_cast<long>(i) * h / k); };
  auto col_edge = [&](int j) { return static_cast<int>(static_cast<long>(j) * w / k); };

  RawMask raw;
  raw.k = k;
  raw.grid.assign(static_cast<std::size_t>(k * k), 0);
  raw.upsampled = BinaryMask{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h), 0)};
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const int y0 = row_edge(i), y1 = row_edge(i + 1), x0 = col_edge(j), x1 = col_edge(j + 1);
      long hits = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) hits += mask.at(y, x);
      const long area = static_cast<long>(y1 - y0) * (x1 - x0);
      if (hits == 0 || static_cast<double>(hits) < min_fraction * static_cast<double>(area)) continue;
      raw.grid[static_cast<std::size_t>(i * k + j)] = 1;
      for (int y = y0; y < y1; ++y)
        std::fill_n(raw.upsampled.pixels.begin() + y * w + x0, x1 - x0, std::uint8_t{1});
    }
  return raw;
}

RgbImage crop_reference(const RgbImage& image, const RawMask& raw) {
  if (image.width != raw.upsampled.width || image.height != raw.upsampled.height)
    throw ValidationError("reference crop: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                          " vs raw mask " + std::to_string(raw.upsampled.width) + "x" +
                          std::to_string(raw.upsampled.height));
  RgbImage out = image;
  for (std::size_t p = 0; p < raw.upsampled.pixels.size(); ++p)
    if (!raw.upsampled.pixels[p]) std::fill_n(out.pixels.begin() + static_cast<std::ptrdiff_t>(3 * p), 3, std::uint8_t{0});
  return out;
}

SamplePair make_sample(RgbImage image, BinaryMask mask, int k, double min_fraction, std::string category,
                       std::string anomaly_type, std::string prompt) {
  if (image.width != mask.width || image.height != mask.height)
    throw ValidationError("image and mask dimensions differ");
  SamplePair s;
  s.raw = compute_raw_mask(mask, k, min_fraction);
  s.reference = crop_reference(image, s.raw);
  s.image = std::move(image);
  s.mask = std::move(mask);
  s.category = std::move(category);
  s.anomaly_type = std::move(anomaly_type);
  s.prompt = prompt.empty() ? s.category + " " + s.anomaly_type : std::move(prompt);
  return s;
}

// ---------------------------------------------------------------------------
// Tensor conversion

namespace {

int nearest(int dst, int dst_size, int src_size) {
  return static_cast<int>(static_cast<long>(dst) * src_size / dst_size);
}

}  // namespace

Tensor image_to_tensor(const RgbImage& image, int size) {
  if (size < 1) throw ConfigError("tensor size must be positive");
  std::vector<double> v(static_cast<std::size_t>(3 * size * size));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const int sy = nearest(y, size, image.height), sx = nearest(x, size, image.width);
        v[static_cast<std::size_t>((c * size + y) * size + x)] = 2.0 * image.at(sy, sx, c) / 255.0 - 1.0;
      }
  return Tensor::from({1, 3, size, size}, std::move(v));
}

Tensor mask_to_tensor(const BinaryMask& mask, int size, bool signed_range) {
  if (size < 1) throw ConfigError("tensor size must be positive");
  std::vector<double> v(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool on = mask.at(nearest(y, size, mask.height), nearest(x, size, mask.width)) != 0;
      v[static_cast<std::size_t>(y * size + x)] = on ? 1.0 : (signed_range ? -1.0 : 0.0);
    }
  return Tensor::from({1, 1, size, size}, std::move(v));
}

diffusion::JointLatent assemble_latent(const SamplePair& sample, int size) {
  return {image_to_tensor(sample.image, size), mask_to_tensor(sample.mask, size, true), {0}};
}

std::pair<RgbImage, BinaryMask> decode_outputs(const Tensor& image, const Tensor& annot, std::int64_t index) {
  if (image.ndim() != 4 || image.dim(1) != 3 || annot.ndim() != 4 || annot.dim(1) != 1 ||
      image.dim(2) != annot.dim(2) || image.dim(3) != annot.dim(3) || image.dim(0) != annot.dim(0))
    throw DimensionError("decode expects image [b,3,h,w] and annotation [b,1,h,w]");
  if (index < 0 || index >= image.dim(0)) throw UsageError("decode index out of range");
  const int h = static_cast<int>(image.dim(2)), w = static_cast<int>(image.dim(3));
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  RgbImage rgb{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * plane))};
  BinaryMask mask{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(plane))};
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(image.at((index * 3 + c) * plane + p), -1.0, 1.0);
      rgb.pixels[static_cast<std::size_t>(3 * p + c)] = static_cast<std::uint8_t>(std::round(255.0 * (v + 1.0) / 2.0));
    }
    mask.pixels[static_cast<std::size_t>(p)] = annot.at(index * plane + p) > 0.0 ? 1 : 0;
  }
  return {std::move(rgb), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Dataset loading

std::vector<std::string> Dataset::prompts() const {
  std::vector<std::string> out;
  for (const auto& s : samples) out.push_back(s.prompt);
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& root, const DatasetOptions& opts) {
  if (!fs::is_directory(root)) throw ValidationError("dataset root " + root.string() + " is not a directory");
  Dataset ds;
  for (const auto& cat_dir : sorted_entries(root, true))
    for (const auto& type_dir : sorted_entries(cat_dir, true)) {
      std::string prompt;
      if (fs::exists(type_dir / "prompt.txt")) {
        std::ifstream in(type_dir / "prompt.txt");
        if (!in) throw std::runtime_error("cannot read " + (type_dir / "prompt.txt").string());
        std::getline(in, prompt);
        prompt = trim(prompt);
      }
      const auto files = sorted_entries(type_dir, false);
      const std::set<fs::path> present(files.begin(), files.end());
      for (const auto& f : files) {
        const std::string name = f.filename().string();
        if (name == "prompt.txt") continue;
        const std::string stem = f.stem().string();
        if (f.extension() == ".pgm" && stem.size() > 5 && stem.compare(stem.size() - 5, 5, "_mask") == 0) {
          const fs::path image = type_dir / (stem.substr(0, stem.size() - 5) + ".ppm");
          if (!present.count(image)) ds.skipped.push_back("SKIP " + f.string() + " mask without image");
          continue;
        }
        if (f.extension() != ".ppm") {
          ds.skipped.push_back("SKIP " + f.string() + " unrecognized file");
          continue;
        }
        const fs::path mask_path = type_dir / (stem + "_mask.pgm");
        if (!present.count(mask_path)) {
          ds.skipped.push_back("SKIP " + f.string() + " image without mask");
          continue;
        }
        RgbImage image = io::read_ppm(f);
        BinaryMask mask = mask_from_gray(io::read_pgm(mask_path));
        if (image.width != mask.width || image.height != mask.height) {
          ds.skipped.push_back("SKIP " + f.string() + " mask dimensions differ");
          continue;
        }
        SamplePair s = make_sample(std::move(image), std::move(mask), opts.k, opts.min_fraction,
                                   cat_dir.filename().string(), type_dir.filename().string(), prompt);
        s.source = f;
        ds.samples.push_back(std::move(s));
      }
    }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

namespace {

struct Color {
  std::uint8_t r, g, b;
};

Color random_color(Rng& rng, int lo, int hi) {
  auto ch = [&] { return static_cast<std::uint8_t>(lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)))); };
  const std::uint8_t r = ch(), g = ch(), b = ch();
  return {r, g, b};
}

void paint(RgbImage& img, int y, int x, Color c) {
  auto* p = &img.pixels[static_cast<std::size_t>((y * img.width + x) * 3)];
  p[0] = c.r;
  p[1] = c.g;
  p[2] = c.b;
}

RgbImage texture(const std::string& kind, int size, Rng& rng) {
  RgbImage img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * size * size))};
  const Color a = random_color(rng, 150, 230), b = random_color(rng, 40, 110);
  const int period = 4 + static_cast<int>(rng.uniform_int(5));
  const bool diagonal = rng.uniform() < 0.5;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      bool on = false;
      if (kind == "stripes") on = ((diagonal ? x + y : x) / (period / 2 + 1)) % 2 == 0;
      else if (kind == "checker") on = (x / (period - 1) + y / (period - 1)) % 2 == 0;
      else on = x % period == 0 || y % period == 0;
      paint(img, y, x, on ? a : b);
    }
  return img;
}

BinaryMask defect_shape(const std::string& kind, int size, Rng& rng) {
  BinaryMask m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size), 0)};
  if (kind == "blot") {
    const double r = rng.uniform(1.5, 6.5);
    const double cy = rng.uniform(r, size - r), cx = rng.uniform(r, size - r);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) m.pixels[static_cast<std::size_t>(y * size + x)] = 1;
  } else {
    const double y0 = rng.uniform(2, size - 2), x0 = rng.uniform(2, size - 2);
    const double angle = rng.uniform(0.0, 3.141592653589793), len = rng.uniform(6.0, size * 0.7);
    const double y1 = y0 + len * std::sin(angle), x1 = x0 + len * std::cos(angle);
    const double half = rng.uniform(0.6, 1.6);
    const double dy = y1 - y0, dx = x1 - x0, l2 = dy * dy + dx * dx;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double t = std::clamp(((y - y0) * dy + (x - x0) * dx) / l2, 0.0, 1.0);
        const double ey = y - (y0 + t * dy), ex = x - (x0 + t * dx);
        if (ey * ey + ex * ex <= half * half) m.pixels[static_cast<std::size_t>(y * size + x)] = 1;
      }
  }
  return m;
}

}  // namespace

std::vector<fs::path> make_synthetic_fixtures(const fs::path& root, std::uint64_t seed, int n, const FixtureOptions& opts) {
  if (n < 0) throw ConfigError("fixture count must be non-negative");
  if (opts.size < 8) throw ConfigError("fixture size must be at least 8");
  if (opts.min_area < 1 || opts.min_area > opts.max_area || opts.max_area > opts.size * opts.size)
    throw ConfigError("fixture area bounds must satisfy 1 <= min <= max <= size^2");
  static const char* kCategories[] = {"stripes", "checker", "grid"};
  static const char* kDefects[] = {"blot", "slash", "blot"};
  std::vector<fs::path> written;
  for (int i = 0; i < n; ++i) {
    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(i)));
    const std::string category = kCategories[i % 3], defect = kDefects[i % 3];
    const fs::path dir = root / category / defect;
    fs::create_directories(dir);

    RgbImage img = texture(category, opts.size, rng);
    BinaryMask mask;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000) throw ConfigError("no defect fits the configured area bounds");
      mask = defect_shape(defect, opts.size, rng);
      const auto area = static_cast<int>(mask.count());
      if (area >= opts.min_area && area <= opts.max_area) break;
    }
    const Color ink = random_color(rng, 0, 255);
    for (int y = 0; y < opts.size; ++y)
      for (int x = 0; x < opts.size; ++x)
        if (mask.at(y, x)) paint(img, y, x, ink);

    char stem[16];
    std::snprintf(stem, sizeof stem, "%03d", i / 3);
    const fs::path image_path = dir / (std::string(stem) + ".ppm"), mask_path = dir / (std::string(stem) + "_mask.pgm");
    io::write_ppm(image_path, img);
    io::write_pgm(mask_path, mask_to_gray(mask));
    written.push_back(image_path);
    written.push_back(mask_path);
    const fs::path prompt = dir / "prompt.txt";
    if (!fs::exists(prompt)) {
      std::ofstream(prompt) << defect << " on " << category << "\n";
      written.push_back(prompt);
    }
  }
  return written;
}

}  // namespace helix::data
