#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace helix::io {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height, row-major RGB

  std::uint8_t at(int y, int x, int c) const { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height
};

/// Binary P6 / P5 with maxval 255. Header comments are accepted on read and
/// never written. Malformed input throws FormatError carrying the byte offset.
RgbImage parse_ppm(const std::vector<std::uint8_t>& bytes);
GrayImage parse_pgm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);

RgbImage read_ppm(const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace helix::io
