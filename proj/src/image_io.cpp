#include "helix/image_io.hpp"

#include <fstream>
#include <iterator>

#include "helix/errors.hpp"

namespace helix::io {
namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void expect_magic(char kind) {
    if (bytes_.size() < 2 || bytes_[0] != 'P' || bytes_[1] != static_cast<std::uint8_t>(kind))
      throw FormatError(std::string("expected magic P") + kind, 0);
    pos_ = 2;
  }

  // Skips whitespace and '#' comments, then reads a decimal field.
  long field(const char* name) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000'000) throw FormatError(std::string(name) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) {
      if (pos_ >= bytes_.size()) throw FormatError(std::string("truncated header before ") + name, pos_);
      throw FormatError(std::string("expected ") + name, pos_);
    }
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size()) throw FormatError("truncated header", pos_);
    if (!is_space(bytes_[pos_])) throw FormatError("expected whitespace after maxval", pos_);
    return pos_ + 1;
  }

  std::size_t pos() const { return pos_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

struct Header {
  int width;
  int height;
  std::size_t data;
  std::size_t size;  // raster bytes; anything after them is ignored
};

Header parse_header(const std::vector<std::uint8_t>& bytes, char kind, int channels) {
  HeaderReader r(bytes);
  r.expect_magic(kind);
  const std::size_t w_at = r.pos();
  const long w = r.field("width");
  const long h = r.field("height");
  if (w < 1 || h < 1) throw FormatError("image dimensions must be positive", w_at);
  const std::size_t max_at = r.pos();
  const long maxval = r.field("maxval");
  if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + " (only 255)", max_at);
  const std::size_t data = r.raster_start();
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(channels);
  if (bytes.size() < data + need) throw FormatError("truncated raster", bytes.size());
  return {static_cast<int>(w), static_cast<int>(h), data, need};
}

std::vector<std::uint8_t> encode(const char* magic, int width, int height, const std::vector<std::uint8_t>& pixels,
                                 int channels) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * static_cast<std::size_t>(channels))
    throw ValidationError("image buffer does not match its dimensions");
  const std::string header = std::string(magic) + "\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

}  // namespace

RgbImage parse_ppm(const std::vector<std::uint8_t>& bytes) {
  const Header h = parse_header(bytes, '6', 3);
  const auto first = bytes.begin() + static_cast<std::ptrdiff_t>(h.data);
  return {h.width, h.height, std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(h.size))};
}

GrayImage parse_pgm(const std::vector<std::uint8_t>& bytes) {
  const Header h = parse_header(bytes, '5', 1);
  const auto first = bytes.begin() + static_cast<std::ptrdiff_t>(h.data);
  return {h.width, h.height, std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(h.size))};
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) { return encode("P6", image.width, image.height, image.pixels, 3); }
std::vector<std::uint8_t> encode_pgm(const GrayImage& image) { return encode("P5", image.width, image.height, image.pixels, 1); }

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

namespace {

template <class Image, class Parse>
Image read_image(const std::filesystem::path& path, Parse parse) {
  try {
    return parse(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace

RgbImage read_ppm(const std::filesystem::path& path) { return read_image<RgbImage>(path, parse_ppm); }
GrayImage read_pgm(const std::filesystem::path& path) { return read_image<GrayImage>(path, parse_pgm); }
void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_bytes(path, encode_ppm(image)); }
void write_pgm(const std::filesystem::path& path, const GrayImage& image) { write_bytes(path, encode_pgm(image)); }

}  // namespace helix::io
