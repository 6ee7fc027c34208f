#include "helix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <limits>
#include <unordered_map>

#include "helix/errors.hpp"
#include "helix/image_io.hpp"

namespace helix::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr std::size_t kMagicLen = 8;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_doubles(double* dst, std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) need(std::numeric_limits<std::size_t>::max());
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw CorruptCheckpoint("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode(const Checkpoint& c) {
  Writer w;
  w.put_bytes(kMagic, kMagicLen);
  if (c.config_text.size() > std::numeric_limits<std::uint32_t>::max()) throw UsageError("config text too long");
  w.put(static_cast<std::uint32_t>(c.config_text.size()));
  w.put_bytes(c.config_text.data(), c.config_text.size());
  w.put(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) throw UsageError("parameter name too long: " + p.name);
    if (p.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw UsageError("too many dimensions: " + p.name);
    std::int64_t n = 1;
    for (auto d : p.shape) {
      if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) throw UsageError("dimension out of range: " + p.name);
      n *= d;
    }
    if (n != static_cast<std::int64_t>(p.data.size())) throw UsageError("shape does not match data size: " + p.name);
    w.put(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    w.put(static_cast<std::uint8_t>(p.shape.size()));
    for (auto d : p.shape) w.put(static_cast<std::uint32_t>(d));
    w.put_bytes(p.data.data(), p.data.size() * sizeof(double));
  }
  w.put(fnv1a64(w.out));
  return std::move(w.out);
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicLen || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0)
    throw CorruptCheckpoint("bad checkpoint magic");
  if (bytes.size() < kMagicLen + 4 + 4 + 8) throw CorruptCheckpoint("checkpoint truncated");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a64(body) != stored) throw CorruptCheckpoint("checkpoint checksum mismatch");

  Reader r(body);
  r.get_string(kMagicLen);
  Checkpoint c;
  c.config_text = r.get_string(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor p;
    p.name = r.get_string(r.get<std::uint16_t>());
    const auto ndim = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint32_t>();
      p.shape.push_back(dim);
      if (dim != 0 && n > body.size() / dim) throw CorruptCheckpoint("parameter " + p.name + " larger than the file");
      n *= dim;
    }
    if (n > body.size() / sizeof(double)) throw CorruptCheckpoint("parameter " + p.name + " larger than the file");
    p.data.resize(n);
    r.get_doubles(p.data.data(), n);
    c.params.push_back(std::move(p));
  }
  if (r.pos() != body.size()) throw CorruptCheckpoint("unexpected bytes after the last parameter");
  return c;
}

void save(const std::filesystem::path& path, const Checkpoint& c) { io::write_bytes(path, encode(c)); }

Checkpoint load(const std::filesystem::path& path) {
  try {
    return decode(io::read_bytes(path));
  } catch (const CorruptCheckpoint& e) {
    throw CorruptCheckpoint(path.string() + ": " + e.what());
  }
}

Checkpoint snapshot(const ParameterStore& store, std::string config_text) {
  Checkpoint c{std::move(config_text), {}};
  for (const auto& p : store.all())
    c.params.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  return c;
}

void restore(ParameterStore& store, const Checkpoint& c) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& p : c.params)
    if (!by_name.emplace(p.name, &p).second) throw CorruptCheckpoint("duplicate parameter " + p.name);
  if (by_name.size() != store.size())
    throw CorruptCheckpoint("checkpoint has " + std::to_string(by_name.size()) + " parameters, model has " +
                            std::to_string(store.size()));
  for (auto& p : store.all()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CorruptCheckpoint("checkpoint lacks parameter " + p.name);
    if (it->second->shape != p.tensor.shape()) throw CorruptCheckpoint("parameter " + p.name + " has a different shape");
    std::copy(it->second->data.begin(), it->second->data.end(), p.tensor.mutable_data().begin());
  }
}

}  // namespace helix::ckpt
