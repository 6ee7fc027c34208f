#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "helix/params.hpp"

// Binary layout, all integers little-endian:
//   "DHDF0001"
//   u32 config length, config text
//   u32 parameter count
//   per parameter: u16 name length, name, u8 ndim, u32 dims[ndim], f64 data
//   u64 FNV-1a of every preceding byte

namespace helix::ckpt {

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string config_text;
  std::vector<NamedTensor> params;
};

inline constexpr char kMagic[] = "DHDF0001";

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode(const Checkpoint& c);
/// Throws CorruptCheckpoint on a bad magic, checksum, or layout.
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path);

Checkpoint snapshot(const ParameterStore& store, std::string config_text);
/// Copies values into a store with the same names and shapes, in any order.
/// A missing, extra, or reshaped parameter is CorruptCheckpoint.
void restore(ParameterStore& store, const Checkpoint& c);

}  // namespace helix::ckpt
