#pragma once

// Binary container for named float64 tensors.
//
//   "DSD1" | u32 version | u8 little-endian flag | 3 reserved bytes
//   u64 step | u32 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank],
//               u64 payload offset, u64 element count
//   u64 payload bytes | payload (float64, little-endian) | u32 CRC32(payload)

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(std::string_view name) const;
  bool has_prefix(std::string_view prefix) const;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& checkpoint);
// Throws DataError naming the failure: bad magic, unsupported version,
// checksum mismatch, truncation or malformed directory.
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// A single [rows..., dim] tensor named "latents" in the same container.
void write_latents(const std::filesystem::path& path, const Tensor& latents);
Tensor read_latents(const std::filesystem::path& path);

}  // namespace dsd::io
