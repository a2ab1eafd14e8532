#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace blindpaint {

// Single-file container for named tensors plus a JSON metadata string.
//
// Layout (little-endian):
//   magic "BLNDPNT\0" | u32 version | u64 meta length | meta bytes | u32 tensor count |
//   per tensor: u32 name length | name | u8 dtype | u32 ndim | i64 dims[ndim] | raw data
//
// dtype codes: 0 = float32, 1 = float64, 2 = int64.
struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  std::string meta;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);

// Parses the whole file before returning; a truncated or malformed file throws Error naming
// the field being read when the failure occurred.
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace blindpaint
