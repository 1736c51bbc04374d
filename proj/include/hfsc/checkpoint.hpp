#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hfsc {

// On-disk training snapshot. Layout (all integers little-endian):
//   "HFSC" | u32 version | u64 step | u64 config_len | config JSON bytes |
//   u64 tensor_count | tensors...
// Each tensor: u64 name_len | name | u32 ndim | ndim x u64 dims | f32 data.
struct NamedTensor {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<float> values;
};

struct Checkpoint {
  uint64_t step = 0;
  std::string config_json;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace hfsc
