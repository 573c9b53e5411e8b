#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ks/tensor.hpp"

namespace ks {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Binary container: magic "KSNET1", then per tensor: u32 name length, UTF-8
/// name, u32 rank, u32 dims, raw f32. All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

}  // namespace ks
