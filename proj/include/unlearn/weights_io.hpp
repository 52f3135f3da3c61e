#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/common.hpp"

namespace unlearn {

// Container layout (all little-endian):
//   bytes 0..7   magic "TLM1" followed by uint32 format version (1)
//   bytes 8..15  uint64 length of the JSON header
//   JSON header  {"kind", "tensors": [{"name", "shape": [r, c], "offset"}], ...extra fields}
//   payload      float32 row-major tensor data; offsets are relative to the payload start
struct TensorFile {
  nlohmann::json header;  // extra fields (kind, config, layer, stamps)
  std::vector<std::string> names;
  std::vector<MatrixF> tensors;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Size of magic + length prefix + JSON header, i.e. file size minus payload.
std::size_t tensor_file_header_size(const std::filesystem::path& path);

}  // namespace unlearn
