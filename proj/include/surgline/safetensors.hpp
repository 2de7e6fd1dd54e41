#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace surgline {

/// One tensor decoded to double precision, values in row-major order.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  std::int64_t numel() const;
};

struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

/// Serializes as safetensors with F64 payloads; tensors are laid out in name
/// order so the bytes are a pure function of the archive contents.
std::string serialize_safetensors(const TensorArchive& archive);
void save_safetensors(const TensorArchive& archive, const std::filesystem::path& path);

/// Reads F64, F32, F16 and BF16 tensors; other dtypes are skipped.
TensorArchive parse_safetensors(const std::string& bytes);
TensorArchive load_safetensors(const std::filesystem::path& path);

}  // namespace surgline
