#include "surgline/safetensors.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "surgline/common.hpp"

namespace surgline {

static_assert(std::endian::native == std::endian::little, "safetensors payloads are little-endian");

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

double half_to_double(std::uint16_t h) {
  const int sign = (h >> 15) & 1;
  const int exp = (h >> 10) & 0x1f;
  const int mant = h & 0x3ff;
  double v;
  if (exp == 0) v = std::ldexp(mant, -24);
  else if (exp == 31) v = mant ? std::nan("") : INFINITY;
  else v = std::ldexp(mant + 1024, exp - 25);
  return sign ? -v : v;
}

double bf16_to_double(std::uint16_t b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b) << 16;
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

}  // namespace

std::string serialize_safetensors(const TensorArchive& archive) {
  nlohmann::ordered_json header;
  if (!archive.metadata.empty()) {
    nlohmann::ordered_json meta;
    for (const auto& [k, v] : archive.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel()) throw ValidationError("tensor " + name + ": shape/data mismatch");
    const std::size_t bytes = t.data.size() * sizeof(double);
    header[name] = {{"dtype", "F64"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string h = header.dump();
  while ((h.size() + 8) % 8 != 0) h.push_back(' ');
  std::string out;
  out.reserve(8 + h.size() + offset);
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += h;
  for (const auto& [_, t] : archive.tensors) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  return out;
}

void save_safetensors(const TensorArchive& archive, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_safetensors(archive));
}

TensorArchive parse_safetensors(const std::string& bytes) {
  if (bytes.size() < 8) throw ParseError("safetensors: truncated header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw ParseError("safetensors: header exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("safetensors header: ") + e.what());
  }
  const char* payload = bytes.data() + 8 + len;
  const std::size_t payload_size = bytes.size() - 8 - len;
  TensorArchive archive;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : info.items()) archive.metadata[k] = v.get<std::string>();
      continue;
    }
    const auto dtype = info.at("dtype").get<std::string>();
    const auto begin = info.at("data_offsets")[0].get<std::size_t>();
    const auto end = info.at("data_offsets")[1].get<std::size_t>();
    if (end < begin || end > payload_size) throw ParseError("safetensors: bad offsets for " + name);
    Tensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    const auto n = static_cast<std::size_t>(t.numel());
    const char* src = payload + begin;
    std::size_t width = 0;
    if (dtype == "F64") width = 8;
    else if (dtype == "F32") width = 4;
    else if (dtype == "F16" || dtype == "BF16") width = 2;
    else continue;
    if (end - begin != n * width) throw ParseError("safetensors: size mismatch for " + name);
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 8) {
        std::memcpy(&t.data[i], src + i * 8, 8);
      } else if (width == 4) {
        float f;
        std::memcpy(&f, src + i * 4, 4);
        t.data[i] = f;
      } else {
        std::uint16_t h;
        std::memcpy(&h, src + i * 2, 2);
        t.data[i] = dtype == "F16" ? half_to_double(h) : bf16_to_double(h);
      }
    }
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

TensorArchive load_safetensors(const std::filesystem::path& path) { return parse_safetensors(read_file(path)); }

}  // namespace surgline
