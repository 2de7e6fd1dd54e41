#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace surgline {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file or record.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

using ClassId = std::string;

/// Seeded generator used by every stochastic component. Distributions are
/// implemented here rather than via <random> distributions so that streams
/// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);

  /// Uniform real in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Shortest decimal representation that round-trips, for text artifacts.
std::string format_real(double value);

std::vector<std::string> split(std::string_view text, char delim);
std::string trim(std::string_view text);

}  // namespace surgline
