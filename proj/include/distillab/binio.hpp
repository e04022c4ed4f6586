#pragma once

// Versioned little-endian container shared by every binary artifact:
//
//   magic[4] | u32 version | u64 header_len | header (UTF-8 JSON)
//   | u64 payload_len | payload | u32 crc32(header || payload)
//
// The header lists the payload arrays ("arrays": [{name, count}]) and their
// element type ("dtype": "float64" | "float32"); arrays are stored back to
// back in that order.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace distillab {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class FormatErrorKind { io, bad_magic, version_mismatch, truncated, checksum, malformed };

std::string to_string(FormatErrorKind kind);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

enum class DType { float64, float32 };

struct NamedArray {
  std::string name;
  std::vector<double> values;
};

struct Container {
  nlohmann::json header;
  std::vector<NamedArray> arrays;
  DType dtype = DType::float64;

  const std::vector<double>& array(const std::string& name) const;
};

/// Serialize to bytes. `header` must be a JSON object; the "arrays" and
/// "dtype" keys are filled in here.
std::vector<std::uint8_t> encode_container(const std::string& magic, nlohmann::json header,
                                           const std::vector<NamedArray>& arrays,
                                           DType dtype = DType::float64);
Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& magic);

/// Write via a temporary file and rename, so readers never see a partial file.
void write_container(const std::filesystem::path& path, const std::string& magic,
                     nlohmann::json header, const std::vector<NamedArray>& arrays,
                     DType dtype = DType::float64);
Container read_container(const std::filesystem::path& path, const std::string& magic);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace distillab
