#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace actadd::aawf {

// Container layout:
//   bytes [0, 8)    magic "AAWF0001"
//   bytes [8, 16)   header length N, u64 little-endian
//   bytes [16, 16+N) UTF-8 JSON header
//   zero padding to a 64-byte boundary, then tensor data
// The header carries a "tensors" array of {name, shape, dtype, byte_offset,
// crc32}. byte_offset is absolute and 64-byte aligned; data is f32
// little-endian, row-major.
inline constexpr char kMagic[9] = "AAWF0001";
inline constexpr std::size_t kAlignment = 64;

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::uint64_t byte_offset = 0;
  std::uint32_t crc32 = 0;

  std::size_t element_count() const;
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

struct File {
  nlohmann::json header;  // everything except "tensors"
  std::vector<TensorRecord> records;
  std::vector<NamedTensor> tensors;  // same order as records, checksums verified
};

std::uint32_t crc32(const void* data, std::size_t size);

// Reads and verifies every tensor (shape, dtype, bounds, crc32).
File read(const std::filesystem::path& path);

// Header-only read, no tensor payload.
File read_header(const std::filesystem::path& path);

// Writes atomically (temp file + rename). `header` must not contain "tensors".
void write(const std::filesystem::path& path, nlohmann::json header, const std::vector<NamedTensor>& tensors);

struct CheckReport {
  std::size_t tensors = 0;
  std::size_t bytes = 0;
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
};

// Recomputes every checksum and reports all failures rather than stopping at
// the first.
CheckReport verify(const std::filesystem::path& path);

// FNV-1a 64 over the header JSON text and all tensor checksums, hex encoded.
std::string content_hash(const File& file);

}  // namespace actadd::aawf
