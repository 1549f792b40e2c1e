#include "actadd/aawf.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "actadd/error.hpp"

namespace actadd::aawf {
namespace {

static_assert(std::endian::native == std::endian::little, "AAWF readers assume a little-endian host");

constexpr std::size_t kPreamble = 16;
constexpr int kFormatVersion = 1;

std::size_t align_up(std::size_t v) { return (v + kAlignment - 1) / kAlignment * kAlignment; }

struct RawHeader {
  nlohmann::json json;
  std::size_t data_start = 0;
  std::uint64_t file_size = 0;
};

RawHeader parse_header(std::ifstream& in, const std::filesystem::path& path) {
  RawHeader raw;
  in.seekg(0, std::ios::end);
  raw.file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  char magic[8];
  if (!in.read(magic, 8)) throw Error(path.string() + ": file too short for AAWF magic");
  if (std::memcmp(magic, "AAWF", 4) != 0) throw Error(path.string() + ": not an AAWF container (bad magic)");
  if (std::memcmp(magic, kMagic, 8) != 0) {
    throw Error(path.string() + ": unsupported format version '" + std::string(magic, 8) + "'");
  }
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), 8)) throw Error(path.string() + ": truncated header length");
  if (header_len > raw.file_size - kPreamble) throw Error(path.string() + ": header length exceeds file size");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw Error(path.string() + ": truncated header");
  }
  try {
    raw.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path.string() + ": malformed header JSON: " + e.what());
  }
  if (!raw.json.is_object() || !raw.json.contains("tensors") || !raw.json["tensors"].is_array()) {
    throw Error(path.string() + ": header lacks a tensors array");
  }
  raw.data_start = align_up(kPreamble + header_len);
  return raw;
}

File records_from(RawHeader& raw, const std::filesystem::path& path) {
  File file;
  for (const auto& t : raw.json["tensors"]) {
    TensorRecord rec;
    try {
      rec.name = t.at("name").get<std::string>();
      rec.shape = t.at("shape").get<std::vector<std::size_t>>();
      rec.byte_offset = t.at("byte_offset").get<std::uint64_t>();
      rec.crc32 = t.at("crc32").get<std::uint32_t>();
      if (t.at("dtype").get<std::string>() != "f32") {
        throw Error(path.string() + ": tensor " + rec.name + " has unsupported dtype " +
                    t.at("dtype").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ": malformed tensor record: " + e.what());
    }
    if (rec.byte_offset % kAlignment != 0) {
      throw Error(path.string() + ": tensor " + rec.name + " offset is not 64-byte aligned");
    }
    if (rec.byte_offset < raw.data_start) {
      throw Error(path.string() + ": tensor " + rec.name + " overlaps the header");
    }
    file.records.push_back(std::move(rec));
  }
  raw.json.erase("tensors");
  file.header = std::move(raw.json);
  return file;
}

std::vector<float> read_payload(std::ifstream& in, const TensorRecord& rec, std::uint64_t file_size,
                                const std::filesystem::path& path) {
  const std::size_t bytes = rec.element_count() * sizeof(float);
  if (rec.byte_offset + bytes > file_size) {
    throw Error(path.string() + ": checksum failure for tensor " + rec.name + " (data truncated: needs " +
                std::to_string(rec.byte_offset + bytes) + " bytes, file has " + std::to_string(file_size) + ")");
  }
  std::vector<float> values(rec.element_count());
  in.seekg(static_cast<std::streamoff>(rec.byte_offset));
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes))) {
    throw Error(path.string() + ": read failure for tensor " + rec.name);
  }
  const auto crc = crc32(values.data(), bytes);
  if (crc != rec.crc32) {
    throw Error(path.string() + ": checksum failure for tensor " + rec.name + " (stored " +
                std::to_string(rec.crc32) + ", computed " + std::to_string(crc) + ")");
  }
  return values;
}

}  // namespace

std::size_t TensorRecord::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::uint32_t crc32(const void* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, std::numeric_limits<uInt>::max()));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

File read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  auto raw = parse_header(in, path);
  return records_from(raw, path);
}

File read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  auto raw = parse_header(in, path);
  const auto file_size = raw.file_size;
  File file = records_from(raw, path);
  file.tensors.reserve(file.records.size());
  for (const auto& rec : file.records) {
    file.tensors.push_back({rec.name, rec.shape, read_payload(in, rec, file_size, path)});
  }
  return file;
}

void write(const std::filesystem::path& path, nlohmann::json header, const std::vector<NamedTensor>& tensors) {
  if (header.contains("tensors")) throw Error("aawf::write: header must not carry a tensors entry");
  header["format_version"] = kFormatVersion;

  // Offsets depend on the header length, which depends on the offsets' digits;
  // iterate until the layout is stable.
  std::vector<std::uint64_t> offsets(tensors.size(), 0);
  std::string text;
  for (int attempt = 0; attempt < 8; ++attempt) {
    nlohmann::json records = nlohmann::json::array();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      std::size_t count = 1;
      for (auto d : t.shape) count *= d;
      if (count != t.values.size()) {
        throw Error("aawf::write: tensor " + t.name + " shape does not match its value count");
      }
      records.push_back({{"name", t.name},
                         {"shape", t.shape},
                         {"dtype", "f32"},
                         {"byte_offset", offsets[i]},
                         {"crc32", crc32(t.values.data(), t.values.size() * sizeof(float))}});
    }
    nlohmann::json full = header;
    full["tensors"] = std::move(records);
    text = full.dump();

    std::vector<std::uint64_t> next(tensors.size());
    std::size_t cursor = align_up(kPreamble + text.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      next[i] = cursor;
      cursor = align_up(cursor + tensors[i].values.size() * sizeof(float));
    }
    if (next == offsets) break;
    offsets = std::move(next);
  }

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::size_t written = kPreamble + text.size();
    const std::vector<char> zeros(kAlignment, 0);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      out.write(zeros.data(), static_cast<std::streamsize>(offsets[i] - written));
      const auto bytes = tensors[i].values.size() * sizeof(float);
      out.write(reinterpret_cast<const char*>(tensors[i].values.data()), static_cast<std::streamsize>(bytes));
      written = offsets[i] + bytes;
    }
    if (!out) throw Error("write failure on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckReport verify(const std::filesystem::path& path) {
  CheckReport report;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  auto raw = parse_header(in, path);
  const auto file_size = raw.file_size;
  File file = records_from(raw, path);
  for (const auto& rec : file.records) {
    ++report.tensors;
    try {
      report.bytes += read_payload(in, rec, file_size, path).size() * sizeof(float);
    } catch (const Error& e) {
      report.failures.emplace_back(e.what());
      in.clear();
    }
  }
  return report;
}

std::string content_hash(const File& file) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const auto text = file.header.dump();
  mix(text.data(), text.size());
  for (const auto& rec : file.records) {
    mix(rec.name.data(), rec.name.size());
    mix(&rec.crc32, sizeof(rec.crc32));
  }
  std::ostringstream ss;
  ss << std::hex;
  ss.width(16);
  ss.fill('0');
  ss << h;
  return ss.str();
}

}  // namespace actadd::aawf
