#include "distillab/binio.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace distillab {

std::string to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::io: return "io";
    case FormatErrorKind::bad_magic: return "bad-magic";
    case FormatErrorKind::version_mismatch: return "version-mismatch";
    case FormatErrorKind::truncated: return "truncated";
    case FormatErrorKind::checksum: return "checksum";
    case FormatErrorKind::malformed: return "malformed";
  }
  return "unknown";
}

const std::vector<double>& Container::array(const std::string& name) const {
  for (const NamedArray& a : arrays) {
    if (a.name == name) return a.values;
  }
  throw FormatError(FormatErrorKind::malformed, "container has no array '" + name + "'");
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(FormatErrorKind::truncated,
                        std::string("file truncated while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32(const char* what) {
    const std::uint8_t* p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64(const char* what) {
    const std::uint8_t* p = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* a, std::size_t na, const std::uint8_t* b, std::size_t nb) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, a, static_cast<uInt>(na));
  crc = crc32(crc, b, static_cast<uInt>(nb));
  return static_cast<std::uint32_t>(crc);
}

std::size_t element_size(DType dtype) { return dtype == DType::float64 ? 8 : 4; }

}  // namespace

std::vector<std::uint8_t> encode_container(const std::string& magic, nlohmann::json header,
                                           const std::vector<NamedArray>& arrays, DType dtype) {
  if (magic.size() != 4) throw std::invalid_argument("container magic must be 4 bytes");
  if (!header.is_object()) throw std::invalid_argument("container header must be an object");
  nlohmann::json table = nlohmann::json::array();
  for (const NamedArray& a : arrays) table.push_back({{"name", a.name}, {"count", a.values.size()}});
  header["arrays"] = std::move(table);
  header["dtype"] = dtype == DType::float64 ? "float64" : "float32";
  const std::string text = header.dump();

  std::vector<std::uint8_t> payload;
  for (const NamedArray& a : arrays) {
    for (double v : a.values) {
      if (dtype == DType::float64) {
        put_u64(payload, std::bit_cast<std::uint64_t>(v));
      } else {
        put_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }

  std::vector<std::uint8_t> out(magic.begin(), magic.end());
  put_u32(out, kContainerVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc_of(reinterpret_cast<const std::uint8_t*>(text.data()), text.size(),
                      payload.data(), payload.size()));
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& magic) {
  Reader in(bytes);
  const std::uint8_t* m = in.take(4, "magic");
  if (std::memcmp(m, magic.data(), 4) != 0) {
    throw FormatError(FormatErrorKind::bad_magic, "bad magic: expected '" + magic + "'");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kContainerVersion) {
    throw FormatError(FormatErrorKind::version_mismatch,
                      "unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kContainerVersion) + ")");
  }
  const std::uint64_t header_len = in.u64("header length");
  const std::uint8_t* header_bytes = in.take(header_len, "header");
  const std::uint64_t payload_len = in.u64("payload length");
  const std::uint8_t* payload = in.take(payload_len, "payload");
  const std::uint32_t stored_crc = in.u32("checksum");
  if (in.remaining() != 0) {
    throw FormatError(FormatErrorKind::malformed, "trailing bytes after checksum");
  }
  if (crc_of(header_bytes, header_len, payload, payload_len) != stored_crc) {
    throw FormatError(FormatErrorKind::checksum, "checksum mismatch");
  }

  Container c;
  try {
    c.header = nlohmann::json::parse(header_bytes, header_bytes + header_len);
    const std::string dtype = c.header.at("dtype").get<std::string>();
    if (dtype == "float64") {
      c.dtype = DType::float64;
    } else if (dtype == "float32") {
      c.dtype = DType::float32;
    } else {
      throw FormatError(FormatErrorKind::malformed, "unknown dtype '" + dtype + "'");
    }
    std::size_t offset = 0;
    const std::size_t width = element_size(c.dtype);
    for (const auto& entry : c.header.at("arrays")) {
      NamedArray a{entry.at("name").get<std::string>(), {}};
      const auto count = entry.at("count").get<std::size_t>();
      if (count > (payload_len - offset) / width) {
        throw FormatError(FormatErrorKind::truncated, "payload shorter than array table");
      }
      a.values.resize(count);
      for (std::size_t i = 0; i < count; ++i, offset += width) {
        const std::uint8_t* p = payload + offset;
        if (c.dtype == DType::float64) {
          std::uint64_t bits = 0;
          for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
          a.values[i] = std::bit_cast<double>(bits);
        } else {
          std::uint32_t bits = 0;
          for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
          a.values[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
      }
      c.arrays.push_back(std::move(a));
    }
    if (offset != payload_len) {
      throw FormatError(FormatErrorKind::malformed, "payload longer than array table");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed, std::string("bad header: ") + e.what());
  }
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrorKind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_container(const std::filesystem::path& path, const std::string& magic,
                     nlohmann::json header, const std::vector<NamedArray>& arrays, DType dtype) {
  write_file_atomic(path, encode_container(magic, std::move(header), arrays, dtype));
}

Container read_container(const std::filesystem::path& path, const std::string& magic) {
  return decode_container(read_file_bytes(path), magic);
}

}  // namespace distillab
