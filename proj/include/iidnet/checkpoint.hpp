// Flat container of named float32 arrays with a JSON metadata block.
//
// Byte layout, all integers little-endian (see docs/checkpoint_format.md):
//
//   magic     8 bytes  "IIDNETCK"
//   version   u32      kCheckpointVersion
//   meta_len  u32      length of the metadata block
//   meta      bytes    UTF-8 JSON object
//   count     u32      number of arrays
//   count x { name_len u32, name bytes, rank u32, dims u64[rank],
//             values f32[prod(dims)] (IEEE-754 little-endian) }
//   crc32     u32      zlib CRC-32 of every preceding byte
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <string>
#include <system_error>
#include <vector>

#include "iidnet/errors.hpp"

namespace iidnet {

inline constexpr char kCheckpointMagic[8] = {'I', 'I', 'D', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float f) { put_le(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  template <class U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size, std::string origin)
      : p_(data), end_(data + size), origin_(std::move(origin)) {}

  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }
  void need(std::size_t n) const {
    if (remaining() < n) throw CorruptFileError(origin_ + ": checkpoint truncated");
  }

 private:
  template <class U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p_[i]) << (8 * i);
    p_ += sizeof(U);
    return v;
  }
  const unsigned char* p_;
  const unsigned char* end_;
  std::string origin_;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    std::uint64_t count = 1;
    for (auto d : a.shape) count *= d;
    if (count != a.values.size())
      throw StructuralError("checkpoint array '" + a.name + "' has inconsistent shape");
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name.data(), a.name.size());
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u64(d);
    for (float v : a.values) w.f32(v);
  }
  auto& buf = w.buffer();
  w.u32(detail::crc32_of(buf.data(), buf.size()));
  return std::move(buf);
}

inline Checkpoint parse_checkpoint(const std::vector<unsigned char>& bytes,
                                   const std::string& origin = "<memory>") {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 4 + 4 + 4)
    throw CorruptFileError(origin + ": checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CorruptFileError(origin + ": not an iidnet checkpoint");

  detail::ByteReader r(bytes.data() + sizeof(kCheckpointMagic), bytes.size() - sizeof(kCheckpointMagic),
                       origin);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatchError(origin + ": checkpoint version " + std::to_string(version) +
                               ", expected " + std::to_string(kCheckpointVersion));

  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (detail::crc32_of(bytes.data(), body) != stored_crc)
    throw CorruptFileError(origin + ": checksum mismatch (truncated or corrupt checkpoint)");

  detail::ByteReader br(bytes.data() + sizeof(kCheckpointMagic) + 4,
                        body - sizeof(kCheckpointMagic) - 4, origin);
  Checkpoint out;
  const std::string meta = br.str(br.u32());
  try {
    out.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(origin + ": metadata is not valid JSON: " + e.what());
  }
  const std::uint32_t count = br.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = br.str(br.u32());
    const std::uint32_t rank = br.u32();
    if (rank > 8) throw CorruptFileError(origin + ": implausible array rank");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      a.shape.push_back(br.u64());
      n *= a.shape.back();
    }
    br.need(n * 4);
    a.values.resize(n);
    for (auto& v : a.values) v = br.f32();
    out.arrays.push_back(std::move(a));
  }
  if (br.remaining() != 0) throw CorruptFileError(origin + ": trailing bytes after arrays");
  return out;
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + tmp.string() + " (disk full?)");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

}  // namespace iidnet
