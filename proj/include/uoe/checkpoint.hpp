#pragma once

// Binary array archive, little-endian regardless of host:
//   magic "UOE1" | version u32 | array count u32 |
//   per array: name length u32, name bytes, ndim u32, dims u64[ndim],
//              dtype u8 (0 = f32, 1 = f64), raw scalar data |
//   trailing CRC32 of all preceding bytes.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "uoe/common.hpp"
#include "uoe/tensor.hpp"

namespace uoe {

inline constexpr char kCheckpointMagic[4] = {'U', 'O', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

struct ArrayRecord {
  std::string name;
  Shape dims;
  Dtype dtype = Dtype::kF64;
  std::vector<unsigned char> raw;  // little-endian scalars

  std::size_t scalar_size() const {
    return dtype == Dtype::kF32 ? 4 : 8;
  }
};

namespace detail {

inline void put_bytes(std::vector<unsigned char>& out, std::uint64_t v,
                      std::size_t count) {
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_bytes(const std::vector<unsigned char>& in,
                               std::size_t& pos, std::size_t count) {
  if (pos + count > in.size())
    throw FormatError("checkpoint: truncated file (wanted " +
                      std::to_string(count) + " bytes at offset " +
                      std::to_string(pos) + ")");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < count; ++i)
    v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += count;
  return v;
}

template <typename T>
void put_scalar(std::vector<unsigned char>& out, T v) {
  if constexpr (sizeof(T) == 4)
    put_bytes(out, std::bit_cast<std::uint32_t>(v), 4);
  else
    put_bytes(out, std::bit_cast<std::uint64_t>(v), 8);
}

template <typename T>
T get_scalar(const std::vector<unsigned char>& in, std::size_t& pos) {
  if constexpr (sizeof(T) == 4)
    return std::bit_cast<T>(
        static_cast<std::uint32_t>(get_bytes(in, pos, 4)));
  else
    return std::bit_cast<T>(get_bytes(in, pos, 8));
}

}  // namespace detail

template <typename T>
ArrayRecord record_from_values(std::string name, Shape dims,
                               const std::vector<T>& values) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (numel(dims) != values.size())
    throw ShapeError("checkpoint: array " + name + " has " +
                     std::to_string(values.size()) + " values for shape " +
                     to_string(dims));
  ArrayRecord rec;
  rec.name = std::move(name);
  rec.dims = std::move(dims);
  rec.dtype = std::is_same_v<T, float> ? Dtype::kF32 : Dtype::kF64;
  rec.raw.reserve(values.size() * sizeof(T));
  for (T v : values) detail::put_scalar(rec.raw, v);
  return rec;
}

template <typename T>
ArrayRecord record_from_tensor(std::string name, const Tensor<T>& t) {
  return record_from_values(std::move(name), t.shape(), t.data());
}

template <typename T>
std::vector<T> values_from_record(const ArrayRecord& rec) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const Dtype want = std::is_same_v<T, float> ? Dtype::kF32 : Dtype::kF64;
  if (rec.dtype != want)
    throw FormatError("checkpoint: array " + rec.name +
                      " holds dtype tag " +
                      std::to_string(static_cast<int>(rec.dtype)) +
                      ", expected " +
                      std::to_string(static_cast<int>(want)));
  std::vector<T> values(numel(rec.dims));
  std::size_t pos = 0;
  for (auto& v : values) v = detail::get_scalar<T>(rec.raw, pos);
  return values;
}

// Unsigned 64-bit values ride along as a pair of f64-encoded 32-bit halves,
// so counters and seeds survive exactly within the two-dtype format.
inline ArrayRecord record_from_u64(std::string name, std::uint64_t v) {
  return record_from_values<double>(
      std::move(name), {2},
      {static_cast<double>(v & 0xffffffffull), static_cast<double>(v >> 32)});
}

inline std::uint64_t u64_from_record(const ArrayRecord& rec) {
  const auto halves = values_from_record<double>(rec);
  if (halves.size() != 2)
    throw FormatError("checkpoint: array " + rec.name +
                      " is not a u64 encoding");
  return static_cast<std::uint64_t>(halves[0]) |
         (static_cast<std::uint64_t>(halves[1]) << 32);
}

inline std::vector<unsigned char> serialize_checkpoint(
    const std::vector<ArrayRecord>& arrays) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_bytes(out, kCheckpointVersion, 4);
  detail::put_bytes(out, arrays.size(), 4);
  for (const auto& rec : arrays) {
    detail::put_bytes(out, rec.name.size(), 4);
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    detail::put_bytes(out, rec.dims.size(), 4);
    for (std::size_t dim : rec.dims) detail::put_bytes(out, dim, 8);
    out.push_back(static_cast<unsigned char>(rec.dtype));
    if (rec.raw.size() != numel(rec.dims) * rec.scalar_size())
      throw ShapeError("checkpoint: array " + rec.name +
                       " payload does not match its dims");
    out.insert(out.end(), rec.raw.begin(), rec.raw.end());
  }
  const auto crc =
      ::crc32(::crc32(0L, Z_NULL, 0), out.data(),
              static_cast<uInt>(out.size()));
  detail::put_bytes(out, crc, 4);
  return out;
}

inline std::vector<ArrayRecord> deserialize_checkpoint(
    const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16)
    throw FormatError("checkpoint: file too short (" +
                      std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic, not a checkpoint file");
  const auto stored_crc_pos = bytes.size() - 4;
  const auto actual = ::crc32(::crc32(0L, Z_NULL, 0), bytes.data(),
                              static_cast<uInt>(stored_crc_pos));
  std::size_t pos = stored_crc_pos;
  const auto stored = detail::get_bytes(bytes, pos, 4);
  if (actual != stored)
    throw FormatError("checkpoint: CRC mismatch (stored " +
                      std::to_string(stored) + ", computed " +
                      std::to_string(actual) + ")");
  pos = 4;
  const auto version = detail::get_bytes(bytes, pos, 4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " +
                      std::to_string(version));
  const auto count = detail::get_bytes(bytes, pos, 4);
  std::vector<ArrayRecord> arrays;
  arrays.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ArrayRecord rec;
    const auto name_len = detail::get_bytes(bytes, pos, 4);
    if (pos + name_len > stored_crc_pos)
      throw FormatError("checkpoint: truncated array name");
    rec.name.assign(bytes.begin() + pos, bytes.begin() + pos + name_len);
    pos += name_len;
    const auto ndim = detail::get_bytes(bytes, pos, 4);
    rec.dims.resize(ndim);
    for (auto& dim : rec.dims)
      dim = static_cast<std::size_t>(detail::get_bytes(bytes, pos, 8));
    const auto tag = detail::get_bytes(bytes, pos, 1);
    if (tag > 1)
      throw FormatError("checkpoint: unknown dtype tag " +
                        std::to_string(tag) + " for array " + rec.name);
    rec.dtype = static_cast<Dtype>(tag);
    const std::size_t payload = numel(rec.dims) * rec.scalar_size();
    if (pos + payload > stored_crc_pos)
      throw FormatError("checkpoint: truncated payload for array " +
                        rec.name);
    rec.raw.assign(bytes.begin() + pos, bytes.begin() + pos + payload);
    pos += payload;
    arrays.push_back(std::move(rec));
  }
  if (pos != stored_crc_pos)
    throw FormatError("checkpoint: " +
                      std::to_string(stored_crc_pos - pos) +
                      " unexpected trailing bytes");
  return arrays;
}

inline void write_checkpoint(const std::string& path,
                             const std::vector<ArrayRecord>& arrays) {
  const auto bytes = serialize_checkpoint(arrays);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " to write");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("checkpoint: short write to " + path);
}

inline std::vector<ArrayRecord> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes(
      (std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace uoe
