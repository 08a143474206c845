#pragma once

// `.ten` tensor files: "LVT1", u32 rank, rank × u32 extents, then row-major
// f32 values. Every integer and float is little-endian.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>

#include "lvfsr/tensor.hpp"

namespace lvfsr {

inline constexpr char kTensorMagic[4] = {'L', 'V', 'T', '1'};

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

/// Bounds-checked little-endian reader over an in-memory byte string.
class Reader {
 public:
  Reader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      fail(ErrorKind::format, source_ + ": truncated (wanted " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_) + ")");
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    auto b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }
  const std::string& source() const { return source_; }

 private:
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary and renames over `path`, so a failed write
/// never leaves a file under the final name.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::function<void(std::ostream&)>& writer) {
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) fail(ErrorKind::io, "cannot write " + path.string());
      writer(out);
      out.flush();
      if (!out) fail(ErrorKind::io, "write failed for " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::io, "cannot rename into " + path.string() + ": " + ec.message());
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
}

inline void write_bytes_atomic(const std::filesystem::path& path, const std::string& bytes) {
  write_file_atomic(path, [&](std::ostream& out) { out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())); });
}

}  // namespace io

/// Appends the `.ten` encoding of (shape, values) to `out`.
template <typename T>
void encode_tensor(std::string& out, const Shape& shape, std::span<const T> values) {
  out.append(kTensorMagic, 4);
  io::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t extent : shape) io::put_u32(out, static_cast<std::uint32_t>(extent));
  for (T v : values) io::put_f32(out, static_cast<float>(v));
}

template <typename T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string out;
  encode_tensor<T>(out, t.shape(), t.data());
  return out;
}

template <typename T = float>
Tensor<T> decode_tensor(io::Reader& in) {
  const auto magic = in.bytes(4);
  if (std::memcmp(magic.data(), kTensorMagic, 4) != 0) fail(ErrorKind::format, in.source() + ": bad tensor magic");
  const std::uint32_t rank = in.u32();
  if (rank > 8) fail(ErrorKind::format, in.source() + ": implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& extent : shape) {
    extent = in.u32();
    if (extent == 0) fail(ErrorKind::format, in.source() + ": zero tensor extent");
    count *= extent;
  }
  in.need(count * 4);
  std::vector<T> values(count);
  for (auto& v : values) v = static_cast<T>(in.f32());
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T = float>
Tensor<T> decode_tensor(std::string_view bytes, const std::string& source = "<memory>") {
  io::Reader in(bytes, source);
  Tensor<T> t = decode_tensor<T>(in);
  if (!in.done()) fail(ErrorKind::format, source + ": trailing bytes after tensor");
  return t;
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  io::write_bytes_atomic(path, encode_tensor(t));
}

template <typename T = float>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  return decode_tensor<T>(bytes, path.string());
}

}  // namespace lvfsr
