#pragma once

// Binary PPM (P6, maxval 255) <-> [3,H,W] float tensors in [0,1].

#include <cctype>
#include <cmath>
#include <filesystem>
#include <string>

#include "lvfsr/tensor_io.hpp"

namespace lvfsr {

namespace detail {
inline std::size_t ppm_header_int(io::Reader& in, const std::string& source) {
  // Skips whitespace and '#' comments, then reads a decimal integer.
  char c;
  for (;;) {
    c = in.bytes(1)[0];
    if (c == '#') {
      while (in.bytes(1)[0] != '\n') {
      }
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      break;
    }
  }
  if (!std::isdigit(static_cast<unsigned char>(c))) fail(ErrorKind::format, source + ": malformed PPM header");
  std::size_t value = static_cast<std::size_t>(c - '0');
  for (;;) {
    in.need(1);
    c = in.bytes(1)[0];
    if (!std::isdigit(static_cast<unsigned char>(c))) break;
    value = value * 10 + static_cast<std::size_t>(c - '0');
    if (value > (1u << 20)) fail(ErrorKind::format, source + ": PPM dimension too large");
  }
  if (!std::isspace(static_cast<unsigned char>(c))) fail(ErrorKind::format, source + ": malformed PPM header");
  return value;
}
}  // namespace detail

inline Tensor<float> decode_ppm(std::string_view bytes, const std::string& source) {
  io::Reader in(bytes, source);
  const auto magic = in.bytes(2);
  if (magic != "P6") fail(ErrorKind::format, source + ": not a binary PPM (P6)");
  const std::size_t width = detail::ppm_header_int(in, source);
  const std::size_t height = detail::ppm_header_int(in, source);
  const std::size_t maxval = detail::ppm_header_int(in, source);
  if (maxval != 255) fail(ErrorKind::format, source + ": only 8-bit PPM (maxval 255) is supported");
  if (width == 0 || height == 0) fail(ErrorKind::format, source + ": empty image");
  const auto pixels = in.bytes(width * height * 3);
  std::vector<float> data(3 * height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        data[(c * height + y) * width + x] =
            static_cast<float>(static_cast<unsigned char>(pixels[(y * width + x) * 3 + c])) / 255.0f;
  return Tensor<float>(Shape{3, height, width}, std::move(data));
}

inline Tensor<float> load_ppm(const std::filesystem::path& path) {
  return decode_ppm(io::read_file(path), path.string());
}

/// Values are clamped to [0,1] and rounded to the nearest 8-bit level.
template <typename T>
std::string encode_ppm(const Tensor<T>& image) {
  require(image.rank() == 3 && image.extent(0) == 3, ErrorKind::shape,
          "encode_ppm expects [3,H,W], got " + shape_str(image.shape()));
  const std::size_t height = image.extent(1), width = image.extent(2);
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + 3 * width * height);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image[(c * height + y) * width + x]), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  return out;
}

template <typename T>
void save_ppm(const std::filesystem::path& path, const Tensor<T>& image) {
  io::write_bytes_atomic(path, encode_ppm(image));
}

}  // namespace lvfsr
