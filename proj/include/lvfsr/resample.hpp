#pragma once

#include <cmath>
#include <vector>

#include "lvfsr/tensor.hpp"

namespace lvfsr {

/// Keys cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  const double ax = std::abs(x);
  const double ax2 = ax * ax, ax3 = ax2 * ax;
  if (ax <= 1.0) return (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0;
  if (ax < 2.0) return a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a;
  return 0.0;
}

/// Sampling taps for one output coordinate along one axis.
struct ResampleTaps {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

/// Per-output taps for resizing an axis of length `in` to `out`. Half-pixel
/// centers (align_corners = false); when shrinking, the kernel is stretched by
/// in/out so it also acts as the anti-aliasing filter. Out-of-range taps are
/// clamped to the edge and weights are normalized to sum to one.
inline std::vector<ResampleTaps> resample_taps(std::size_t in, std::size_t out) {
  require(in >= 1 && out >= 1, ErrorKind::shape, "bicubic_resize: extents must be at least 1");
  const double scale = static_cast<double>(out) / static_cast<double>(in);
  const double stretch = scale < 1.0 ? scale : 1.0;
  const double width = 4.0 / stretch;
  const std::size_t taps = static_cast<std::size_t>(std::ceil(width)) + 2;
  std::vector<ResampleTaps> result(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) / scale - 0.5;
    const auto left = static_cast<std::ptrdiff_t>(std::floor(center - width / 2.0));
    auto& entry = result[o];
    double total = 0.0;
    for (std::size_t p = 0; p < taps; ++p) {
      const std::ptrdiff_t j = left + static_cast<std::ptrdiff_t>(p);
      const double w = stretch * cubic_kernel(stretch * (center - static_cast<double>(j)));
      if (w == 0.0) continue;
      const std::ptrdiff_t clamped = std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(in) - 1);
      entry.index.push_back(static_cast<std::size_t>(clamped));
      entry.weight.push_back(w);
      total += w;
    }
    for (auto& w : entry.weight) w /= total;
  }
  return result;
}

/// Separable bicubic resize of a [C,H,W] image (rows first, then columns).
/// Not recorded for differentiation: it only acts on data inputs.
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& image, std::size_t out_h, std::size_t out_w) {
  require(image.rank() == 3, ErrorKind::shape, "bicubic_resize expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t channels = image.extent(0), h = image.extent(1), w = image.extent(2);
  const auto rows = resample_taps(h, out_h);
  const auto cols = resample_taps(w, out_w);
  std::vector<double> tmp(channels * out_h * w);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < rows[oy].index.size(); ++k)
          acc += rows[oy].weight[k] * static_cast<double>(image[(c * h + rows[oy].index[k]) * w + x]);
        tmp[(c * out_h + oy) * w + x] = acc;
      }
  std::vector<T> out(channels * out_h * out_w);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (std::size_t k = 0; k < cols[ox].index.size(); ++k)
          acc += cols[ox].weight[k] * tmp[(c * out_h + oy) * w + cols[ox].index[k]];
        out[(c * out_h + oy) * out_w + ox] = static_cast<T>(acc);
      }
  return Tensor<T>(Shape{channels, out_h, out_w}, std::move(out));
}

}  // namespace lvfsr
