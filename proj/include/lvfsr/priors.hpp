#pragma once

// The four per-image priors (semantic mask, depth map, caption embedding,
// description tokens), their on-disk layout, a synthetic generator for
// desk-scale experiments, and the convolutional encoders for the two visual
// priors.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lvfsr/init.hpp"
#include "lvfsr/ops.hpp"
#include "lvfsr/rng.hpp"
#include "lvfsr/tensor_io.hpp"

namespace lvfsr {

inline constexpr std::size_t kMaxDescriptionTokens = 77;

struct SemanticMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 8;
  std::vector<std::int32_t> labels;

  bool operator==(const SemanticMask&) const = default;
};

struct DepthMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> depth;

  bool operator==(const DepthMap&) const = default;
};

struct CaptionEmbedding {
  std::vector<float> values;

  bool operator==(const CaptionEmbedding&) const = default;
};

/// T × dim token matrix, row-major.
struct DescriptionEmbedding {
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  bool operator==(const DescriptionEmbedding&) const = default;
};

struct PriorBundle {
  std::string image_id;
  SemanticMask mask;
  DepthMap depth;
  CaptionEmbedding caption;
  DescriptionEmbedding description;

  bool operator==(const PriorBundle&) const = default;
};

struct PriorFiles {
  std::filesystem::path mask, depth, caption, description;
};

inline PriorFiles prior_files(const std::filesystem::path& dir, const std::string& id) {
  return {dir / (id + ".mask.ten"), dir / (id + ".depth.ten"), dir / (id + ".cap.ten"), dir / (id + ".desc.ten")};
}

/// Throws on any contract violation; `where` names the offending source.
inline void validate(const SemanticMask& mask, const std::string& where) {
  require(mask.height > 0 && mask.width > 0 && mask.labels.size() == mask.height * mask.width,
          ErrorKind::shape, where + ": mask extents do not match label count");
  require(mask.classes >= 1, ErrorKind::config, where + ": mask class count must be positive");
  for (auto label : mask.labels)
    require(label >= 0 && static_cast<std::size_t>(label) < mask.classes, ErrorKind::range,
            where + ": mask label " + std::to_string(label) + " outside [0," + std::to_string(mask.classes) + ")");
}

inline void validate(const DepthMap& depth, const std::string& where) {
  require(depth.height > 0 && depth.width > 0 && depth.depth.size() == depth.height * depth.width,
          ErrorKind::shape, where + ": depth extents do not match value count");
  for (float v : depth.depth)
    require(std::isfinite(v) && v >= 0.0f && v <= 1.0f, ErrorKind::range,
            where + ": depth value " + std::to_string(v) + " outside [0,1]");
}

inline void validate(const CaptionEmbedding& caption, const std::string& where) {
  require(!caption.values.empty(), ErrorKind::shape, where + ": empty caption embedding");
  for (float v : caption.values)
    require(std::isfinite(v), ErrorKind::range, where + ": non-finite caption embedding value");
}

inline void validate(const DescriptionEmbedding& desc, const std::string& where) {
  require(desc.tokens >= 1 && desc.tokens <= kMaxDescriptionTokens, ErrorKind::shape,
          where + ": description token count " + std::to_string(desc.tokens) + " outside [1," +
              std::to_string(kMaxDescriptionTokens) + "]");
  require(desc.dim >= 1 && desc.values.size() == desc.tokens * desc.dim, ErrorKind::shape,
          where + ": description extents do not match value count");
  for (float v : desc.values)
    require(std::isfinite(v), ErrorKind::range, where + ": non-finite description embedding value");
}

inline void validate(const PriorBundle& bundle) {
  const std::string& id = bundle.image_id;
  validate(bundle.mask, id);
  validate(bundle.depth, id);
  validate(bundle.caption, id);
  validate(bundle.description, id);
  require(bundle.mask.height == bundle.depth.height && bundle.mask.width == bundle.depth.width,
          ErrorKind::shape, id + ": mask and depth extents disagree");
}

inline void save_prior_bundle(const std::filesystem::path& dir, const PriorBundle& bundle) {
  validate(bundle);
  const auto files = prior_files(dir, bundle.image_id);
  const auto& m = bundle.mask;
  std::vector<float> labels(m.labels.begin(), m.labels.end());
  save_tensor(files.mask, Tensor<float>({m.height, m.width}, std::move(labels)));
  save_tensor(files.depth, Tensor<float>({bundle.depth.height, bundle.depth.width}, bundle.depth.depth));
  save_tensor(files.caption, Tensor<float>({bundle.caption.values.size()}, bundle.caption.values));
  const auto& d = bundle.description;
  save_tensor(files.description, Tensor<float>({d.tokens, d.dim}, d.values));
}

struct PriorLoadOptions {
  std::size_t classes = 8;
  /// When nonzero, mask/depth extents must equal these LR extents.
  std::size_t expect_height = 0;
  std::size_t expect_width = 0;
};

inline PriorBundle load_prior_bundle(const std::filesystem::path& dir, const std::string& id,
                                     const PriorLoadOptions& options = {}) {
  const auto files = prior_files(dir, id);
  for (const auto& path : {files.mask, files.depth, files.caption, files.description})
    require(std::filesystem::exists(path), ErrorKind::io, "missing prior file " + path.string());

  auto load_rank = [](const std::filesystem::path& path, std::size_t rank) {
    Tensor<float> t = load_tensor<float>(path);
    require(t.rank() == rank, ErrorKind::shape,
            path.string() + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(t.shape()));
    return t;
  };

  PriorBundle bundle;
  bundle.image_id = id;

  const Tensor<float> mask = load_rank(files.mask, 2);
  bundle.mask.height = mask.extent(0);
  bundle.mask.width = mask.extent(1);
  bundle.mask.classes = options.classes;
  bundle.mask.labels.reserve(mask.size());
  for (float v : mask.data()) {
    require(std::isfinite(v) && v == std::floor(v) && v >= 0.0f && v < static_cast<float>(options.classes),
            ErrorKind::range,
            files.mask.string() + ": mask label " + std::to_string(v) + " is not an integer in [0," +
                std::to_string(options.classes) + ")");
    bundle.mask.labels.push_back(static_cast<std::int32_t>(v));
  }

  const Tensor<float> depth = load_rank(files.depth, 2);
  bundle.depth = {depth.extent(0), depth.extent(1), depth.values()};
  for (float v : bundle.depth.depth)
    require(std::isfinite(v) && v >= 0.0f && v <= 1.0f, ErrorKind::range,
            files.depth.string() + ": depth value " + std::to_string(v) + " outside [0,1]");

  bundle.caption.values = load_rank(files.caption, 1).values();
  const Tensor<float> desc = load_rank(files.description, 2);
  bundle.description = {desc.extent(0), desc.extent(1), desc.values()};

  validate(bundle.caption, files.caption.string());
  validate(bundle.description, files.description.string());
  require(bundle.mask.height == bundle.depth.height && bundle.mask.width == bundle.depth.width,
          ErrorKind::shape,
          id + ": mask extents " + shape_str(mask.shape()) + " disagree with depth extents " +
              shape_str(depth.shape()));
  if (options.expect_height != 0 || options.expect_width != 0)
    require(bundle.mask.height == options.expect_height && bundle.mask.width == options.expect_width,
            ErrorKind::shape,
            id + ": prior extents " + shape_str(mask.shape()) + " do not match LR image extents " +
                shape_str({options.expect_height, options.expect_width}));
  return bundle;
}

// ---------------------------------------------------------------------------
// Synthetic priors

struct SynthPriorConfig {
  std::size_t classes = 8;
  std::size_t caption_dim = 64;
  std::size_t description_dim = 64;
  /// Must be a perfect square; the HR image is cut into a sqrt(T) × sqrt(T) patch grid.
  std::size_t description_tokens = 16;
};

/// ITU-R BT.601 luma of a [3,H,W] image.
template <typename T>
std::vector<double> luminance(const Tensor<T>& rgb) {
  require(rgb.rank() == 3 && rgb.extent(0) == 3, ErrorKind::shape, "luminance expects [3,H,W]");
  const std::size_t plane = rgb.extent(1) * rgb.extent(2);
  std::vector<double> y(plane);
  for (std::size_t i = 0; i < plane; ++i)
    y[i] = 0.299 * rgb[i] + 0.587 * rgb[plane + i] + 0.114 * rgb[2 * plane + i];
  return y;
}

/// The fixed patch projection [dim, patch_dim] used for informative description
/// tokens. It depends only on its extents, so every image in a dataset shares it.
inline std::vector<double> description_projection(std::size_t patch_dim, std::size_t dim) {
  Rng rng = Rng::stream(0x5eedull, "description-projection:" + std::to_string(patch_dim) + "x" +
                                       std::to_string(dim));
  std::vector<double> p(dim * patch_dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(patch_dim));
  for (auto& v : p) v = rng.normal() * s;
  return p;
}

inline std::size_t token_grid_side(std::size_t tokens) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
  require(side >= 1 && side * side == tokens, ErrorKind::config,
          "description token count " + std::to_string(tokens) + " is not a perfect square");
  return side;
}

/// Flattened [3, ph, pw] HR patch at grid cell (gy, gx).
template <typename T>
std::vector<double> hr_patch(const Tensor<T>& hr, std::size_t side, std::size_t gy, std::size_t gx) {
  const std::size_t h = hr.extent(1), w = hr.extent(2), ph = h / side, pw = w / side;
  std::vector<double> patch;
  patch.reserve(3 * ph * pw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) patch.push_back(hr[(c * h + gy * ph + y) * w + gx * pw + x]);
  return patch;
}

/// Deterministic stand-in for the external prior extractors.
template <typename T>
PriorBundle synth_priors(const Tensor<T>& hr, const Tensor<T>& lr, std::uint64_t seed, bool informative,
                         const std::string& image_id, const SynthPriorConfig& config = {}) {
  require(hr.rank() == 3 && hr.extent(0) == 3 && lr.rank() == 3 && lr.extent(0) == 3, ErrorKind::shape,
          "synth_priors expects [3,H,W] images");
  require(hr.extent(1) % lr.extent(1) == 0 && hr.extent(2) % lr.extent(2) == 0 &&
              hr.extent(1) / lr.extent(1) == hr.extent(2) / lr.extent(2),
          ErrorKind::shape, "synth_priors: HR extents are not an integer multiple of LR extents");
  const std::size_t h = lr.extent(1), w = lr.extent(2);
  PriorBundle bundle;
  bundle.image_id = image_id;

  // Mask: K-way quantization of LR luma at thresholds k/K.
  const auto luma = luminance(lr);
  bundle.mask = {h, w, config.classes, {}};
  bundle.mask.labels.reserve(h * w);
  for (double y : luma) {
    const auto level = static_cast<std::int64_t>(std::floor(std::clamp(y, 0.0, 1.0) * static_cast<double>(config.classes)));
    bundle.mask.labels.push_back(static_cast<std::int32_t>(std::min<std::int64_t>(level, static_cast<std::int64_t>(config.classes) - 1)));
  }

  // Depth: 1 at the luma-weighted centroid, falling linearly to 0 at the farthest pixel.
  double total = 0, cy = 0, cx = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = std::max(0.0, luma[y * w + x]);
      total += v;
      cy += v * static_cast<double>(y);
      cx += v * static_cast<double>(x);
    }
  if (total > 0) {
    cy /= total;
    cx /= total;
  } else {
    cy = (static_cast<double>(h) - 1) / 2;
    cx = (static_cast<double>(w) - 1) / 2;
  }
  std::vector<double> radius(h * w);
  double max_radius = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      radius[y * w + x] = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
      max_radius = std::max(max_radius, radius[y * w + x]);
    }
  bundle.depth = {h, w, {}};
  for (double r : radius)
    bundle.depth.depth.push_back(static_cast<float>(max_radius > 0 ? std::clamp(1.0 - r / max_radius, 0.0, 1.0) : 1.0));

  // Caption: unit-norm pseudo-random vector keyed by (seed, id).
  {
    Rng rng = Rng::stream(seed, "caption:" + image_id);
    std::vector<double> v(config.caption_dim);
    double norm = 0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double x : v) bundle.caption.values.push_back(static_cast<float>(x / norm));
  }

  // Description: projected HR patches (informative) or seeded noise.
  const std::size_t tokens = config.description_tokens;
  const std::size_t dim = config.description_dim;
  bundle.description = {tokens, dim, {}};
  bundle.description.values.reserve(tokens * dim);
  if (informative) {
    const std::size_t side = token_grid_side(tokens);
    require(hr.extent(1) % side == 0 && hr.extent(2) % side == 0, ErrorKind::config,
            "synth_priors: HR extents not divisible by the " + std::to_string(side) + "x" + std::to_string(side) +
                " token grid");
    const std::size_t patch_dim = 3 * (hr.extent(1) / side) * (hr.extent(2) / side);
    const auto proj = description_projection(patch_dim, dim);
    for (std::size_t gy = 0; gy < side; ++gy)
      for (std::size_t gx = 0; gx < side; ++gx) {
        const auto patch = hr_patch(hr, side, gy, gx);
        for (std::size_t o = 0; o < dim; ++o) {
          double acc = 0;
          for (std::size_t i = 0; i < patch_dim; ++i) acc += proj[o * patch_dim + i] * patch[i];
          bundle.description.values.push_back(static_cast<float>(acc));
        }
      }
  } else {
    Rng rng = Rng::stream(seed, "description:" + image_id);
    for (std::size_t i = 0; i < tokens * dim; ++i) bundle.description.values.push_back(static_cast<float>(0.5 * rng.normal()));
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Tensor views and encoders

/// One-hot expansion to [1,K,H,W].
template <typename T>
Tensor<T> one_hot(const SemanticMask& mask) {
  const std::size_t plane = mask.height * mask.width;
  std::vector<T> v(mask.classes * plane, T(0));
  for (std::size_t i = 0; i < plane; ++i) v[static_cast<std::size_t>(mask.labels[i]) * plane + i] = T(1);
  return Tensor<T>({1, mask.classes, mask.height, mask.width}, std::move(v));
}

template <typename T>
Tensor<T> depth_tensor(const DepthMap& depth) {
  return Tensor<T>({1, 1, depth.height, depth.width}, std::vector<T>(depth.depth.begin(), depth.depth.end()));
}

template <typename T>
Tensor<T> caption_tensor(const CaptionEmbedding& caption) {
  return Tensor<T>({caption.values.size()}, std::vector<T>(caption.values.begin(), caption.values.end()));
}

template <typename T>
Tensor<T> description_tensor(const DescriptionEmbedding& desc) {
  return Tensor<T>({desc.tokens, desc.dim}, std::vector<T>(desc.values.begin(), desc.values.end()));
}

/// Single 3×3 conv from the one-hot mask (K channels) to C feature channels.
template <typename T>
Tensor<T> encode_mask(const SemanticMask& mask, const ConvParams<T>& encoder) {
  require(encoder.weight.extent(1) == mask.classes, ErrorKind::shape,
          "encode_mask: encoder expects " + std::to_string(encoder.weight.extent(1)) + " classes, mask has " +
              std::to_string(mask.classes));
  return encoder(one_hot<T>(mask), 1);
}

/// Single 3×3 conv from the 1-channel depth map to C feature channels.
template <typename T>
Tensor<T> encode_depth(const DepthMap& depth, const ConvParams<T>& encoder) {
  require(encoder.weight.extent(1) == 1, ErrorKind::shape, "encode_depth: encoder must take one channel");
  return encoder(depth_tensor<T>(depth), 1);
}

}  // namespace lvfsr
