#pragma once

// Procedural face-like images and the on-disk dataset tree:
//   <root>/hr/<split>/<id>.ppm
//   <root>/priors/<split>/<id>.{mask,depth,cap,desc}.ten
//   <root>/<split>.txt            (one id per line)

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lvfsr/image_io.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/resample.hpp"
#include "lvfsr/rng.hpp"

namespace lvfsr {

struct SynthDataConfig {
  std::size_t count = 8;
  std::size_t hr_size = 64;
  std::size_t scale = 8;
  std::uint64_t seed = 0;
  bool informative = true;
  SynthPriorConfig priors;
};

namespace detail {
struct Ellipse {
  double cy, cx, ry, rx;
  /// Signed coverage in (0,1) with a one-pixel soft edge.
  double coverage(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    const double r = std::sqrt(dy * dy + dx * dx);
    const double edge = 1.0 / std::max(1.0, std::min(ry, rx));
    return std::clamp((1.0 - r) / edge + 0.5, 0.0, 1.0);
  }
};

using Color = std::array<double, 3>;

inline Color random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}
}  // namespace detail

/// A face-like HR image: gradient background, hair and face ellipses, eyes,
/// mouth, and a fine periodic texture (period `scale`, zero mean per period)
/// over skin and hair that bicubic downsampling almost entirely removes. The
/// texture pattern depends only on `seed`; its signed strength is per image.
inline Tensor<float> render_face(std::size_t size, std::size_t scale, std::uint64_t seed, const std::string& id) {
  using detail::Color;
  using detail::Ellipse;
  Rng rng = Rng::stream(seed, "face:" + id);
  const double s = static_cast<double>(size);

  const Color bg_top = detail::random_color(rng, 0.1, 0.9);
  const Color bg_bottom = detail::random_color(rng, 0.1, 0.9);
  const double skin_base = rng.uniform(0.45, 0.85);
  const Color skin{skin_base, skin_base * rng.uniform(0.7, 0.9), skin_base * rng.uniform(0.55, 0.8)};
  const Color hair = detail::random_color(rng, 0.05, 0.45);
  const Color lips{rng.uniform(0.5, 0.8), rng.uniform(0.15, 0.35), rng.uniform(0.2, 0.4)};

  const Ellipse face{s * rng.uniform(0.48, 0.56), s * rng.uniform(0.45, 0.55), s * rng.uniform(0.30, 0.36),
                     s * rng.uniform(0.22, 0.28)};
  const Ellipse hair_shape{face.cy - s * rng.uniform(0.06, 0.12), face.cx, face.ry * rng.uniform(1.05, 1.2),
                           face.rx * rng.uniform(1.15, 1.35)};
  const double eye_y = face.cy - face.ry * rng.uniform(0.15, 0.3);
  const double eye_dx = face.rx * rng.uniform(0.35, 0.5);
  const double eye_r = s * rng.uniform(0.035, 0.055);
  const Ellipse eye_l{eye_y, face.cx - eye_dx, eye_r * 0.7, eye_r};
  const Ellipse eye_r_shape{eye_y, face.cx + eye_dx, eye_r * 0.7, eye_r};
  const Ellipse mouth{face.cy + face.ry * rng.uniform(0.45, 0.6), face.cx, s * rng.uniform(0.025, 0.04),
                      face.rx * rng.uniform(0.3, 0.45)};

  // Texture: one tile shared by the whole dataset (two oriented sinusoids at
  // high frequency), applied with a signed per-image amplitude. The sign is
  // invisible at LR, so only the HR-derived priors can reveal it.
  const std::size_t period = std::max<std::size_t>(scale, 2);
  std::vector<double> tile(period * period);
  {
    Rng tr = Rng::stream(seed, "texture-tile");
    const double f1 = static_cast<double>(1 + tr.below(period / 2));
    const double f2 = static_cast<double>(1 + tr.below(period / 2));
    const double o1 = static_cast<double>(tr.below(period / 2 + 1));
    const double o2 = static_cast<double>(tr.below(period / 2 + 1));
    const double p1 = tr.uniform(0, 2 * M_PI), p2 = tr.uniform(0, 2 * M_PI);
    double mean = 0;
    for (std::size_t y = 0; y < period; ++y)
      for (std::size_t x = 0; x < period; ++x) {
        const double u = 2 * M_PI / static_cast<double>(period);
        const double v = std::sin(u * (f1 * static_cast<double>(x) + o1 * static_cast<double>(y)) + p1) +
                         0.6 * std::sin(u * (o2 * static_cast<double>(x) + f2 * static_cast<double>(y)) + p2);
        tile[y * period + x] = v;
        mean += v;
      }
    mean /= static_cast<double>(tile.size());
    for (auto& v : tile) v -= mean;
  }
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double skin_texture = sign * rng.uniform(0.15, 0.25);
  const double hair_texture = sign * rng.uniform(0.2, 0.3);

  std::vector<float> data(3 * size * size);
  for (std::size_t yi = 0; yi < size; ++yi)
    for (std::size_t xi = 0; xi < size; ++xi) {
      const double y = static_cast<double>(yi) + 0.5, x = static_cast<double>(xi) + 0.5;
      const double t = y / s;
      const double tex = tile[(yi % period) * period + (xi % period)];
      Color px;
      for (int c = 0; c < 3; ++c) px[c] = bg_top[c] * (1 - t) + bg_bottom[c] * t;
      auto blend = [&](const Color& col, double a, double texture) {
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1 - a) + (col[c] + texture * tex) * a;
      };
      blend(hair, hair_shape.coverage(y, x), hair_texture);
      const double shade = 1.0 - 0.25 * std::hypot((y - face.cy) / face.ry, (x - face.cx) / face.rx);
      blend({skin[0] * shade, skin[1] * shade, skin[2] * shade}, face.coverage(y, x), skin_texture);
      blend({0.08, 0.06, 0.05}, eye_l.coverage(y, x), 0.0);
      blend({0.08, 0.06, 0.05}, eye_r_shape.coverage(y, x), 0.0);
      blend(lips, mouth.coverage(y, x), 0.0);
      for (int c = 0; c < 3; ++c)
        data[(static_cast<std::size_t>(c) * size + yi) * size + xi] = static_cast<float>(std::clamp(px[c], 0.0, 1.0));
    }
  return Tensor<float>({3, size, size}, std::move(data));
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open manifest " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ids.push_back(line);
  return ids;
}

inline std::string sample_id(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return split + "_" + buf;
}

/// Writes train and test splits of `count` images each.
inline void write_synthetic_dataset(const std::filesystem::path& root, const SynthDataConfig& cfg) {
  require(cfg.scale >= 1 && cfg.hr_size % cfg.scale == 0, ErrorKind::config,
          "hr size " + std::to_string(cfg.hr_size) + " is not divisible by scale " + std::to_string(cfg.scale));
  require(cfg.count >= 1, ErrorKind::config, "count must be positive");
  const std::size_t lr_size = cfg.hr_size / cfg.scale;
  for (const std::string split : {"train", "test"}) {
    const auto hr_dir = root / "hr" / split;
    const auto prior_dir = root / "priors" / split;
    std::error_code ec;
    std::filesystem::create_directories(hr_dir, ec);
    std::filesystem::create_directories(prior_dir, ec);
    require(std::filesystem::is_directory(hr_dir) && std::filesystem::is_directory(prior_dir), ErrorKind::io,
            "cannot create dataset directories under " + root.string());
    std::string manifest;
    for (std::size_t i = 0; i < cfg.count; ++i) {
      const std::string id = sample_id(split, i);
      const std::string ppm = encode_ppm(render_face(cfg.hr_size, cfg.scale, cfg.seed, id));
      io::write_bytes_atomic(hr_dir / (id + ".ppm"), ppm);
      // Priors are derived from the 8-bit image exactly as training will see it.
      const Tensor<float> hr = decode_ppm(ppm, id);
      const Tensor<float> lr = bicubic_resize(hr, lr_size, lr_size);
      save_prior_bundle(prior_dir, synth_priors(hr, lr, cfg.seed, cfg.informative, id, cfg.priors));
      manifest += id + "\n";
    }
    io::write_bytes_atomic(root / (split + ".txt"), manifest);
  }
}

}  // namespace lvfsr
