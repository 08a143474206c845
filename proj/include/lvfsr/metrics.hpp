#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lvfsr/image_io.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/tensor_io.hpp"

namespace lvfsr {

inline constexpr double kPsnrCap = 100.0;

/// 10·log10(max²/MSE) over every channel and pixel; 100 dB once MSE < 1e-10.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val = 1.0) {
  require(a.shape() == b.shape(), ErrorKind::shape, "psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return 10.0 * std::log10(max_val * max_val / mse);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double max_val = 1.0;
};

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double center = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - center;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// SSIM on BT.601 luma with a Gaussian window, averaged over all positions
/// where the window fits inside the image.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& opt = {}) {
  require(a.shape() == b.shape(), ErrorKind::shape, "ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(a.rank() == 3 && a.extent(0) == 3, ErrorKind::shape, "ssim expects [3,H,W] images");
  const std::size_t h = a.extent(1), w = a.extent(2), win = opt.window;
  require(h >= win && w >= win, ErrorKind::shape,
          "ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the " + std::to_string(win) +
              "-pixel window");
  const auto x = luminance(a);
  const auto y = luminance(b);
  const auto g = gaussian_window(win, opt.sigma);
  const std::size_t oh = h - win + 1, ow = w - win + 1;

  // Valid-mode separable filtering of one plane.
  auto filter = [&](const std::vector<double>& plane) {
    std::vector<double> rows(oh * w, 0.0), out(oh * ow, 0.0);
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t k = 0; k < win; ++k)
        for (std::size_t c = 0; c < w; ++c) rows[oy * w + c] += g[k] * plane[(oy + k) * w + c];
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t k = 0; k < win; ++k) out[oy * ow + ox] += g[k] * rows[oy * w + ox + k];
    return out;
  };
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mu_x = filter(x), mu_y = filter(y), e_xx = filter(xx), e_yy = filter(yy), e_xy = filter(xy);
  const double c1 = (opt.k1 * opt.max_val) * (opt.k1 * opt.max_val);
  const double c2 = (opt.k2 * opt.max_val) * (opt.k2 * opt.max_val);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_x.size(); ++i) {
    const double mxy = mu_x[i] * mu_y[i];
    const double var_x = e_xx[i] - mu_x[i] * mu_x[i];
    const double var_y = e_yy[i] - mu_y[i] * mu_y[i];
    const double cov = e_xy[i] - mxy;
    const double num = (2.0 * mxy + c1) * (2.0 * cov + c2);
    const double den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
    total += num / den;
  }
  return total / static_cast<double>(mu_x.size());
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRecord {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

/// Report file: optional `#meta<TAB>key<TAB>value` header lines, one
/// `id<TAB>psnr<TAB>ssim` line per image sorted by id, then
/// `#mean<TAB>psnr<TAB>ssim`.
struct MetricReport {
  std::vector<MetricRecord> records;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::map<std::string, std::string> metadata;

  void finalize() {
    std::sort(records.begin(), records.end(), [](const auto& l, const auto& r) { return l.id < r.id; });
    double p = 0.0, s = 0.0;
    for (const auto& r : records) {
      p += r.psnr;
      s += r.ssim;
    }
    const double n = records.empty() ? 1.0 : static_cast<double>(records.size());
    mean_psnr = p / n;
    mean_ssim = s / n;
  }
};

inline std::string format_fixed(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string encode_report(const MetricReport& report) {
  std::string out;
  for (const auto& [k, v] : report.metadata) {
    require(k.find_first_of("\t\n") == std::string::npos && v.find_first_of("\t\n") == std::string::npos,
            ErrorKind::format, "report metadata may not contain tabs or newlines");
    out += "#meta\t" + k + "\t" + v + "\n";
  }
  for (const auto& r : report.records) {
    require(!r.id.empty() && r.id[0] != '#' && r.id.find_first_of("\t\n") == std::string::npos, ErrorKind::format,
            "report id '" + r.id + "' is not representable");
    out += r.id + "\t" + format_fixed(r.psnr) + "\t" + format_fixed(r.ssim) + "\n";
  }
  out += "#mean\t" + format_fixed(report.mean_psnr) + "\t" + format_fixed(report.mean_ssim) + "\n";
  return out;
}

inline MetricReport decode_report(const std::string& text, const std::string& source) {
  MetricReport report;
  std::istringstream in(text);
  std::string line;
  bool footer = false;
  std::size_t line_no = 0;
  auto number = [&](const std::string& field) {
    char* end = nullptr;
    const double v = std::strtod(field.c_str(), &end);
    require(!field.empty() && end == field.c_str() + field.size(), ErrorKind::format,
            source + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    require(!footer, ErrorKind::format, source + ": content after the #mean footer");
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    require(fields.size() == 3, ErrorKind::format, source + ":" + std::to_string(line_no) + ": expected 3 fields");
    if (fields[0] == "#meta") {
      report.metadata[fields[1]] = fields[2];
    } else if (fields[0] == "#mean") {
      report.mean_psnr = number(fields[1]);
      report.mean_ssim = number(fields[2]);
      footer = true;
    } else {
      report.records.push_back({fields[0], number(fields[1]), number(fields[2])});
    }
  }
  require(footer, ErrorKind::format, source + ": missing #mean footer");
  return report;
}

inline void save_report(const std::filesystem::path& path, const MetricReport& report) {
  io::write_bytes_atomic(path, encode_report(report));
}

inline MetricReport load_report(const std::filesystem::path& path) {
  return decode_report(io::read_file(path), path.string());
}

/// Worker count from LVFSR_THREADS (default 1).
inline std::size_t worker_count() {
  const char* env = std::getenv("LVFSR_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  require(end && *end == '\0' && n >= 1, ErrorKind::config, std::string("LVFSR_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(n);
}

inline std::set<std::string> ppm_ids(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::io, "not a directory: " + dir.string());
  std::set<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") ids.insert(entry.path().stem().string());
  return ids;
}

/// Scores every `<id>.ppm` in `pred_dir` against the same id in `gt_dir`.
inline MetricReport eval_dir(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                             const std::map<std::string, std::string>& metadata = {}) {
  const auto pred = ppm_ids(pred_dir);
  const auto gt = ppm_ids(gt_dir);
  for (const auto& id : gt) require(pred.count(id) != 0, ErrorKind::io, "unpaired id " + id + ": no prediction");
  for (const auto& id : pred) require(gt.count(id) != 0, ErrorKind::io, "unpaired id " + id + ": no ground truth");
  require(!gt.empty(), ErrorKind::io, "no .ppm images in " + gt_dir.string());

  const std::vector<std::string> ids(gt.begin(), gt.end());
  std::vector<MetricRecord> records(ids.size());
  std::vector<std::exception_ptr> errors(ids.size());
  auto score = [&](std::size_t i) {
    try {
      const auto a = load_ppm(pred_dir / (ids[i] + ".ppm"));
      const auto b = load_ppm(gt_dir / (ids[i] + ".ppm"));
      require(a.shape() == b.shape(), ErrorKind::shape,
              ids[i] + ": prediction " + shape_str(a.shape()) + " vs ground truth " + shape_str(b.shape()));
      records[i] = {ids[i], psnr(a, b), ssim(a, b)};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(worker_count(), ids.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < ids.size(); ++i) score(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < ids.size(); i += workers) score(i);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  MetricReport report;
  report.records = std::move(records);
  report.metadata = metadata;
  report.finalize();
  return report;
}

}  // namespace lvfsr
