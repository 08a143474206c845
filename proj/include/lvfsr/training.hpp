#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "lvfsr/adam.hpp"
#include "lvfsr/checkpoint.hpp"
#include "lvfsr/image_io.hpp"
#include "lvfsr/metrics.hpp"
#include "lvfsr/network.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/resample.hpp"
#include "lvfsr/synth_data.hpp"

namespace lvfsr {

/// Architecture knobs that cannot be read off the data.
struct NetworkSettings {
  std::size_t channels = 32;
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t mask_classes = 8;
  Variant variant = Variant::full;
};

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  std::size_t scale = 8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 100;
  std::string data_root = "data";
  /// When nonzero, overrides epochs × steps-per-epoch.
  std::size_t max_steps = 0;
  NetworkSettings network;

  AdamHyper hyper() const { return {lr, beta1, beta2, eps}; }

  void validate() const {
    require(lr > 0 && beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && eps > 0, ErrorKind::config,
            "optimizer hyperparameters must be positive (betas below 1)");
    require(epochs >= 1 && batch_size >= 1 && checkpoint_interval >= 1, ErrorKind::config,
            "epochs, batch_size and checkpoint_interval must be positive");
    require(scale == 8 || scale == 16, ErrorKind::config, "scale must be 8 or 16");
    require(!data_root.empty(), ErrorKind::config, "data_root must be set");
  }
};

// JSON: exactly the TrainConfig fields; unknown keys are errors.
inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"scale", c.scale},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"data_root", c.data_root},
          {"max_steps", c.max_steps},
          {"network",
           {{"channels", c.network.channels},
            {"blocks", c.network.blocks},
            {"heads", c.network.heads},
            {"mlp_ratio", c.network.mlp_ratio},
            {"mask_classes", c.network.mask_classes},
            {"variant", to_string(c.network.variant)}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::config, "train config must be a JSON object");
  TrainConfig c;
  auto read = [](const nlohmann::json& obj, const std::string& key, auto& field) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::config, "train config: bad type for '" + key + "'");
    }
  };
  auto read_count = [&](const nlohmann::json& obj, const std::string& key, std::size_t& field) {
    if (!obj.contains(key)) return;
    require(obj.at(key).is_number_unsigned(), ErrorKind::config,
            "train config: '" + key + "' must be a non-negative integer");
    field = obj.at(key).get<std::size_t>();
  };
  static const std::set<std::string> known{"lr", "beta1", "beta2", "eps", "epochs", "batch_size", "scale", "seed",
                                           "checkpoint_interval", "data_root", "max_steps", "network"};
  static const std::set<std::string> known_net{"channels", "blocks", "heads", "mlp_ratio", "mask_classes", "variant"};
  for (const auto& [key, _] : j.items())
    require(known.count(key) != 0, ErrorKind::config, "train config: unknown key '" + key + "'");
  read(j, "lr", c.lr);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read_count(j, "epochs", c.epochs);
  read_count(j, "batch_size", c.batch_size);
  read_count(j, "scale", c.scale);
  if (j.contains("seed")) {
    require(j.at("seed").is_number_unsigned(), ErrorKind::config, "train config: 'seed' must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  read_count(j, "checkpoint_interval", c.checkpoint_interval);
  read(j, "data_root", c.data_root);
  read_count(j, "max_steps", c.max_steps);
  if (j.contains("network")) {
    const auto& n = j.at("network");
    require(n.is_object(), ErrorKind::config, "train config: 'network' must be an object");
    for (const auto& [key, _] : n.items())
      require(known_net.count(key) != 0, ErrorKind::config, "train config: unknown key 'network." + key + "'");
    read_count(n, "channels", c.network.channels);
    read_count(n, "blocks", c.network.blocks);
    read_count(n, "heads", c.network.heads);
    read_count(n, "mlp_ratio", c.network.mlp_ratio);
    read_count(n, "mask_classes", c.network.mask_classes);
    if (n.contains("variant")) {
      std::string v;
      read(n, "variant", v);
      c.network.variant = parse_variant(v);
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::string id;
  Tensor<float> hr;
  Tensor<float> lr;
  PriorBundle priors;
};

/// LR images are always produced from HR here, never read from disk.
inline Tensor<float> degrade(const Tensor<float>& hr, std::size_t scale) {
  require(hr.rank() == 3 && hr.extent(1) % scale == 0 && hr.extent(2) % scale == 0, ErrorKind::shape,
          "HR extents " + shape_str(hr.shape()) + " not divisible by scale " + std::to_string(scale));
  return bicubic_resize(hr, hr.extent(1) / scale, hr.extent(2) / scale);
}

inline std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split, std::size_t scale,
                                      std::size_t mask_classes) {
  const auto ids = read_manifest(root / (split + ".txt"));
  require(!ids.empty(), ErrorKind::io, "dataset split '" + split + "' under " + root.string() + " is empty");
  std::vector<Sample> samples;
  for (const auto& id : ids) {
    Sample s;
    s.id = id;
    s.hr = load_ppm(root / "hr" / split / (id + ".ppm"));
    s.lr = degrade(s.hr, scale);
    s.priors = load_prior_bundle(root / "priors" / split, id, {mask_classes, s.lr.extent(1), s.lr.extent(2)});
    samples.push_back(std::move(s));
  }
  return samples;
}

inline NetworkConfig network_config_for(const NetworkSettings& settings, std::size_t scale, const Sample& sample) {
  NetworkConfig c;
  c.blocks = settings.blocks;
  c.channels = settings.channels;
  c.heads = settings.heads;
  c.mlp_ratio = settings.mlp_ratio;
  c.mask_classes = settings.mask_classes;
  c.variant = settings.variant;
  c.scale = scale;
  c.caption_dim = sample.priors.caption.values.size();
  c.description_dim = sample.priors.description.dim;
  c.lr_height = sample.lr.extent(1);
  c.lr_width = sample.lr.extent(2);
  c.validate();
  return c;
}

/// Fisher–Yates permutation of [0, n) keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "epoch:" + std::to_string(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

// ---------------------------------------------------------------------------
// Optimization

/// Mean L1 over a batch, one Adam update; returns the pre-update loss.
inline float train_step(const std::vector<const Sample*>& batch, Network<float>& net, AdamState<float>& opt,
                        const AdamHyper& hyper) {
  require(!batch.empty(), ErrorKind::state, "train_step: empty batch");
  auto& params = net.parameters();
  params.zero_grad();
  Tensor<float> total;
  for (const Sample* s : batch) {
    const Tensor<float> loss = l1_loss(net.forward(s->lr, s->priors), s->hr);
    total = total.defined() ? add(total, loss) : loss;
  }
  const Tensor<float> loss = scale(total, 1.0f / static_cast<float>(batch.size()));
  const float value = loss.item();
  require(std::isfinite(value), ErrorKind::numeric, "train_step: non-finite loss");
  backward(loss);
  adam_step(params, opt, hyper);
  return value;
}

struct EvalSummary {
  double mean_l1 = 0.0;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// Scores the network (outputs clamped to [0,1]) against HR on every sample.
inline EvalSummary evaluate(const Network<float>& net, const std::vector<Sample>& samples) {
  NoGradGuard no_grad;
  EvalSummary out;
  for (const auto& s : samples) {
    const Tensor<float> sr = net.forward(s.lr, s.priors);
    out.mean_l1 += l1_loss(sr, s.hr).item();
    std::vector<float> clamped(sr.values());
    for (auto& v : clamped) v = std::clamp(v, 0.0f, 1.0f);
    const Tensor<float> img(sr.shape(), std::move(clamped));
    out.mean_psnr += psnr(img, s.hr);
    out.mean_ssim += ssim(img, s.hr);
  }
  const double n = static_cast<double>(samples.size());
  out.mean_l1 /= n;
  out.mean_psnr /= n;
  out.mean_ssim /= n;
  return out;
}

/// The bicubic-upsampled LR image scored the same way.
inline EvalSummary evaluate_bicubic(const std::vector<Sample>& samples) {
  EvalSummary out;
  for (const auto& s : samples) {
    const Tensor<float> up = bicubic_resize(s.lr, s.hr.extent(1), s.hr.extent(2));
    double l1 = 0;
    std::vector<float> clamped(up.values());
    for (std::size_t i = 0; i < clamped.size(); ++i) {
      l1 += std::abs(static_cast<double>(up[i]) - s.hr[i]);
      clamped[i] = std::clamp(clamped[i], 0.0f, 1.0f);
    }
    const Tensor<float> img(up.shape(), std::move(clamped));
    out.mean_l1 += l1 / static_cast<double>(up.size());
    out.mean_psnr += psnr(img, s.hr);
    out.mean_ssim += ssim(img, s.hr);
  }
  const double n = static_cast<double>(samples.size());
  out.mean_l1 /= n;
  out.mean_psnr /= n;
  out.mean_ssim /= n;
  return out;
}

inline std::string format_loss(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Called after every step with (1-based step, loss).
  std::function<void(std::uint64_t, float)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<float> losses;  // losses of the steps executed by this call
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
};

/// Runs (or resumes) training. Writes `loss.log` (step, epoch, loss; one line
/// per step, deterministic), `timing.log` (step, wall milliseconds),
/// periodic `ckpt_<step>.lvck` files and `final.lvck` into `out_dir`.
inline TrainResult train_loop(const TrainConfig& cfg, const std::vector<Sample>& samples, const TrainOptions& options) {
  cfg.validate();
  require(!samples.empty(), ErrorKind::io, "train_loop: dataset is empty");
  std::error_code ec;
  std::filesystem::create_directories(options.out_dir, ec);
  require(std::filesystem::is_directory(options.out_dir), ErrorKind::io,
          "cannot create output directory " + options.out_dir.string());

  Network<float> net(network_config_for(cfg.network, cfg.scale, samples.front()), cfg.seed);
  AdamState<float> opt = AdamState<float>::zeros_like(net.parameters());
  const std::size_t n = samples.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.max_steps ? cfg.max_steps : cfg.epochs * per_epoch;

  std::uint64_t step = 0;
  const auto log_path = options.out_dir / "loss.log";
  const auto timing_path = options.out_dir / "timing.log";
  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    require(ckpt.seed == cfg.seed, ErrorKind::config,
            "resume: checkpoint seed " + std::to_string(ckpt.seed) + " != configured seed " + std::to_string(cfg.seed));
    restore_checkpoint(ckpt, net, &opt);
    step = ckpt.step;
    require(step <= total, ErrorKind::config, "resume: checkpoint step is beyond the configured run length");
    // Records past the checkpoint are recomputed, so the log is cut back to it.
    std::vector<std::string> kept;
    if (std::filesystem::exists(log_path)) {
      std::ifstream in(log_path);
      std::string line;
      while (kept.size() < step && std::getline(in, line)) kept.push_back(line);
    }
    require(kept.size() == step, ErrorKind::state,
            "resume: " + log_path.string() + " has fewer than " + std::to_string(step) + " records");
    std::string text;
    for (const auto& l : kept) text += l + "\n";
    io::write_bytes_atomic(log_path, text);
  } else {
    io::write_bytes_atomic(log_path, "");
    io::write_bytes_atomic(timing_path, "");
  }

  std::ofstream log(log_path, std::ios::app);
  std::ofstream timing(timing_path, std::ios::app);
  require(log && timing, ErrorKind::io, "cannot open logs in " + options.out_dir.string());

  TrainResult result;
  result.steps_per_epoch = per_epoch;
  result.total_steps = total;
  const AdamHyper hyper = cfg.hyper();
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  while (step < total) {
    const std::size_t epoch = step / per_epoch, pos = step % per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(cfg.seed, epoch, n);
      order_epoch = epoch;
    }
    std::vector<const Sample*> batch;
    for (std::size_t i = pos * cfg.batch_size; i < std::min(n, (pos + 1) * cfg.batch_size); ++i)
      batch.push_back(&samples[order[i]]);
    float loss;
    try {
      loss = train_step(batch, net, opt, hyper);
    } catch (const Error& e) {
      fail(e.kind(), "step " + std::to_string(step + 1) + ": " + e.what());
    }
    ++step;
    result.losses.push_back(loss);
    log << step << '\t' << epoch << '\t' << format_loss(loss) << '\n';
    log.flush();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
    timing << step << '\t' << ms.count() << '\n';
    if (options.on_step) options.on_step(step, loss);
    if (step % cfg.checkpoint_interval == 0 && step < total) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06llu.lvck", static_cast<unsigned long long>(step));
      save_checkpoint(options.out_dir / name, capture_checkpoint(net, opt, cfg.seed, step));
    }
  }
  require(static_cast<bool>(log), ErrorKind::io, "failed writing " + log_path.string());
  result.checkpoint = capture_checkpoint(net, opt, cfg.seed, step);
  save_checkpoint(options.out_dir / "final.lvck", result.checkpoint);
  return result;
}

inline TrainResult train_loop(const TrainConfig& cfg, const TrainOptions& options) {
  return train_loop(cfg, load_split(cfg.data_root, "train", cfg.scale, cfg.network.mask_classes), options);
}

}  // namespace lvfsr
