#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lvfsr/synth_data.hpp"
#include "lvfsr/training.hpp"

namespace lvfsr {

/// Builds the network for an ablation tag on top of `cfg`.
inline Network<float> build_variant(const std::string& tag, NetworkConfig cfg, std::uint64_t seed) {
  cfg.variant = parse_variant(tag);
  cfg.validate();
  return Network<float>(cfg, seed);
}

/// Training recipe for the prior-utility sweep: a higher learning rate than
/// the reference recipe so 300 steps separate the variants clearly.
inline TrainConfig ablation_train_config() {
  TrainConfig c;
  c.lr = 2e-3;
  c.batch_size = 4;
  c.network.channels = 32;
  c.network.blocks = 3;
  return c;
}

/// Informative synthetic data for the sweep. 32 images are enough that a
/// prior-free network cannot memorize each image's texture sign.
inline SynthDataConfig ablation_data_config() {
  SynthDataConfig c;
  c.count = 32;
  c.hr_size = 64;
  c.scale = 8;
  c.informative = true;
  return c;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t parameters = 0;
  double final_loss = 0.0;  // mean training L1 after the last step
  double train_psnr = 0.0;
};

struct AblationSummary {
  std::string variant;
  double median_loss = 0.0;
  double median_psnr = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationSummary> summary;

  const AblationSummary& of(const std::string& variant) const {
    for (const auto& s : summary)
      if (s.variant == variant) return s;
    fail(ErrorKind::usage, "no ablation result for variant '" + variant + "'");
  }
};

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorKind::range, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct AblationOptions {
  std::vector<std::string> variants{"model1_no_prior", "model2_concat", "full"};
  std::size_t steps = 300;
  std::size_t seeds = 3;
  std::uint64_t base_seed = 0;
  /// Where per-run logs and checkpoints go; empty means a temp directory.
  std::filesystem::path work_dir;
  std::function<void(const AblationRow&)> on_row;
};

/// Trains every (variant, seed) pair for `steps` steps on `samples` and scores
/// the final network on the same samples. Seeds are base_seed, base_seed+1, ...
inline AblationResult run_ablation(const TrainConfig& base, const std::vector<Sample>& samples,
                                   const AblationOptions& opt) {
  require(!opt.variants.empty() && opt.seeds >= 1 && opt.steps >= 1, ErrorKind::usage,
          "ablation needs at least one variant, seed and step");
  const auto work = opt.work_dir.empty() ? std::filesystem::temp_directory_path() / "lvfsr_ablation" : opt.work_dir;
  AblationResult result;
  for (const auto& tag : opt.variants) {
    const Variant variant = parse_variant(tag);
    std::vector<double> losses, psnrs;
    for (std::size_t k = 0; k < opt.seeds; ++k) {
      TrainConfig cfg = base;
      cfg.network.variant = variant;
      cfg.seed = opt.base_seed + k;
      cfg.max_steps = opt.steps;
      cfg.checkpoint_interval = opt.steps;
      TrainOptions to;
      to.out_dir = work / (to_string(variant) + "_seed" + std::to_string(cfg.seed));
      const TrainResult run = train_loop(cfg, samples, to);
      Network<float> net(run.checkpoint.config, cfg.seed);
      restore_checkpoint(run.checkpoint, net);
      const EvalSummary eval = evaluate(net, samples);
      AblationRow row{to_string(variant), cfg.seed, net.parameters().scalar_count(), eval.mean_l1, eval.mean_psnr};
      if (opt.on_row) opt.on_row(row);
      losses.push_back(row.final_loss);
      psnrs.push_back(row.train_psnr);
      result.rows.push_back(std::move(row));
    }
    result.summary.push_back({to_string(variant), median(losses), median(psnrs)});
  }
  return result;
}

/// Tab-separated table: one row per (variant, seed), then `#median` rows.
inline std::string encode_ablation(const AblationResult& r) {
  std::string out = "variant\tseed\tparameters\ttrain_l1\ttrain_psnr\n";
  for (const auto& row : r.rows)
    out += row.variant + "\t" + std::to_string(row.seed) + "\t" + std::to_string(row.parameters) + "\t" +
           format_fixed(row.final_loss) + "\t" + format_fixed(row.train_psnr) + "\n";
  for (const auto& s : r.summary)
    out += "#median\t" + s.variant + "\t\t" + format_fixed(s.median_loss) + "\t" + format_fixed(s.median_psnr) + "\n";
  return out;
}

}  // namespace lvfsr
