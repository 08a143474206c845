// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lvfsr/lvfsr.hpp"
#include "oracles.hpp"

using namespace lvfsr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failures without stopping at the first one.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_++ < 5) notes_ += (notes_.empty() ? "" : "; ") + what;
  }
  bool ok() const { return failures_ == 0; }
  std::string notes() const {
    return failures_ <= 5 ? notes_ : notes_ + "; +" + std::to_string(failures_ - 5) + " more";
  }

 private:
  std::size_t failures_ = 0;
  std::string notes_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "lvfsr_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return static_cast<ErrorKind>(-1);
}

// ---------------------------------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120;
constexpr std::size_t kGradSeeds = 3;
constexpr std::size_t kNetworkEntriesPerTensor = 64;

Outcome gradient_suite() {
  double ops = 0, block = 0, net = 0;
  std::size_t cases = 0, entries = 0;
  for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    for (const auto& c : op_gradchecks(seed)) {
      ops = std::max(ops, c.result.max_rel_err);
      ++cases;
    }
    block = std::max(block, lvpfb_gradcheck(seed).max_rel_err);
    const auto r = network_gradcheck(seed, gradcheck_network_config(), 2, kNetworkEntriesPerTensor);
    net = std::max(net, r.max_rel_err);
    entries += r.entries;
  }
  const bool pass = ops < kGradTolerance && block < kGradTolerance && net < kGradTolerance;
  return {pass, "ops " + fmt("%.2e", ops) + " over " + std::to_string(cases) + " cases, lvpfb " + fmt("%.2e", block) +
                    ", network " + fmt("%.2e", net) + " over " + std::to_string(entries) + " entries"};
}

// ---------------------------------------------------------------------------

constexpr std::uint64_t kOracleInstances = 20;
constexpr double kOracleBudgetSeconds = 60;

Outcome oracle_suite() {
  Check check;
  for (std::uint64_t seed = 0; seed < kOracleInstances; ++seed) {
    const std::string at = " seed " + std::to_string(seed);
    {
      Rng rng(1000 + seed);
      const std::size_t ci = 1 + rng.below(4), co = 1 + rng.below(4), k = 1 + 2 * rng.below(2);
      const std::size_t h = k + rng.below(8 - k + 1), w = k + rng.below(8 - k + 1);
      const std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
      const auto x = random_tensor<double>(rng, {1 + rng.below(2), ci, h, w});
      const auto wt = random_tensor<double>(rng, {co, ci, k, k});
      const auto b = random_tensor<double>(rng, {co});
      const auto y = conv2d(x, wt, b, stride, pad);
      const auto ref = oracle::conv_oracle(x, wt, b, stride, pad);
      check.expect(y.size() == ref.size(), "conv2d size" + at);
      for (std::size_t i = 0; i < ref.size() && i < y.size(); ++i)
        check.expect(rel_diff(y[i], ref[i]) < 1e-6, "conv2d" + at);
    }
    {
      Rng rng(2000 + seed);
      const std::size_t rows = 1 + rng.below(8), din = 1 + rng.below(8), dout = 1 + rng.below(8);
      const auto x = random_tensor<double>(rng, {rows, din});
      const auto w = random_tensor<double>(rng, {dout, din});
      const auto b = random_tensor<double>(rng, {dout});
      const auto y = linear(x, w, b);
      const auto ref = oracle::linear_oracle(x.values(), w.values(), b.values(), rows, din, dout);
      for (std::size_t i = 0; i < ref.size(); ++i) check.expect(rel_diff(y[i], ref[i]) < 1e-6, "linear" + at);
    }
    {
      Rng rng(3000 + seed);
      const Shape shape{1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(5)};
      const std::size_t axis = rng.below(3);
      const auto x = random_tensor<double>(rng, shape, -10, 10);
      const auto y = softmax(x, axis);
      const auto ref = oracle::softmax_oracle(x.values(), shape, axis);
      for (std::size_t i = 0; i < ref.size(); ++i) check.expect(std::abs(y[i] - ref[i]) < 1e-6, "softmax" + at);
    }
    {
      Rng rng(4000 + seed);
      const std::size_t heads = 1 + rng.below(2);
      const std::size_t t = 1 + rng.below(6), s = 1 + rng.below(8);
      const std::size_t d = heads * (1 + rng.below(4)), dv = heads * (1 + rng.below(4));
      const auto q = random_tensor<double>(rng, {t, d}, -2, 2);
      const auto k = random_tensor<double>(rng, {s, d}, -2, 2);
      const auto v = random_tensor<double>(rng, {s, dv});
      const auto y = scaled_dot_attention(q, k, v, heads);
      const auto ref = oracle::attention_oracle(q.values(), k.values(), v.values(), t, s, d, dv, heads);
      for (std::size_t i = 0; i < ref.size(); ++i) check.expect(std::abs(y[i] - ref[i]) < 1e-5, "attention" + at);
    }
    {
      Rng rng(5000 + seed);
      const std::size_t h = 2 + rng.below(12), w = 2 + rng.below(12);
      const std::size_t oh = 1 + rng.below(16), ow = 1 + rng.below(16);
      const auto img = random_tensor<double>(rng, {3, h, w}, 0, 1);
      const auto out = bicubic_resize(img, oh, ow);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x)
            check.expect(std::abs(out[(c * oh + y) * ow + x] - oracle::bicubic_oracle(img, c, y, x, oh, ow)) < 1e-6,
                         "bicubic" + at);
    }
    {
      Rng rng(6000 + seed);
      const auto a = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
      const auto b = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
      double mse = 0;
      for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
      mse /= static_cast<double>(a.size());
      check.expect(std::abs(psnr(a, b) - (-10.0 * std::log10(mse))) < 1e-9, "psnr" + at);
    }
    {
      Rng rng(7000 + seed);
      const auto a = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
      const auto b = add(scale(a, 0.5 + 0.5 * rng.uniform()), random_tensor<double>(rng, {3, 16, 16}, 0, 0.4));
      check.expect(std::abs(ssim(a, b) - oracle::ssim_oracle(a, b)) < 1e-6, "ssim" + at);
    }
  }
  return {check.ok(), check.ok() ? "7 ops x " + std::to_string(kOracleInstances) + " instances" : check.notes()};
}

// ---------------------------------------------------------------------------

PriorBundle random_bundle(Rng& rng, const NetworkConfig& c, std::size_t tokens) {
  return random_prior_bundle(rng, c, tokens, "probe");
}

Outcome identity_at_init() {
  Check check;
  std::size_t comparisons = 0;
  for (const Variant v : {Variant::full, Variant::drop_FS, Variant::drop_FD, Variant::drop_EC, Variant::drop_ED}) {
    NetworkConfig c;
    c.variant = v;
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
      Network<float> net(c, seed);
      Rng rng(100 + seed);
      const auto lr = random_tensor<float>(rng, {3, c.lr_height, c.lr_width}, 0, 1);
      const auto ref = net.forward(lr, random_bundle(rng, c, 16));
      for (std::size_t tokens : {1u, 4u, 16u, 77u}) {
        const auto out = net.forward(lr, random_bundle(rng, c, tokens));
        check.expect(out.values() == ref.values(), to_string(v) + " seed " + std::to_string(seed) + " tokens " +
                                                       std::to_string(tokens));
        ++comparisons;
      }
    }
  }
  return {check.ok(), check.ok() ? std::to_string(comparisons) + " bundle substitutions bit-identical" : check.notes()};
}

// ---------------------------------------------------------------------------

constexpr double kOverfitGainDb = 3.0;
constexpr double kOverfitBudgetSeconds = 600;

Outcome overfit_run() {
  const fs::path root = scratch("overfit");
  SynthDataConfig data;
  data.count = 8;
  data.hr_size = 64;
  data.scale = 8;
  write_synthetic_dataset(root / "data", data);
  const auto samples = load_split(root / "data", "train", 8, 8);
  TrainConfig cfg;  // reference recipe: lr 2e-4, Adam (0.9, 0.99), batch 4, C=32, L=3
  cfg.max_steps = 500;
  cfg.checkpoint_interval = 500;
  cfg.data_root = (root / "data").string();
  const auto run = train_loop(cfg, samples, {root / "run", std::nullopt, nullptr});
  Network<float> net(run.checkpoint.config, cfg.seed);
  restore_checkpoint(run.checkpoint, net);
  const double model = evaluate(net, samples).mean_psnr;
  const double bicubic = evaluate_bicubic(samples).mean_psnr;
  return {model - bicubic >= kOverfitGainDb, "train PSNR " + fmt("%.3f", model) + " dB vs bicubic " +
                                                  fmt("%.3f", bicubic) + " dB (gain " + fmt("%+.3f", model - bicubic) +
                                                  " dB, need >= 3) after " + std::to_string(run.checkpoint.step) +
                                                  " steps"};
}

// ---------------------------------------------------------------------------

constexpr double kAblationReduction = 0.20;
constexpr double kAblationBudgetSeconds = 1800;

Outcome ablation() {
  const fs::path root = scratch("ablation");
  write_synthetic_dataset(root / "data", ablation_data_config());
  const TrainConfig cfg = ablation_train_config();
  const auto samples = load_split(root / "data", "train", cfg.scale, cfg.network.mask_classes);
  AblationOptions opt;
  opt.variants = {"model1_no_prior", "drop_ED", "full"};
  opt.steps = 300;
  opt.seeds = 3;
  opt.work_dir = root / "runs";
  const auto r = run_ablation(cfg, samples, opt);
  const double m1 = r.of("model1_no_prior").median_loss;
  const double ed = r.of("drop_ED").median_loss;
  const double full = r.of("full").median_loss;
  const double reduction = 1.0 - full / m1;
  const bool pass = reduction >= kAblationReduction && full < ed && ed < m1;
  return {pass, "median train L1 model1 " + fmt("%.5f", m1) + ", drop_ED " + fmt("%.5f", ed) + ", full " +
                    fmt("%.5f", full) + " (reduction " + fmt("%.1f", 100 * reduction) + "%, need >= 20%)"};
}

// ---------------------------------------------------------------------------

Outcome determinism() {
  const fs::path root = scratch("determinism");
  SynthDataConfig data;
  data.count = 4;
  data.hr_size = 32;
  write_synthetic_dataset(root / "data", data);
  const auto samples = load_split(root / "data", "train", 8, 8);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  cfg.checkpoint_interval = 2;
  cfg.seed = 11;
  cfg.network.channels = 8;
  cfg.network.blocks = 2;
  cfg.network.heads = 2;
  cfg.data_root = (root / "data").string();
  train_loop(cfg, samples, {root / "a", std::nullopt, nullptr});
  train_loop(cfg, samples, {root / "b", std::nullopt, nullptr});
  train_loop(cfg, samples, {root / "c", std::nullopt, nullptr});
  train_loop(cfg, samples, {root / "c", root / "c" / "ckpt_000002.lvck", nullptr});
  Check check;
  for (const char* f : {"loss.log", "ckpt_000002.lvck", "ckpt_000004.lvck", "final.lvck"}) {
    check.expect(io::read_file(root / "a" / f) == io::read_file(root / "b" / f), std::string("rerun differs: ") + f);
    check.expect(io::read_file(root / "a" / f) == io::read_file(root / "c" / f), std::string("resume differs: ") + f);
  }
  return {check.ok(), check.ok() ? "rerun and resume-from-step-2 byte-identical over 6 steps" : check.notes()};
}

// ---------------------------------------------------------------------------

Outcome format_round_trips() {
  const fs::path root = scratch("formats");
  Check check;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Shape shape;
    for (std::size_t r = 0, rank = 1 + rng.below(4); r < rank; ++r) shape.push_back(1 + rng.below(6));
    const auto t = random_tensor<float>(rng, shape, -1e4, 1e4);
    save_tensor(root / "t.ten", t);
    const std::string bytes = io::read_file(root / "t.ten");
    const auto back = load_tensor<float>(root / "t.ten");
    check.expect(encode_tensor(back) == bytes && back.values() == t.values(), ".ten round trip");
  }
  {
    std::string bad = encode_tensor(Tensor<float>({2, 2}, {1, 2, 3, 4}));
    bad[0] = 'X';
    check.expect(kind_of([&] { decode_tensor<float>(bad); }) == ErrorKind::format, ".ten bad magic");
  }

  const NetworkConfig net_cfg = gradcheck_network_config();
  {
    Rng rng(5);
    const PriorBundle bundle = random_prior_bundle(rng, net_cfg, 3, "face_0001");
    fs::create_directories(root / "priors");
    fs::create_directories(root / "priors2");
    save_prior_bundle(root / "priors", bundle);
    const auto files = prior_files(root / "priors", bundle.image_id);
    const std::string first = io::read_file(files.mask) + io::read_file(files.depth) + io::read_file(files.caption) +
                              io::read_file(files.description);
    const PriorBundle back = load_prior_bundle(root / "priors", bundle.image_id, {net_cfg.mask_classes});
    check.expect(back == bundle, "PriorBundle value round trip");
    save_prior_bundle(root / "priors2", back);
    const auto files2 = prior_files(root / "priors2", bundle.image_id);
    check.expect(first == io::read_file(files2.mask) + io::read_file(files2.depth) + io::read_file(files2.caption) +
                              io::read_file(files2.description),
                 "PriorBundle byte round trip");
    std::string bad = io::read_file(files.depth);
    bad[1] = '?';
    io::write_bytes_atomic(files.depth, bad);
    check.expect(kind_of([&] { load_prior_bundle(root / "priors", bundle.image_id, {net_cfg.mask_classes}); }) ==
                     ErrorKind::format,
                 "PriorBundle corrupt header");
  }
  {
    Network<float> net(net_cfg, 3);
    auto opt = AdamState<float>::zeros_like(net.parameters());
    const std::string bytes = encode_checkpoint(capture_checkpoint(net, opt, 3, 17));
    save_checkpoint(root / "c.lvck", decode_checkpoint(bytes, "mem"));
    check.expect(io::read_file(root / "c.lvck") == bytes, "Checkpoint byte round trip");
    std::string bad = bytes;
    bad[2] = 'Z';
    check.expect(kind_of([&] { decode_checkpoint(bad, "mem"); }) == ErrorKind::format, "Checkpoint bad magic");
    check.expect(kind_of([&] { decode_checkpoint(bytes.substr(0, 10), "mem"); }) == ErrorKind::format,
                 "Checkpoint truncated header");
  }
  {
    MetricReport report;
    report.records = {{"a", 31.25, 0.875}, {"b", 27.5, 0.6171875}};
    report.mean_psnr = 29.375;
    report.mean_ssim = 0.74609375;
    save_report(root / "r.tsv", report);
    const std::string bytes = io::read_file(root / "r.tsv");
    check.expect(encode_report(load_report(root / "r.tsv")) == bytes, "MetricReport byte round trip");
    check.expect(kind_of([&] { decode_report("#mean\tnope\n", "mem"); }) == ErrorKind::format,
                 "MetricReport corrupt line");
  }
  return {check.ok(), check.ok() ? ".ten, PriorBundle, Checkpoint, MetricReport byte-exact; corruption -> format errors"
                                 : check.notes()};
}

struct Criterion {
  std::string name;
  double budget_seconds;  // 0: no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

// Optional arguments restrict the run to the named criteria.
int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"gradient_suite", kGradBudgetSeconds, gradient_suite},
      {"oracle_suite", kOracleBudgetSeconds, oracle_suite},
      {"identity_at_init", 0, identity_at_init},
      {"overfit_run", kOverfitBudgetSeconds, overfit_run},
      {"prior_utility_ablation", kAblationBudgetSeconds, ablation},
      {"determinism", 0, determinism},
      {"format_round_trips", 0, format_round_trips},
  };
  const std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt("%.1fs", seconds);
    if (c.budget_seconds > 0) {
      timing += fmt(" of %.0fs budget", c.budget_seconds);
      if (seconds >= c.budget_seconds) out.pass = false;
    }
    std::printf("%s %s: %s [%s]\n", out.pass ? "PASS" : "FAIL", c.name.c_str(), out.detail.c_str(), timing.c_str());
    std::fflush(stdout);
    failures += !out.pass;
  }
  std::error_code ec;
  fs::remove_all(fs::temp_directory_path() / "lvfsr_acceptance", ec);
  std::printf("%d of %d criteria passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
