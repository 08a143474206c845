#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "lvfsr/training.hpp"
#include "test_util.hpp"

using namespace lvfsr;
using lvfsr::testing::error_kind_of;
using lvfsr::testing::TempDir;

namespace {

TrainConfig small_config(const std::filesystem::path& data) {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = 2;
  c.seed = 3;
  c.checkpoint_interval = 2;
  c.data_root = data.string();
  c.network.channels = 8;
  c.network.blocks = 1;
  c.network.heads = 2;
  return c;
}

/// A shared 4-image dataset at 32×32 (4×4 LR).
const std::vector<Sample>& dataset() {
  static const std::vector<Sample> samples = [] {
    static TempDir dir("training_data");
    SynthDataConfig cfg;
    cfg.count = 4;
    cfg.hr_size = 32;
    write_synthetic_dataset(dir.path(), cfg);
    return load_split(dir.path(), "train", 8, 8);
  }();
  return samples;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(TrainConfigJson, DefaultsMatchTheReferenceRecipe) {
  const auto c = train_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.lr, 2e-4);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.99);
  EXPECT_EQ(c.eps, 1e-8);
  EXPECT_EQ(c.scale, 8u);
  EXPECT_EQ(c.network.variant, Variant::full);
}

TEST(TrainConfigJson, RoundTripsThroughJson) {
  TrainConfig c = small_config("d");
  c.network.variant = Variant::drop_EC;
  c.max_steps = 17;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(TrainConfigJson, RejectsUnknownKeysAndBadValues) {
  using nlohmann::json;
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"learning_rate", 1e-3}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"network", {{"width", 3}}}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"lr", 0.0}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"batch_size", -1}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"scale", 4}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json{{"lr", "fast"}}); }), ErrorKind::config);
  EXPECT_EQ(error_kind_of([] { train_config_from_json(json::array()); }), ErrorKind::config);
}

TEST(TrainConfigJson, LoadReportsMissingAndMalformedFiles) {
  TempDir dir("cfg");
  EXPECT_EQ(error_kind_of([&] { load_train_config(dir / "absent.json"); }), ErrorKind::io);
  io::write_bytes_atomic(dir / "bad.json", "{ lr: ");
  EXPECT_EQ(error_kind_of([&] { load_train_config(dir / "bad.json"); }), ErrorKind::config);
}

TEST(Degrade, IsBicubicDownsampling) {
  const auto& s = dataset().front();
  EXPECT_EQ(degrade(s.hr, 8).values(), bicubic_resize(s.hr, 4, 4).values());
  EXPECT_EQ(s.lr.values(), degrade(s.hr, 8).values());
  EXPECT_EQ(error_kind_of([&] { degrade(s.hr, 16 + 8); }), ErrorKind::shape);
}

TEST(EpochOrder, IsAPureSeededPermutation) {
  for (std::size_t n : {1u, 2u, 7u, 30u}) {
    auto order = epoch_order(5, 2, n);
    EXPECT_EQ(order, epoch_order(5, 2, n));
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(order[i], i);
  }
  EXPECT_NE(epoch_order(5, 2, 30), epoch_order(5, 3, 30));
  EXPECT_NE(epoch_order(5, 2, 30), epoch_order(6, 2, 30));
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUntouched) {
  const auto& data = dataset();
  Network<float> net(network_config_for(small_config("d").network, 8, data[0]), 1);
  std::vector<std::vector<float>> before;
  for (const auto& p : net.parameters()) before.push_back(p.values());
  auto opt = AdamState<float>::zeros_like(net.parameters());
  AdamHyper hyper;
  hyper.lr = 0.0;
  train_step({&data[0], &data[1]}, net, opt, hyper);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(net.parameters()[i].values(), before[i]);
}

TEST(TrainStep, LossDecreasesOnAFixedBatch) {
  const auto& data = dataset();
  Network<float> net(network_config_for(small_config("d").network, 8, data[0]), 2);
  auto opt = AdamState<float>::zeros_like(net.parameters());
  AdamHyper hyper;
  hyper.lr = 1e-3;
  const std::vector<const Sample*> batch{&data[0], &data[1]};
  std::vector<float> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(train_step(batch, net, opt, hyper));
  EXPECT_LT(losses.back(), losses.front());
  int rises = 0;
  for (int i = 1; i < 5; ++i) rises += losses[i] > losses[i - 1];
  EXPECT_LE(rises, 1);
}

TEST(TrainLoop, LogsOneLinePerStepAndCheckpoints) {
  TempDir out("loop");
  const auto cfg = small_config("d");
  const auto r = train_loop(cfg, dataset(), {out.path(), std::nullopt, nullptr});
  EXPECT_EQ(r.steps_per_epoch, 2u);
  EXPECT_EQ(r.total_steps, 4u);
  const auto log = lines_of(out / "loss.log");
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(lines_of(out / "timing.log").size(), 4u);
  for (std::size_t i = 0; i < log.size(); ++i) {
    std::istringstream fields(log[i]);
    std::size_t step, epoch;
    float loss;
    fields >> step >> epoch >> loss;
    EXPECT_EQ(step, i + 1);
    EXPECT_EQ(epoch, i / 2);
    EXPECT_EQ(format_loss(loss), format_loss(r.losses[i]));
  }
  EXPECT_TRUE(std::filesystem::exists(out / "ckpt_000002.lvck"));
  EXPECT_FALSE(std::filesystem::exists(out / "ckpt_000004.lvck"));  // covered by final.lvck
  const auto final_ckpt = load_checkpoint(out / "final.lvck");
  EXPECT_EQ(final_ckpt.step, 4u);
  EXPECT_EQ(final_ckpt.seed, cfg.seed);
}

TEST(TrainLoop, MaxStepsOverridesEpochs) {
  TempDir out("max_steps");
  auto cfg = small_config("d");
  cfg.max_steps = 3;
  const auto r = train_loop(cfg, dataset(), {out.path(), std::nullopt, nullptr});
  EXPECT_EQ(r.losses.size(), 3u);
  EXPECT_EQ(lines_of(out / "loss.log").size(), 3u);
}

TEST(TrainLoop, IsByteIdenticalAcrossRuns) {
  TempDir a("det_a"), b("det_b");
  const auto cfg = small_config("d");
  train_loop(cfg, dataset(), {a.path(), std::nullopt, nullptr});
  train_loop(cfg, dataset(), {b.path(), std::nullopt, nullptr});
  for (const char* f : {"loss.log", "ckpt_000002.lvck", "final.lvck"})
    EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
  auto other = cfg;
  other.seed = 4;
  TempDir c("det_c");
  train_loop(other, dataset(), {c.path(), std::nullopt, nullptr});
  EXPECT_NE(io::read_file(a / "final.lvck"), io::read_file(c / "final.lvck"));
}

TEST(TrainLoop, ResumeReproducesTheUninterruptedRun) {
  TempDir full("resume_full"), part("resume_part");
  const auto cfg = small_config("d");
  train_loop(cfg, dataset(), {full.path(), std::nullopt, nullptr});
  // Run to completion, then resume the same directory from the step-2 checkpoint.
  train_loop(cfg, dataset(), {part.path(), std::nullopt, nullptr});
  const auto r = train_loop(cfg, dataset(), {part.path(), part / "ckpt_000002.lvck", nullptr});
  EXPECT_EQ(r.losses.size(), 2u);
  EXPECT_EQ(io::read_file(full / "loss.log"), io::read_file(part / "loss.log"));
  EXPECT_EQ(io::read_file(full / "final.lvck"), io::read_file(part / "final.lvck"));
}

TEST(TrainLoop, ResumeRejectsAForeignSeed) {
  TempDir out("resume_seed");
  auto cfg = small_config("d");
  train_loop(cfg, dataset(), {out.path(), std::nullopt, nullptr});
  cfg.seed = 99;
  EXPECT_EQ(error_kind_of([&] { train_loop(cfg, dataset(), {out.path(), out / "ckpt_000002.lvck", nullptr}); }),
            ErrorKind::config);
}

TEST(Evaluate, ReportsMetricsInRange) {
  const auto& data = dataset();
  Network<float> net(network_config_for(small_config("d").network, 8, data[0]), 0);
  const auto a = evaluate(net, data);
  const auto b = evaluate_bicubic(data);
  EXPECT_GT(a.mean_psnr, 5.0);
  EXPECT_GT(b.mean_psnr, 5.0);
  EXPECT_GT(a.mean_l1, 0.0);
  EXPECT_GT(b.mean_ssim, 0.0);
  EXPECT_LE(b.mean_ssim, 1.0);
}
