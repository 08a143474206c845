#include <cmath>
#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "lvfsr/image_io.hpp"
#include "lvfsr/metrics.hpp"
#include "lvfsr/resample.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace lvfsr;
using lvfsr::testing::error_kind_of;
using lvfsr::testing::error_message_of;
using lvfsr::testing::random_tensor;
using lvfsr::testing::TempDir;
using lvfsr::oracle::bicubic_oracle;
using lvfsr::oracle::keys;
using lvfsr::oracle::ssim_oracle;

// ---------------------------------------------------------------------------
// bicubic

TEST(Bicubic, KernelIsKeysWithMinusHalf) {
  for (double x : {0.0, 0.3, 1.0, 1.4, 1.99, 2.0, 3.0}) {
    EXPECT_NEAR(cubic_kernel(x), keys(x), 1e-15);
    EXPECT_NEAR(cubic_kernel(-x), keys(x), 1e-15);
  }
}

TEST(Bicubic, ConstantStaysConstant) {
  const auto img = Tensor<double>::full({3, 7, 5}, 0.37);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{7, 5}, {14, 10}, {3, 2}, {56, 40}, {1, 1}}) {
    const auto out = bicubic_resize(img, h, w);
    for (double v : out.data()) EXPECT_NEAR(v, 0.37, 1e-15);
  }
}

TEST(Bicubic, SameExtentsIsIdentity) {
  Rng rng(1);
  const auto img = random_tensor<double>(rng, {3, 6, 9}, 0, 1);
  const auto out = bicubic_resize(img, 6, 9);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out[i], img[i], 1e-15);
}

TEST(Bicubic, RampDownsizeMatchesKernelSumOracle) {
  std::vector<double> v(3 * 64);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) v[(c * 8 + y) * 8 + x] = (static_cast<double>(x + y) + c) / 17.0;
  const Tensor<double> ramp({3, 8, 8}, v);
  const auto out = bicubic_resize(ramp, 4, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x)
        EXPECT_NEAR(out[(c * 4 + y) * 4 + x], bicubic_oracle(ramp, c, y, x, 4, 4), 1e-6);
}

TEST(Bicubic, MatchesKernelSumOracleOnSeededInstances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(500 + seed);
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
    const std::size_t oh = 1 + rng.below(16), ow = 1 + rng.below(16);
    const auto img = random_tensor<double>(rng, {3, h, w}, 0, 1);
    const auto out = bicubic_resize(img, oh, ow);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x)
          ASSERT_NEAR(out[(c * oh + y) * ow + x], bicubic_oracle(img, c, y, x, oh, ow), 1e-6)
              << "seed " << seed << " " << h << "x" << w << " -> " << oh << "x" << ow;
  }
}

TEST(Bicubic, Deterministic) {
  Rng rng(2);
  const auto img = random_tensor<float>(rng, {3, 16, 16}, 0, 1);
  EXPECT_EQ(bicubic_resize(img, 2, 2).values(), bicubic_resize(img, 2, 2).values());
}

// ---------------------------------------------------------------------------
// psnr / ssim

TEST(Psnr, ClosedForms) {
  const auto zeros = Tensor<double>::zeros({3, 4, 4});
  const auto ones = Tensor<double>::full({3, 4, 4}, 1.0);
  EXPECT_EQ(psnr(ones, ones), 100.0);
  EXPECT_NEAR(psnr(zeros, ones), 0.0, 1e-12);
  EXPECT_NEAR(psnr(zeros, Tensor<double>::full({3, 4, 4}, 0.1)), 20.0, 1e-9);
  EXPECT_EQ(error_kind_of([&] { psnr(zeros, Tensor<double>::zeros({3, 4, 5})); }), ErrorKind::shape);
}

TEST(Psnr, MatchesOracleAndDecreasesWithError) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(600 + seed);
    const auto a = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
    const auto b = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
    double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.size());
    EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(mse), 1e-9);
  }
  Rng rng(1);
  const auto a = random_tensor<double>(rng, {3, 8, 8}, 0, 1);
  double previous = 1e9;
  for (double d : {0.001, 0.01, 0.05, 0.2}) {
    const double p = psnr(a, add(a, Tensor<double>::scalar(d)));
    EXPECT_LT(p, previous);
    previous = p;
  }
}

TEST(Ssim, IdentityIsExactlyOneAndSymmetric) {
  Rng rng(3);
  const auto a = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
  const auto b = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
  EXPECT_EQ(ssim(a, a), 1.0);
  EXPECT_EQ(ssim(a, b), ssim(b, a));
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
}

TEST(Ssim, MatchesPerWindowOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(700 + seed);
    const auto a = random_tensor<double>(rng, {3, 16, 16}, 0, 1);
    // Correlated pair so SSIM is far from zero.
    auto b = add(scale(a, 0.7), random_tensor<double>(rng, {3, 16, 16}, 0, 0.3));
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-6) << "seed " << seed;
  }
}

TEST(Ssim, RejectsImagesSmallerThanWindow) {
  const auto a = Tensor<double>::zeros({3, 10, 16});
  EXPECT_EQ(error_kind_of([&] { ssim(a, a); }), ErrorKind::shape);
}

// ---------------------------------------------------------------------------
// reports and eval_dir

TEST(MetricReport, MeanIsArithmeticMeanAndRoundTrips) {
  MetricReport r;
  r.records = {{"b", 30.5, 0.9}, {"a", 20.25, 0.5}, {"c", 100.0, 1.0}};
  r.metadata = {{"scale", "8"}, {"checkpoint", "final.lvck"}};
  r.finalize();
  EXPECT_EQ(r.records.front().id, "a");
  EXPECT_NEAR(r.mean_psnr, (30.5 + 20.25 + 100.0) / 3.0, 1e-9);
  EXPECT_NEAR(r.mean_ssim, (0.9 + 0.5 + 1.0) / 3.0, 1e-9);
  const std::string text = encode_report(r);
  EXPECT_EQ(encode_report(decode_report(text, "mem")), text);
  EXPECT_NE(text.find("#mean\t"), std::string::npos);
}

TEST(MetricReport, CorruptInputIsAFormatError) {
  EXPECT_EQ(error_kind_of([] { decode_report("a\t1.0\t0.5\n", "x"); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([] { decode_report("a\t1.0x\t0.5\n#mean\t1\t1\n", "x"); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([] { decode_report("a\t1.0\n#mean\t1\t1\n", "x"); }), ErrorKind::format);
}

namespace {
void write_images(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed * 100 + i);
    save_ppm(dir / ("img" + std::to_string(i) + ".ppm"), random_tensor<float>(rng, {3, 16, 16}, 0, 1));
  }
}
}  // namespace

TEST(EvalDir, IdenticalDirectoriesScorePerfectly) {
  TempDir tmp("eval");
  write_images(tmp / "gt", 1, 3);
  const auto r = eval_dir(tmp / "gt", tmp / "gt");
  ASSERT_EQ(r.records.size(), 3u);
  EXPECT_EQ(r.mean_psnr, 100.0);
  EXPECT_EQ(r.mean_ssim, 1.0);
}

TEST(EvalDir, MissingPairNamesTheId) {
  TempDir tmp("eval");
  write_images(tmp / "gt", 1, 3);
  write_images(tmp / "pred", 2, 2);
  const std::string msg = error_message_of([&] { eval_dir(tmp / "pred", tmp / "gt"); });
  EXPECT_NE(msg.find("img2"), std::string::npos) << msg;
}

TEST(EvalDir, RerunAndThreadedRunAreByteIdentical) {
  TempDir tmp("eval");
  write_images(tmp / "gt", 1, 5);
  write_images(tmp / "pred", 2, 5);
  save_report(tmp / "a.tsv", eval_dir(tmp / "pred", tmp / "gt", {{"scale", "8"}}));
  save_report(tmp / "b.tsv", eval_dir(tmp / "pred", tmp / "gt", {{"scale", "8"}}));
  ::setenv("LVFSR_THREADS", "3", 1);
  save_report(tmp / "c.tsv", eval_dir(tmp / "pred", tmp / "gt", {{"scale", "8"}}));
  ::unsetenv("LVFSR_THREADS");
  EXPECT_EQ(io::read_file(tmp / "a.tsv"), io::read_file(tmp / "b.tsv"));
  EXPECT_EQ(io::read_file(tmp / "a.tsv"), io::read_file(tmp / "c.tsv"));
  const auto back = load_report(tmp / "a.tsv");
  EXPECT_EQ(back.records.size(), 5u);
  EXPECT_EQ(back.metadata.at("scale"), "8");
}
