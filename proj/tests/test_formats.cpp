#include <cstring>
#include <fstream>

#include <gtest/gtest.h>

#include "lvfsr/checkpoint.hpp"
#include "lvfsr/image_io.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/tensor_io.hpp"
#include "test_util.hpp"

using namespace lvfsr;
using lvfsr::testing::error_kind_of;
using lvfsr::testing::error_message_of;
using lvfsr::testing::random_tensor;
using lvfsr::testing::TempDir;

namespace {

std::size_t count_entries(const std::filesystem::path& dir) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++n;
  return n;
}

PriorBundle sample_bundle(std::uint64_t seed, std::size_t h = 4, std::size_t w = 4) {
  Rng rng(seed);
  const auto hr = random_tensor<float>(rng, {3, 8 * h, 8 * w}, 0, 1);
  const auto lr = random_tensor<float>(rng, {3, h, w}, 0, 1);
  return synth_priors(hr, lr, seed, true, "img" + std::to_string(seed));
}

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.blocks = 1;
  c.channels = 4;
  c.heads = 2;
  c.caption_dim = 6;
  c.description_dim = 5;
  c.mask_classes = 3;
  c.lr_height = 2;
  c.lr_width = 2;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// .ten

TEST(TenFormat, LayoutIsLittleEndianMagicRankExtentsValues) {
  const Tensor<float> t({2, 1}, {1.0f, -2.5f});
  const std::string bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 4u + 4 + 8 + 8);
  EXPECT_EQ(bytes.substr(0, 4), "LVT1");
  const unsigned char expected[] = {2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  EXPECT_EQ(std::memcmp(bytes.data() + 4, expected, sizeof expected), 0);
}

TEST(TenFormat, RoundTripsByteExactly) {
  TempDir tmp("ten");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Shape shape;
    for (std::size_t r = 0, rank = 1 + rng.below(4); r < rank; ++r) shape.push_back(1 + rng.below(5));
    const auto t = random_tensor<float>(rng, shape, -1e3, 1e3);
    save_tensor(tmp / "t.ten", t);
    const auto back = load_tensor<float>(tmp / "t.ten");
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(std::memcmp(back.values().data(), t.values().data(), t.size() * sizeof(float)), 0);
    EXPECT_EQ(encode_tensor(back), io::read_file(tmp / "t.ten"));
  }
}

TEST(TenFormat, CorruptionIsAStructuredFormatError) {
  const std::string good = encode_tensor(Tensor<float>({2, 3}, std::vector<float>(6, 0.5f)));
  std::string bad_magic = good;
  bad_magic[3] = '2';
  EXPECT_EQ(error_kind_of([&] { decode_tensor(bad_magic); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([&] { decode_tensor(good.substr(0, good.size() - 1)); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([&] { decode_tensor(good + "x"); }), ErrorKind::format);
  std::string zero_extent = good;
  zero_extent[8] = 0;
  EXPECT_EQ(error_kind_of([&] { decode_tensor(zero_extent); }), ErrorKind::format);
  std::string huge_rank = good;
  huge_rank[4] = 100;
  EXPECT_EQ(error_kind_of([&] { decode_tensor(huge_rank); }), ErrorKind::format);
}

TEST(AtomicWrite, FailedWriterLeavesNoFile) {
  TempDir tmp("atomic");
  EXPECT_THROW(io::write_file_atomic(tmp / "out.ten",
                                     [](std::ostream& os) {
                                       os << "partial";
                                       throw std::runtime_error("interrupted");
                                     }),
               std::runtime_error);
  EXPECT_FALSE(std::filesystem::exists(tmp / "out.ten"));
  EXPECT_EQ(count_entries(tmp.path()), 0u);
}

TEST(AtomicWrite, FailedRewriteKeepsPreviousContents) {
  TempDir tmp("atomic");
  io::write_bytes_atomic(tmp / "f", "old");
  EXPECT_ANY_THROW(io::write_file_atomic(tmp / "f", [](std::ostream&) { throw std::runtime_error("x"); }));
  EXPECT_EQ(io::read_file(tmp / "f"), "old");
  EXPECT_EQ(count_entries(tmp.path()), 1u);
}

TEST(AtomicWrite, UnwritableDirectoryIsAnIoError) {
  EXPECT_EQ(error_kind_of([] { io::write_bytes_atomic("/nonexistent_dir_lvfsr/x.ten", "x"); }), ErrorKind::io);
  EXPECT_EQ(error_kind_of([] { io::read_file("/nonexistent_dir_lvfsr/x.ten"); }), ErrorKind::io);
}

// ---------------------------------------------------------------------------
// PPM

TEST(Ppm, RoundTripsEightBitImages) {
  Rng rng(4);
  std::vector<float> v(3 * 5 * 7);
  for (auto& x : v) x = static_cast<float>(rng.below(256)) / 255.0f;
  const Tensor<float> img({3, 5, 7}, v);
  const std::string bytes = encode_ppm(img);
  EXPECT_EQ(bytes.substr(0, 3), "P6\n");
  const auto back = decode_ppm(bytes, "mem");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(back.values(), img.values());
  EXPECT_EQ(encode_ppm(back), bytes);
}

TEST(Ppm, RejectsUnsupportedHeaders) {
  EXPECT_EQ(error_kind_of([] { decode_ppm("P5\n1 1\n255\n\x01", "x"); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([] { decode_ppm("P6\n1 1\n65535\n\x01\x01\x01\x01\x01\x01", "x"); }), ErrorKind::format);
  EXPECT_EQ(error_kind_of([] { decode_ppm("P6\n2 1\n255\n\x01\x01\x01", "x"); }), ErrorKind::format);
}

// ---------------------------------------------------------------------------
// PriorBundle

TEST(PriorBundleFormat, SaveLoadRoundTripsBitExactly) {
  TempDir tmp("priors");
  const auto bundle = sample_bundle(1);
  save_prior_bundle(tmp.path(), bundle);
  EXPECT_EQ(load_prior_bundle(tmp.path(), bundle.image_id), bundle);
  const auto files = prior_files(tmp.path(), bundle.image_id);
  const std::string first = io::read_file(files.description);
  save_prior_bundle(tmp.path(), bundle);
  EXPECT_EQ(io::read_file(files.description), first);
  EXPECT_EQ(count_entries(tmp.path()), 4u);
}

TEST(PriorBundleFormat, DepthOutOfRangeNamesTheFile) {
  TempDir tmp("priors");
  const auto bundle = sample_bundle(2);
  save_prior_bundle(tmp.path(), bundle);
  const auto files = prior_files(tmp.path(), bundle.image_id);
  std::vector<float> depth(bundle.depth.depth);
  depth[3] = 1.5f;
  save_tensor(files.depth, Tensor<float>({4, 4}, depth));
  const std::string msg = error_message_of([&] { load_prior_bundle(tmp.path(), bundle.image_id); });
  EXPECT_NE(msg.find(files.depth.string()), std::string::npos) << msg;
  EXPECT_EQ(error_kind_of([&] { load_prior_bundle(tmp.path(), bundle.image_id); }), ErrorKind::range);
}

TEST(PriorBundleFormat, MaskLabelOutOfRange) {
  TempDir tmp("priors");
  const auto bundle = sample_bundle(3);
  save_prior_bundle(tmp.path(), bundle);
  std::vector<float> labels(16, 0.0f);
  labels[0] = 8.0f;
  save_tensor(prior_files(tmp.path(), bundle.image_id).mask, Tensor<float>({4, 4}, labels));
  EXPECT_EQ(error_kind_of([&] { load_prior_bundle(tmp.path(), bundle.image_id); }), ErrorKind::range);
}

TEST(PriorBundleFormat, ExtentMismatchWithLrImage) {
  TempDir tmp("priors");
  const auto bundle = sample_bundle(4, 16, 16);
  save_prior_bundle(tmp.path(), bundle);
  EXPECT_EQ(error_kind_of([&] { load_prior_bundle(tmp.path(), bundle.image_id, {8, 32, 32}); }), ErrorKind::shape);
  EXPECT_NO_THROW(load_prior_bundle(tmp.path(), bundle.image_id, {8, 16, 16}));
}

TEST(PriorBundleFormat, MissingFileAndWrongRank) {
  TempDir tmp("priors");
  const auto bundle = sample_bundle(5);
  save_prior_bundle(tmp.path(), bundle);
  const auto files = prior_files(tmp.path(), bundle.image_id);
  save_tensor(files.caption, Tensor<float>({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(error_kind_of([&] { load_prior_bundle(tmp.path(), bundle.image_id); }), ErrorKind::shape);
  std::filesystem::remove(files.caption);
  EXPECT_EQ(error_kind_of([&] { load_prior_bundle(tmp.path(), bundle.image_id); }), ErrorKind::io);
}

// ---------------------------------------------------------------------------
// Checkpoint

TEST(CheckpointFormat, RoundTripReproducesForwardBitExactly) {
  TempDir tmp("ckpt");
  const NetworkConfig cfg = tiny_config();
  Network<float> net(cfg, 9);
  // Perturb every parameter (including the zero-initialized ones).
  Rng rng(1);
  for (auto& p : net.parameters())
    for (auto& v : p.mutable_data()) v += static_cast<float>(rng.uniform(-0.1, 0.1));
  AdamState<float> opt = AdamState<float>::zeros_like(net.parameters());
  opt.step = 17;
  opt.first_moment[0][0] = 0.25f;
  opt.second_moment[1][0] = 0.5f;

  Rng data(2);
  const auto lr = random_tensor<float>(data, {3, 2, 2}, 0, 1);
  SynthPriorConfig pc{3, 6, 5, 4};
  const auto bundle = synth_priors(random_tensor<float>(data, {3, 16, 16}, 0, 1), lr, 0, true, "x", pc);
  const auto before = net.forward(lr, bundle).values();

  save_checkpoint(tmp / "a.lvck", capture_checkpoint(net, opt, 9, 42));
  const Checkpoint loaded = load_checkpoint(tmp / "a.lvck");
  EXPECT_EQ(loaded.seed, 9u);
  EXPECT_EQ(loaded.step, 42u);
  EXPECT_EQ(loaded.config, cfg);
  Network<float> fresh(cfg, 123);
  AdamState<float> restored;
  restore_checkpoint(loaded, fresh, &restored);
  EXPECT_EQ(fresh.forward(lr, bundle).values(), before);
  EXPECT_EQ(restored.step, 17u);
  EXPECT_EQ(restored.first_moment, opt.first_moment);
  EXPECT_EQ(restored.second_moment, opt.second_moment);

  save_checkpoint(tmp / "b.lvck", capture_checkpoint(fresh, restored, 9, 42));
  EXPECT_EQ(io::read_file(tmp / "a.lvck"), io::read_file(tmp / "b.lvck"));
}

TEST(CheckpointFormat, CorruptionIsStructured) {
  Network<float> net(tiny_config(), 0);
  const std::string good = encode_checkpoint(capture_checkpoint(net, AdamState<float>::zeros_like(net.parameters()), 0, 0));
  EXPECT_NO_THROW(decode_checkpoint(good, "mem"));
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(error_kind_of([&] { decode_checkpoint(magic, "mem"); }), ErrorKind::format);
  std::string version = good;
  version[4] = 2;
  const std::string msg = error_message_of([&] { decode_checkpoint(version, "mem"); });
  EXPECT_NE(msg.find("version"), std::string::npos);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, good.size() / 2, good.size() - 1})
    EXPECT_EQ(error_kind_of([&] { decode_checkpoint(good.substr(0, cut), "mem"); }), ErrorKind::format) << cut;
  EXPECT_EQ(error_kind_of([&] { decode_checkpoint(good + "!", "mem"); }), ErrorKind::format);
}

TEST(CheckpointFormat, RefusesMismatchedConfig) {
  Network<float> net(tiny_config(), 0);
  const auto ckpt = capture_checkpoint(net, AdamState<float>::zeros_like(net.parameters()), 0, 0);
  NetworkConfig other = tiny_config();
  other.channels = 6;
  Network<float> wider(other, 0);
  EXPECT_EQ(error_kind_of([&] { restore_checkpoint(ckpt, wider); }), ErrorKind::config);
}

TEST(CheckpointFormat, ConfigTextRoundTrips) {
  NetworkConfig c = tiny_config();
  c.variant = Variant::drop_ED;
  EXPECT_EQ(NetworkConfig::from_canonical_text(c.canonical_text()), c);
  EXPECT_EQ(error_kind_of([] { NetworkConfig::from_canonical_text("blocks=x\n"); }), ErrorKind::format);
}
