#pragma once

// Canned gradient checks shared by the CLI and the acceptance runner: every
// differentiable op, one fusion block, and a whole network, all in double.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lvfsr/fusion.hpp"
#include "lvfsr/gradcheck.hpp"
#include "lvfsr/network.hpp"

namespace lvfsr {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline Tensor<double> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

inline Tensor<double> uniform_param(Rng& rng, const std::string& name, Shape shape, double lo = -1, double hi = 1) {
  auto t = uniform_tensor(rng, shape, lo, hi);
  return Tensor<double>::parameter(name, std::move(shape), t.values());
}

/// Scalarizes `build` as mean(y ⊙ probe) with a fixed random probe, so no
/// gradient is trivially uniform. The mean keeps the loss O(1), which keeps
/// finite-difference round-off well under the relative-error floor.
inline GradCheckResult probe_check(ParameterSet<double>& params, std::uint64_t seed,
                                   const std::function<Tensor<double>(ParameterSet<double>&)>& build) {
  Rng weights = Rng::stream(seed, "gradcheck-probe");
  Tensor<double> probe;
  return grad_check_detailed(params, [&](ParameterSet<double>& p) {
    const Tensor<double> y = build(p);
    if (!probe.defined() || probe.shape() != y.shape()) probe = uniform_tensor(weights, y.shape(), -1, 1);
    return mean(mul(y, probe));
  });
}

/// Overwrites every parameter with U(-bound, bound) so zero-initialized
/// projections carry gradient too.
inline void scramble(ParameterSet<double>& params, std::uint64_t seed, double bound) {
  Rng rng = Rng::stream(seed, "gradcheck-params");
  for (auto& p : params)
    for (auto& v : p.mutable_data()) v = rng.uniform(-bound, bound);
}

}  // namespace detail

/// One case per differentiable op (or small op group) at seed `seed`.
inline std::vector<GradCheckCase> op_gradchecks(std::uint64_t seed) {
  using P = ParameterSet<double>;
  std::vector<GradCheckCase> out;
  Rng rng = Rng::stream(seed, "gradcheck-ops");
  auto run = [&](const std::string& name, std::vector<Tensor<double>> inputs,
                 const std::function<Tensor<double>(P&)>& build) {
    P params;
    for (auto& t : inputs) params.add(t);
    out.push_back({name, detail::probe_check(params, seed, build)});
  };
  using detail::uniform_param;
  run("add/sub/mul/scale", {uniform_param(rng, "a", {2, 3}), uniform_param(rng, "b", {3}), uniform_param(rng, "c", {2, 1})},
      [](P& p) { return add(sub(mul(p.at("a"), p.at("b")), p.at("c")), scale(p.at("a"), 0.3)); });
  run("sum/mean", {uniform_param(rng, "a", {3, 4})},
      [](P& p) { return add(scale(sum(mul(p.at("a"), p.at("a"))), 0.5), mean(p.at("a"))); });
  run("reshape/transpose", {uniform_param(rng, "a", {3, 4})},
      [](P& p) { return mul(reshape(transpose(p.at("a")), {2, 6}), reshape(p.at("a"), {2, 6})); });
  run("matmul", {uniform_param(rng, "a", {3, 4}), uniform_param(rng, "b", {4, 2})},
      [](P& p) { return matmul(p.at("a"), p.at("b")); });
  run("linear", {uniform_param(rng, "x", {3, 5}), uniform_param(rng, "w", {4, 5}), uniform_param(rng, "b", {4})},
      [](P& p) { return linear(p.at("x"), p.at("w"), p.at("b")); });
  run("conv2d", {uniform_param(rng, "x", {2, 2, 5, 4}), uniform_param(rng, "w", {3, 2, 3, 3}), uniform_param(rng, "b", {3})},
      [](P& p) { return conv2d(p.at("x"), p.at("w"), p.at("b"), 1, 1); });
  run("conv2d/stride2", {uniform_param(rng, "x", {1, 2, 5, 5}), uniform_param(rng, "w", {2, 2, 3, 3}), uniform_param(rng, "b", {2})},
      [](P& p) { return conv2d(p.at("x"), p.at("w"), p.at("b"), 2, 0); });
  run("layer_norm", {uniform_param(rng, "x", {3, 6}, -2, 2), uniform_param(rng, "g", {6}), uniform_param(rng, "b", {6})},
      [](P& p) { return layer_norm(p.at("x"), p.at("g"), p.at("b")); });
  run("sigmoid", {uniform_param(rng, "x", {10}, -3, 3)}, [](P& p) { return sigmoid(p.at("x")); });
  run("gelu", {uniform_param(rng, "x", {10}, -3, 3)}, [](P& p) { return gelu(p.at("x")); });
  run("softmax", {uniform_param(rng, "x", {3, 4, 2}, -2, 2)}, [](P& p) {
    return concat<double>({reshape(softmax(p.at("x"), 0), {24}), reshape(softmax(p.at("x"), 1), {24}),
                           reshape(softmax(p.at("x"), 2), {24})},
                          0);
  });
  run("attention", {uniform_param(rng, "q", {3, 4}), uniform_param(rng, "k", {5, 4}), uniform_param(rng, "v", {5, 6})},
      [](P& p) { return scaled_dot_attention(p.at("q"), p.at("k"), p.at("v"), 2); });
  run("global_avg_pool", {uniform_param(rng, "x", {1, 4, 2, 3}), uniform_param(rng, "t", {4, 3})},
      [](P& p) { return concat<double>({reshape(global_avg_pool(p.at("x")), {4}), global_avg_pool(p.at("t"))}, 0); });
  run("pixel_shuffle", {uniform_param(rng, "x", {1, 8, 2, 3})}, [](P& p) { return pixel_shuffle(p.at("x"), 2); });
  run("pixel_unshuffle", {uniform_param(rng, "x", {1, 2, 4, 2})}, [](P& p) { return pixel_unshuffle(p.at("x"), 2); });
  run("concat/slice", {uniform_param(rng, "x", {1, 3, 2, 2}), uniform_param(rng, "y", {1, 2, 2, 2})},
      [](P& p) { return slice(concat<double>({p.at("x"), p.at("y")}, 1), 1, 1, 3); });
  {
    // Residuals stay at least 0.1 away from the kink at zero.
    P params;
    auto x = params.add(uniform_param(rng, "x", {2, 3, 3}));
    std::vector<double> target(x.values());
    for (auto& t : target) t += (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 0.5);
    const Tensor<double> y({2, 3, 3}, target);
    out.push_back({"l1_loss", grad_check_detailed(params, [&](P& p) { return l1_loss(p.at("x"), y); })});
  }
  return out;
}

struct LvpfbCheckShape {
  std::size_t channels = 8;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t tokens = 2;
  std::size_t caption_dim = 8;
  std::size_t description_dim = 8;
  std::size_t heads = 4;
};

/// Full fusion block with every parameter (fuse projection included)
/// scrambled, differentiated with respect to its weights and its input.
inline GradCheckResult lvpfb_gradcheck(std::uint64_t seed, const LvpfbCheckShape& s = {}) {
  ParameterSet<double> params;
  const FusionDims dims{s.channels, s.caption_dim, s.description_dim, s.heads};
  const auto block = make_lvpfb(params, "lvpfb", dims, BranchSet{}, InitOptions{seed, false});
  detail::scramble(params, seed, 0.5);
  Rng rng = Rng::stream(seed, "gradcheck-lvpfb");
  const Shape map{1, s.channels, s.height, s.width};
  params.add(detail::uniform_param(rng, "F", map));
  const PriorFeatures<double> priors{detail::uniform_tensor(rng, map, -1, 1), detail::uniform_tensor(rng, map, -1, 1),
                                     detail::uniform_tensor(rng, {s.caption_dim}, -1, 1),
                                     detail::uniform_tensor(rng, {s.tokens, s.description_dim}, -1, 1)};
  return detail::probe_check(params, seed,
                             [&](ParameterSet<double>& p) { return lvpfb_forward(p.at("F"), priors, block); });
}

/// The end-to-end check network: C=8, L=2, 8×8 LR, two description tokens.
inline NetworkConfig gradcheck_network_config() {
  NetworkConfig c;
  c.blocks = 2;
  c.channels = 8;
  c.heads = 4;
  c.caption_dim = 8;
  c.description_dim = 8;
  c.mask_classes = 4;
  c.lr_height = 8;
  c.lr_width = 8;
  return c;
}

/// Random bundle matching `c` with `tokens` description tokens.
inline PriorBundle random_prior_bundle(Rng& rng, const NetworkConfig& c, std::size_t tokens, const std::string& id) {
  PriorBundle b;
  b.image_id = id;
  b.mask = {c.lr_height, c.lr_width, c.mask_classes, {}};
  b.depth = {c.lr_height, c.lr_width, {}};
  for (std::size_t i = 0; i < c.lr_height * c.lr_width; ++i) {
    b.mask.labels.push_back(static_cast<std::int32_t>(rng.below(c.mask_classes)));
    b.depth.depth.push_back(static_cast<float>(rng.uniform()));
  }
  for (std::size_t i = 0; i < c.caption_dim; ++i) b.caption.values.push_back(static_cast<float>(rng.uniform(-1, 1)));
  b.description = {tokens, c.description_dim, {}};
  for (std::size_t i = 0; i < tokens * c.description_dim; ++i)
    b.description.values.push_back(static_cast<float>(rng.uniform(-1, 1)));
  return b;
}

/// Forward + L1 loss through a whole network with scrambled parameters. The
/// target sits 0.1–0.5 away from the output in a random direction so the L1
/// kink is never crossed by a perturbation. `max_entries` caps the entries
/// checked per parameter tensor (0 checks all of them).
inline GradCheckResult network_gradcheck(std::uint64_t seed, const NetworkConfig& config = gradcheck_network_config(),
                                         std::size_t tokens = 2, std::size_t max_entries = 0) {
  Network<double> net(config, seed);
  detail::scramble(net.parameters(), seed, 0.3);
  Rng rng = Rng::stream(seed, "gradcheck-network");
  const auto lr = detail::uniform_tensor(rng, {3, config.lr_height, config.lr_width}, 0, 1);
  const auto bundle = random_prior_bundle(rng, config, tokens, "gradcheck");
  std::vector<double> target;
  {
    NoGradGuard guard;
    const auto out = net.forward(lr, bundle);
    target.assign(out.values().begin(), out.values().end());
  }
  for (auto& t : target) t += (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 0.5);
  const Tensor<double> hr({3, config.lr_height * config.scale, config.lr_width * config.scale}, std::move(target));
  return grad_check_detailed(net.parameters(),
                             [&](ParameterSet<double>&) { return l1_loss(net.forward(lr, bundle), hr); }, 1e-4,
                             GradCheckSampling{max_entries, seed});
}

}  // namespace lvfsr
