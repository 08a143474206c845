#pragma once

// Language-vision prior fusion block: four attention branches (mask-guided
// spatial gate, depth-guided spatial gate, caption channel gate, description
// cross-attention) whose outputs are concatenated with the input feature,
// projected by a 1×1 conv and added back to the input.
//
// Feature maps are [1,C,H,W]; the caption is [d_c] (or [T,d_c], pooled);
// description tokens are [T,d_d].

#include <optional>
#include <string>
#include <vector>

#include "lvfsr/init.hpp"
#include "lvfsr/ops.hpp"

namespace lvfsr {

/// Which branches a fusion block carries. Concatenation order is always
/// [seg, dep, cap, des, F] restricted to the enabled branches.
struct BranchSet {
  bool seg = true;
  bool dep = true;
  bool cap = true;
  bool des = true;

  std::size_t count() const { return std::size_t{seg} + dep + cap + des; }
};

struct FusionDims {
  std::size_t channels = 32;
  std::size_t caption_dim = 64;
  std::size_t description_dim = 64;
  std::size_t heads = 4;
};

template <typename T>
struct SpatialGateParams {
  ConvParams<T> conv1;  // 2C -> C, 3x3
  ConvParams<T> conv2;  // C -> 1, 3x3
};

template <typename T>
struct AttentionProjections {
  LinearParams<T> query, key, value, output;
};

template <typename T>
struct DescriptionAttentionParams {
  AttentionProjections<T> text_to_image;  // queries from tokens (d_d -> C)
  AttentionProjections<T> image_to_text;  // queries from pixels
};

/// Encoded priors shared by every fusion block of one forward pass.
template <typename T>
struct PriorFeatures {
  Tensor<T> mask;         // [1,C,H,W], may be undefined when unused
  Tensor<T> depth;        // [1,C,H,W], may be undefined when unused
  Tensor<T> caption;      // [d_c] or [T,d_c]
  Tensor<T> description;  // [T,d_d]
};

template <typename T>
struct LVPFBParams {
  BranchSet branches;
  std::size_t heads = 4;
  std::optional<SpatialGateParams<T>> seg;
  std::optional<SpatialGateParams<T>> dep;
  std::optional<LinearParams<T>> cap;
  std::optional<DescriptionAttentionParams<T>> des;
  ConvParams<T> fuse;  // 1x1, (branches + 1)·C -> C, zero at init
};

namespace detail {
template <typename T>
SpatialGateParams<T> make_spatial_gate(ParameterSet<T>& params, const std::string& prefix, std::size_t c,
                                       const InitOptions& init) {
  return {make_conv(params, prefix + ".conv1", 2 * c, c, 3, init), make_conv(params, prefix + ".conv2", c, 1, 3, init)};
}

template <typename T>
AttentionProjections<T> make_projections(ParameterSet<T>& params, const std::string& prefix, std::size_t query_in,
                                         std::size_t kv_in, std::size_t c, const InitOptions& init) {
  return {make_linear(params, prefix + ".q", query_in, c, init), make_linear(params, prefix + ".k", kv_in, c, init),
          make_linear(params, prefix + ".v", kv_in, c, init), make_linear(params, prefix + ".o", c, c, init)};
}

/// [1,C,H,W] -> [HW,C] in row-major pixel order.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& feature) {
  const std::size_t c = feature.extent(1), hw = feature.extent(2) * feature.extent(3);
  return transpose(reshape(feature, {c, hw}));
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  const std::size_t c = tokens.extent(1);
  return reshape(transpose(tokens), {1, c, h, w});
}

template <typename T>
void check_feature(const Tensor<T>& f, const char* what) {
  require(f.rank() == 4 && f.extent(0) == 1, ErrorKind::shape,
          std::string(what) + ": expected a [1,C,H,W] feature, got " + shape_str(f.shape()));
}
}  // namespace detail

/// Registers the parameters of one fusion block under `prefix`.
template <typename T>
LVPFBParams<T> make_lvpfb(ParameterSet<T>& params, const std::string& prefix, const FusionDims& dims,
                          const BranchSet& branches, const InitOptions& init) {
  const std::size_t c = dims.channels;
  require(dims.heads >= 1 && c % dims.heads == 0, ErrorKind::config,
          "fusion: channels " + std::to_string(c) + " not divisible by heads " + std::to_string(dims.heads));
  LVPFBParams<T> block;
  block.branches = branches;
  block.heads = dims.heads;
  if (branches.seg) block.seg = detail::make_spatial_gate(params, prefix + ".seg", c, init);
  if (branches.dep) block.dep = detail::make_spatial_gate(params, prefix + ".dep", c, init);
  if (branches.cap) block.cap = make_linear(params, prefix + ".cap", dims.caption_dim, c, init);
  if (branches.des)
    block.des = DescriptionAttentionParams<T>{
        detail::make_projections(params, prefix + ".des.stage1", dims.description_dim, c, c, init),
        detail::make_projections(params, prefix + ".des.stage2", c, c, c, init)};
  InitOptions zero = init;
  zero.zero = true;
  block.fuse = make_conv(params, prefix + ".fuse", (branches.count() + 1) * c, c, 1, zero);
  return block;
}

/// sigmoid(conv(gelu(conv(concat[F, prior])))) as a [1,1,H,W] map.
template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& feature, const Tensor<T>& prior, const SpatialGateParams<T>& p) {
  detail::check_feature(feature, "spatial attention");
  detail::check_feature(prior, "spatial attention prior");
  require(feature.shape() == prior.shape(), ErrorKind::shape,
          "spatial attention: feature " + shape_str(feature.shape()) + " vs prior " + shape_str(prior.shape()));
  return sigmoid(p.conv2(gelu(p.conv1(concat<T>({feature, prior}, 1), 1)), 1));
}

template <typename T>
Tensor<T> seg_attention(const Tensor<T>& feature, const Tensor<T>& mask_feature, const SpatialGateParams<T>& p) {
  return mul(feature, spatial_gate(feature, mask_feature, p));
}

template <typename T>
Tensor<T> dep_attention(const Tensor<T>& feature, const Tensor<T>& depth_feature, const SpatialGateParams<T>& p) {
  return mul(feature, spatial_gate(feature, depth_feature, p));
}

/// Per-channel gate in (0,1) from the pooled caption embedding.
template <typename T>
Tensor<T> caption_gate(const Tensor<T>& caption, const LinearParams<T>& p) {
  const Tensor<T> pooled = caption.rank() == 2 ? global_avg_pool(caption) : caption;
  require(pooled.rank() == 1 && pooled.extent(0) == p.weight.extent(1), ErrorKind::shape,
          "caption attention: embedding width " + std::to_string(pooled.shape().back()) + " != " +
              std::to_string(p.weight.extent(1)));
  return sigmoid(p(pooled));
}

template <typename T>
Tensor<T> cap_attention(const Tensor<T>& feature, const Tensor<T>& caption, const LinearParams<T>& p) {
  detail::check_feature(feature, "caption attention");
  const Tensor<T> gate = caption_gate(caption, p);
  require(gate.extent(0) == feature.extent(1), ErrorKind::shape, "caption attention: gate width != channels");
  return mul(feature, reshape(gate, {1, gate.extent(0), 1, 1}));
}

/// Stage-1 text tokens grounded in the image: U = Q₁ + O₁·attn(Q₁, K₁, V₁),
/// with Q₁ from the description tokens and K₁, V₁ from the pixels of F.
template <typename T>
Tensor<T> grounded_tokens(const Tensor<T>& pixels, const Tensor<T>& description,
                          const AttentionProjections<T>& p, std::size_t heads) {
  const Tensor<T> q = p.query(description);
  return add(q, p.output(scaled_dot_attention(q, p.key(pixels), p.value(pixels), heads)));
}

template <typename T>
Tensor<T> des_attention(const Tensor<T>& feature, const Tensor<T>& description,
                        const DescriptionAttentionParams<T>& p, std::size_t heads) {
  detail::check_feature(feature, "description attention");
  require(description.rank() == 2 && description.extent(0) >= 1, ErrorKind::shape,
          "description attention: tokens must be [T,d] with T >= 1, got " + shape_str(description.shape()));
  require(description.extent(1) == p.text_to_image.query.weight.extent(1), ErrorKind::shape,
          "description attention: token width " + std::to_string(description.extent(1)) + " != " +
              std::to_string(p.text_to_image.query.weight.extent(1)));
  const std::size_t h = feature.extent(2), w = feature.extent(3);
  const Tensor<T> pixels = detail::to_tokens(feature);
  const Tensor<T> grounded = grounded_tokens(pixels, description, p.text_to_image, heads);
  const auto& s2 = p.image_to_text;
  const Tensor<T> spatial =
      s2.output(scaled_dot_attention(s2.query(pixels), s2.key(grounded), s2.value(grounded), heads));
  return detail::from_tokens(spatial, h, w);
}

/// out = F + conv1×1(concat[branch outputs..., F]).
template <typename T>
Tensor<T> lvpfb_forward(const Tensor<T>& feature, const PriorFeatures<T>& priors, const LVPFBParams<T>& p) {
  detail::check_feature(feature, "fusion block");
  std::vector<Tensor<T>> parts;
  if (p.seg) parts.push_back(seg_attention(feature, priors.mask, *p.seg));
  if (p.dep) parts.push_back(dep_attention(feature, priors.depth, *p.dep));
  if (p.cap) parts.push_back(cap_attention(feature, priors.caption, *p.cap));
  if (p.des) parts.push_back(des_attention(feature, priors.description, *p.des, p.heads));
  parts.push_back(feature);
  return add(feature, p.fuse(concat(parts, 1), 0));
}

// ---------------------------------------------------------------------------
// Concatenation baseline: every prior is brought to a [1,C,H,W] map and the
// stack is fused by a single 1×1 conv with a skip connection.

template <typename T>
struct ConcatFusionParams {
  LinearParams<T> cap;  // d_c -> C, broadcast over pixels
  LinearParams<T> des;  // pooled d_d -> C, broadcast over pixels
  ConvParams<T> fuse;   // 5C -> C, zero at init
};

template <typename T>
ConcatFusionParams<T> make_concat_fusion(ParameterSet<T>& params, const std::string& prefix, const FusionDims& dims,
                                         const InitOptions& init) {
  InitOptions zero = init;
  zero.zero = true;
  const std::size_t c = dims.channels;
  ConcatFusionParams<T> p{make_linear(params, prefix + ".cap", dims.caption_dim, c, init),
                          make_linear(params, prefix + ".des", dims.description_dim, c, init), {}};
  p.fuse = make_conv(params, prefix + ".fuse", 5 * c, c, 1, zero);
  return p;
}

template <typename T>
Tensor<T> concat_fusion_forward(const Tensor<T>& feature, const PriorFeatures<T>& priors, const ConcatFusionParams<T>& p) {
  detail::check_feature(feature, "concat fusion");
  const std::size_t c = feature.extent(1);
  const Tensor<T> plane = Tensor<T>::zeros({1, 1, feature.extent(2), feature.extent(3)});
  auto broadcast = [&](const Tensor<T>& v) { return add(reshape(v, {1, c, 1, 1}), plane); };
  const Tensor<T> caption = priors.caption.rank() == 2 ? global_avg_pool(priors.caption) : priors.caption;
  const Tensor<T> cap_map = broadcast(p.cap(caption));
  const Tensor<T> des_map = broadcast(p.des(global_avg_pool(priors.description)));
  return add(feature, p.fuse(concat<T>({priors.mask, priors.depth, cap_map, des_map, feature}, 1), 0));
}

}  // namespace lvfsr
