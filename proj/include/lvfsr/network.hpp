#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lvfsr/fusion.hpp"
#include "lvfsr/init.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/resample.hpp"

namespace lvfsr {

enum class Variant { full, model1_no_prior, model2_concat, drop_FS, drop_FD, drop_EC, drop_ED };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names{
      {Variant::full, "full"},       {Variant::model1_no_prior, "model1_no_prior"},
      {Variant::model2_concat, "model2_concat"}, {Variant::drop_FS, "drop_FS"},
      {Variant::drop_FD, "drop_FD"}, {Variant::drop_EC, "drop_EC"},
      {Variant::drop_ED, "drop_ED"}};
  return names;
}

inline std::string to_string(Variant v) {
  for (const auto& [tag, name] : variant_names())
    if (tag == v) return name;
  return "unknown";
}

/// Accepts the canonical tags plus the short aliases "model1" and "model2".
inline Variant parse_variant(const std::string& text) {
  if (text == "model1") return Variant::model1_no_prior;
  if (text == "model2") return Variant::model2_concat;
  for (const auto& [tag, name] : variant_names())
    if (name == text) return tag;
  fail(ErrorKind::usage, "unknown ablation variant '" + text + "'");
}

inline BranchSet branches_for(Variant v) {
  BranchSet b;
  if (v == Variant::drop_FS) b.seg = false;
  if (v == Variant::drop_FD) b.dep = false;
  if (v == Variant::drop_EC) b.cap = false;
  if (v == Variant::drop_ED) b.des = false;
  return b;
}

inline bool uses_mask_encoder(Variant v) { return v != Variant::model1_no_prior && v != Variant::drop_FS; }
inline bool uses_depth_encoder(Variant v) { return v != Variant::model1_no_prior && v != Variant::drop_FD; }

struct NetworkConfig {
  std::size_t blocks = 3;
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t scale = 8;
  std::size_t caption_dim = 64;
  std::size_t description_dim = 64;
  std::size_t mask_classes = 8;
  std::size_t lr_height = 8;
  std::size_t lr_width = 8;
  std::size_t mlp_ratio = 2;
  Variant variant = Variant::full;

  bool operator==(const NetworkConfig&) const = default;

  void validate() const {
    require(scale == 8 || scale == 16, ErrorKind::config, "scale must be 8 or 16, got " + std::to_string(scale));
    require(blocks >= 1, ErrorKind::config, "block count must be positive");
    require(channels >= 1 && heads >= 1 && channels % heads == 0, ErrorKind::config,
            "channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
    require(caption_dim >= 1 && description_dim >= 1 && mask_classes >= 1 && mlp_ratio >= 1, ErrorKind::config,
            "embedding widths, class count and MLP ratio must be positive");
    require(lr_height >= 1 && lr_width >= 1, ErrorKind::config, "LR extents must be positive");
  }

  /// Sorted `key=value` lines; the canonical form stored in checkpoints.
  std::string canonical_text() const {
    std::map<std::string, std::string> kv{
        {"blocks", std::to_string(blocks)},
        {"caption_dim", std::to_string(caption_dim)},
        {"channels", std::to_string(channels)},
        {"description_dim", std::to_string(description_dim)},
        {"heads", std::to_string(heads)},
        {"lr_height", std::to_string(lr_height)},
        {"lr_width", std::to_string(lr_width)},
        {"mask_classes", std::to_string(mask_classes)},
        {"mlp_ratio", std::to_string(mlp_ratio)},
        {"scale", std::to_string(scale)},
        {"variant", to_string(variant)},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
  }

  static NetworkConfig from_canonical_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorKind::format, "config block: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto number = [&](const char* key) -> std::size_t {
      auto it = kv.find(key);
      require(it != kv.end(), ErrorKind::format, std::string("config block: missing key ") + key);
      try {
        return static_cast<std::size_t>(std::stoull(it->second));
      } catch (const std::exception&) {
        fail(ErrorKind::format, std::string("config block: bad value for ") + key);
      }
    };
    NetworkConfig c;
    c.blocks = number("blocks");
    c.caption_dim = number("caption_dim");
    c.channels = number("channels");
    c.description_dim = number("description_dim");
    c.heads = number("heads");
    c.lr_height = number("lr_height");
    c.lr_width = number("lr_width");
    c.mask_classes = number("mask_classes");
    c.mlp_ratio = number("mlp_ratio");
    c.scale = number("scale");
    require(kv.count("variant") != 0, ErrorKind::format, "config block: missing key variant");
    c.variant = parse_variant(kv["variant"]);
    require(kv.size() == 11, ErrorKind::format, "config block: unexpected keys");
    require(c.canonical_text() == text, ErrorKind::format, "config block is not in canonical form");
    return c;
  }
};

// ---------------------------------------------------------------------------
// Basic block: two pre-norm transformer layers over the HW pixel tokens.

template <typename T>
struct TransformerLayerParams {
  Tensor<T> norm1_gamma, norm1_beta;
  AttentionProjections<T> attn;
  Tensor<T> norm2_gamma, norm2_beta;
  LinearParams<T> fc1, fc2;
};

template <typename T>
struct BasicBlockParams {
  std::vector<TransformerLayerParams<T>> layers;
};

template <typename T>
BasicBlockParams<T> make_basic_block(ParameterSet<T>& params, const std::string& prefix, std::size_t c,
                                     std::size_t mlp_ratio, const InitOptions& init) {
  BasicBlockParams<T> block;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = prefix + ".t" + std::to_string(i);
    TransformerLayerParams<T> layer;
    layer.norm1_gamma = params.add(constant_param<T>(p + ".norm1.gamma", {c}, T(1)));
    layer.norm1_beta = params.add(constant_param<T>(p + ".norm1.beta", {c}, T(0)));
    layer.attn = detail::make_projections(params, p + ".attn", c, c, c, init);
    layer.norm2_gamma = params.add(constant_param<T>(p + ".norm2.gamma", {c}, T(1)));
    layer.norm2_beta = params.add(constant_param<T>(p + ".norm2.beta", {c}, T(0)));
    layer.fc1 = make_linear(params, p + ".mlp.fc1", c, mlp_ratio * c, init);
    layer.fc2 = make_linear(params, p + ".mlp.fc2", mlp_ratio * c, c, init);
    block.layers.push_back(std::move(layer));
  }
  return block;
}

/// x + MHSA(LN(x)), then x + MLP(LN(x)), on [N,C] tokens.
template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& tokens, const TransformerLayerParams<T>& p, std::size_t heads) {
  const Tensor<T> h1 = layer_norm(tokens, p.norm1_gamma, p.norm1_beta);
  const Tensor<T> attended =
      p.attn.output(scaled_dot_attention(p.attn.query(h1), p.attn.key(h1), p.attn.value(h1), heads));
  const Tensor<T> x = add(tokens, attended);
  const Tensor<T> h2 = layer_norm(x, p.norm2_gamma, p.norm2_beta);
  return add(x, p.fc2(gelu(p.fc1(h2))));
}

template <typename T>
Tensor<T> basic_block(const Tensor<T>& feature, const BasicBlockParams<T>& p, std::size_t heads) {
  detail::check_feature(feature, "basic block");
  Tensor<T> tokens = detail::to_tokens(feature);
  for (const auto& layer : p.layers) tokens = transformer_layer(tokens, layer, heads);
  return detail::from_tokens(tokens, feature.extent(2), feature.extent(3));
}

// ---------------------------------------------------------------------------

/// Feature extraction, L × (fusion → basic block), then a 3×3 conv to 3r²
/// channels, pixel shuffle, and a global bicubic residual.
template <typename T>
class Network {
 public:
  Network(const NetworkConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    const std::size_t c = config_.channels;
    const InitOptions init{seed, false};
    head_ = make_conv(params_, "head", 3, c, 3, init);
    const Variant v = config_.variant;
    if (uses_mask_encoder(v)) mask_encoder_ = make_conv(params_, "enc.mask", config_.mask_classes, c, 3, init);
    if (uses_depth_encoder(v)) depth_encoder_ = make_conv(params_, "enc.depth", 1, c, 3, init);
    const FusionDims dims{c, config_.caption_dim, config_.description_dim, config_.heads};
    for (std::size_t i = 0; i < config_.blocks; ++i) {
      const std::string prefix = "block" + std::to_string(i);
      Stage stage;
      if (v == Variant::model2_concat) {
        stage.concat = make_concat_fusion(params_, prefix + ".concat", dims, init);
      } else if (v != Variant::model1_no_prior) {
        stage.fusion = make_lvpfb(params_, prefix + ".fusion", dims, branches_for(v), init);
      }
      stage.body = make_basic_block(params_, prefix + ".body", c, config_.mlp_ratio, init);
      stages_.push_back(std::move(stage));
    }
    tail_ = make_conv(params_, "tail", c, 3 * config_.scale * config_.scale, 3, init);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;

  const NetworkConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  /// Checks that an (LR image, priors) pair fits this network.
  void check_inputs(const Tensor<T>& lr, const PriorBundle& bundle) const {
    require(lr.rank() == 3 && lr.extent(0) == 3, ErrorKind::shape, "network input must be [3,H,W], got " + shape_str(lr.shape()));
    require(lr.extent(1) == config_.lr_height && lr.extent(2) == config_.lr_width, ErrorKind::shape,
            "LR extents " + shape_str(lr.shape()) + " do not match configured " + std::to_string(config_.lr_height) + "x" +
                std::to_string(config_.lr_width));
    require(bundle.mask.height == lr.extent(1) && bundle.mask.width == lr.extent(2) &&
                bundle.depth.height == lr.extent(1) && bundle.depth.width == lr.extent(2),
            ErrorKind::shape, bundle.image_id + ": prior extents do not match the LR image");
    require(bundle.mask.classes == config_.mask_classes, ErrorKind::shape, bundle.image_id + ": mask class count mismatch");
    require(bundle.caption.values.size() == config_.caption_dim, ErrorKind::shape,
            bundle.image_id + ": caption width " + std::to_string(bundle.caption.values.size()) + " != " +
                std::to_string(config_.caption_dim));
    require(bundle.description.dim == config_.description_dim, ErrorKind::shape,
            bundle.image_id + ": description width " + std::to_string(bundle.description.dim) + " != " +
                std::to_string(config_.description_dim));
    require(bundle.description.tokens >= 1, ErrorKind::shape, bundle.image_id + ": empty description");
  }

  /// Encodes the bundle once; every block reuses the result.
  PriorFeatures<T> encode_priors(const PriorBundle& bundle) const {
    PriorFeatures<T> f;
    if (mask_encoder_) f.mask = encode_mask(bundle.mask, *mask_encoder_);
    if (depth_encoder_) f.depth = encode_depth(bundle.depth, *depth_encoder_);
    f.caption = caption_tensor<T>(bundle.caption);
    f.description = description_tensor<T>(bundle.description);
    return f;
  }

  /// [3,H,W] LR image -> [3,rH,rW].
  Tensor<T> forward(const Tensor<T>& lr, const PriorBundle& bundle) const {
    check_inputs(lr, bundle);
    const std::size_t h = lr.extent(1), w = lr.extent(2), r = config_.scale;
    const bool needs_priors = config_.variant != Variant::model1_no_prior;
    const PriorFeatures<T> priors = needs_priors ? encode_priors(bundle) : PriorFeatures<T>{};
    Tensor<T> feature = head_(reshape(lr, {1, 3, h, w}), 1);
    for (const auto& stage : stages_) {
      if (stage.fusion) feature = lvpfb_forward(feature, priors, *stage.fusion);
      if (stage.concat) feature = concat_fusion_forward(feature, priors, *stage.concat);
      feature = basic_block(feature, stage.body, config_.heads);
    }
    const Tensor<T> detail_image = reshape(pixel_shuffle(tail_(feature, 1), r), {3, h * r, w * r});
    return add(detail_image, bicubic_resize(lr, h * r, w * r));
  }

 private:
  struct Stage {
    std::optional<LVPFBParams<T>> fusion;
    std::optional<ConcatFusionParams<T>> concat;
    BasicBlockParams<T> body;
  };

  NetworkConfig config_;
  std::uint64_t seed_;
  ParameterSet<T> params_;
  ConvParams<T> head_;
  std::optional<ConvParams<T>> mask_encoder_;
  std::optional<ConvParams<T>> depth_encoder_;
  std::vector<Stage> stages_;
  ConvParams<T> tail_;
};

/// Copies parameter values between networks of the same architecture
/// (possibly different precision).
template <typename To, typename From>
void copy_parameters(ParameterSet<To>& dst, const ParameterSet<From>& src) {
  require(dst.names() == src.names(), ErrorKind::state, "copy_parameters: parameter names differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = dst[i].mutable_data();
    const auto in = src[i].data();
    require(out.size() == in.size(), ErrorKind::state, "copy_parameters: size mismatch for " + src[i].name());
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = static_cast<To>(in[k]);
  }
}

}  // namespace lvfsr
