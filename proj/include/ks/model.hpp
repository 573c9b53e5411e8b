#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ks/autodiff.hpp"
#include "ks/checkpoint.hpp"
#include "ks/config_text.hpp"
#include "ks/rng.hpp"

namespace ks {

/// Shape of the ConvMixer-style classifier. Defaults are the desk-scale
/// analogue of ConvMixer-768/32 with patch 7 on 224x224 inputs.
struct ModelConfig {
  int hidden_dim = 64;
  int depth = 4;
  int patch_size = 4;
  int kernel_size = 5;
  int num_classes = 10;
  int image_side = 32;

  /// Throws ConfigError on a violated invariant.
  void validate() const;

  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct NormParams {
  Tensor<Scalar> scale, shift;
  Tensor<Scalar> running_mean, running_var;
};

/// The swappable, key-specific part of the network: patch embedding with its
/// normalization, plus the classifier head.
template <typename Scalar>
struct EmbeddingHeadPair {
  Tensor<Scalar> embed_weight;  ///< (hidden, 3, patch, patch)
  Tensor<Scalar> embed_bias;
  NormParams<Scalar> embed_norm;
  Tensor<Scalar> head_weight;  ///< (classes, hidden)
  Tensor<Scalar> head_bias;
  int key_id = -1;
};

template <typename Scalar>
struct MixerBlock {
  Tensor<Scalar> depthwise_weight;  ///< (hidden, 1, k, k)
  Tensor<Scalar> depthwise_bias;
  NormParams<Scalar> depthwise_norm;
  Tensor<Scalar> pointwise_weight;  ///< (hidden, hidden)
  Tensor<Scalar> pointwise_bias;
  NormParams<Scalar> pointwise_norm;
};

template <typename Scalar>
struct Backbone {
  std::vector<MixerBlock<Scalar>> blocks;
};

template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  Backbone<Scalar> backbone;
  EmbeddingHeadPair<Scalar> pair;
  bool backbone_frozen = false;
};

// ---------------------------------------------------------------------------
// Parameter enumeration. The order here is the order of the tracked variables
// returned by forward().

template <typename Scalar, typename Fn>
void for_each_learnable(EmbeddingHeadPair<Scalar>& p, Fn&& fn) {
  fn("embed.weight", p.embed_weight);
  fn("embed.bias", p.embed_bias);
  fn("embed_norm.scale", p.embed_norm.scale);
  fn("embed_norm.shift", p.embed_norm.shift);
  fn("head.weight", p.head_weight);
  fn("head.bias", p.head_bias);
}

template <typename Scalar, typename Fn>
void for_each_learnable(Backbone<Scalar>& bb, Fn&& fn) {
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    auto& b = bb.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    fn(pre + "depthwise.weight", b.depthwise_weight);
    fn(pre + "depthwise.bias", b.depthwise_bias);
    fn(pre + "depthwise_norm.scale", b.depthwise_norm.scale);
    fn(pre + "depthwise_norm.shift", b.depthwise_norm.shift);
    fn(pre + "pointwise.weight", b.pointwise_weight);
    fn(pre + "pointwise.bias", b.pointwise_bias);
    fn(pre + "pointwise_norm.scale", b.pointwise_norm.scale);
    fn(pre + "pointwise_norm.shift", b.pointwise_norm.shift);
  }
}

/// Every tensor, learnable or running statistic, in checkpoint order.
template <typename Pair, typename Fn>
  requires requires(Pair p) { p.embed_weight; }
void for_each_tensor(Pair& p, Fn&& fn) {
  fn("embed.weight", p.embed_weight);
  fn("embed.bias", p.embed_bias);
  fn("embed_norm.scale", p.embed_norm.scale);
  fn("embed_norm.shift", p.embed_norm.shift);
  fn("embed_norm.running_mean", p.embed_norm.running_mean);
  fn("embed_norm.running_var", p.embed_norm.running_var);
  fn("head.weight", p.head_weight);
  fn("head.bias", p.head_bias);
}

template <typename BB, typename Fn>
  requires requires(BB b) { b.blocks; }
void for_each_tensor(BB& bb, Fn&& fn) {
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    auto& b = bb.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    fn(pre + "depthwise.weight", b.depthwise_weight);
    fn(pre + "depthwise.bias", b.depthwise_bias);
    fn(pre + "depthwise_norm.scale", b.depthwise_norm.scale);
    fn(pre + "depthwise_norm.shift", b.depthwise_norm.shift);
    fn(pre + "depthwise_norm.running_mean", b.depthwise_norm.running_mean);
    fn(pre + "depthwise_norm.running_var", b.depthwise_norm.running_var);
    fn(pre + "pointwise.weight", b.pointwise_weight);
    fn(pre + "pointwise.bias", b.pointwise_bias);
    fn(pre + "pointwise_norm.scale", b.pointwise_norm.scale);
    fn(pre + "pointwise_norm.shift", b.pointwise_norm.shift);
    fn(pre + "pointwise_norm.running_mean", b.pointwise_norm.running_mean);
    fn(pre + "pointwise_norm.running_var", b.pointwise_norm.running_var);
  }
}

// ---------------------------------------------------------------------------

/// How each parameter group behaves in one forward pass.
struct ForwardMode {
  NormMode pair_norm = NormMode::Eval;
  NormMode backbone_norm = NormMode::Eval;
  bool track_pair = false;
  bool track_backbone = false;

  static ForwardMode inference() { return {}; }
  static ForwardMode pretraining() { return {NormMode::Train, NormMode::Train, true, true}; }
  /// Backbone frozen: its normalization uses stored running statistics
  /// unless `backbone_batch_stats` is set (then batch statistics, not stored).
  static ForwardMode finetuning(bool backbone_batch_stats = false) {
    return {NormMode::Train, backbone_batch_stats ? NormMode::BatchStats : NormMode::Eval, true, false};
  }
};

template <typename Scalar>
struct ForwardPass {
  Var<Scalar> logits;
  std::vector<Var<Scalar>> pair_params;      ///< for_each_learnable(pair) order
  std::vector<Var<Scalar>> backbone_params;  ///< for_each_learnable(backbone) order
  /// Batch statistics per normalization layer: index 0 is the embedding norm,
  /// then (depthwise, pointwise) per block. Empty entries were not in Train mode.
  std::vector<BatchStats<Scalar>> norm_stats;
};

/// patch embedding -> GELU -> norm -> depth x [residual(depthwise -> GELU ->
/// norm), pointwise -> GELU -> norm] -> global average pool -> head.
template <typename Scalar>
ForwardPass<Scalar> forward(Tape<Scalar>& tape, const ModelParams<Scalar>& params, const Var<Scalar>& input,
                            const ForwardMode& mode) {
  const auto& cfg = params.config;
  const auto& xs = input.shape();
  if (xs.size() != 4 || xs[1] != 3 || xs[2] != cfg.image_side || xs[3] != cfg.image_side)
    throw ShapeError("forward: expected input (B, 3, " + std::to_string(cfg.image_side) + ", " +
                     std::to_string(cfg.image_side) + "), got " + shape_string(xs));

  ForwardPass<Scalar> pass;
  pass.norm_stats.resize(1 + 2 * params.backbone.blocks.size());
  auto bind = [&](const Tensor<Scalar>& t, bool track, std::vector<Var<Scalar>>& out) {
    if (!track) return tape.constant(t);
    auto v = tape.variable(t);
    out.push_back(v);
    return v;
  };
  auto bind_pair = [&](const Tensor<Scalar>& t) { return bind(t, mode.track_pair, pass.pair_params); };
  auto bind_bb = [&](const Tensor<Scalar>& t) { return bind(t, mode.track_backbone, pass.backbone_params); };

  const auto& pair = params.pair;
  const auto ew = bind_pair(pair.embed_weight);
  const auto eb = bind_pair(pair.embed_bias);
  const auto es = bind_pair(pair.embed_norm.scale);
  const auto eh = bind_pair(pair.embed_norm.shift);
  const auto hw = bind_pair(pair.head_weight);
  const auto hb = bind_pair(pair.head_bias);

  auto x = patch_embed(input, ew, eb, cfg.patch_size);
  x = gelu(x);
  x = batch_norm(x, es, eh, pair.embed_norm.running_mean, pair.embed_norm.running_var, mode.pair_norm,
                 Scalar(1e-5), &pass.norm_stats[0]);

  for (std::size_t i = 0; i < params.backbone.blocks.size(); ++i) {
    const auto& blk = params.backbone.blocks[i];
    const auto dw = bind_bb(blk.depthwise_weight);
    const auto db = bind_bb(blk.depthwise_bias);
    const auto ds = bind_bb(blk.depthwise_norm.scale);
    const auto dh = bind_bb(blk.depthwise_norm.shift);
    const auto pw = bind_bb(blk.pointwise_weight);
    const auto pb = bind_bb(blk.pointwise_bias);
    const auto ps = bind_bb(blk.pointwise_norm.scale);
    const auto ph = bind_bb(blk.pointwise_norm.shift);

    auto r = gelu(depthwise_conv(x, dw, db));
    r = batch_norm(r, ds, dh, blk.depthwise_norm.running_mean, blk.depthwise_norm.running_var,
                   mode.backbone_norm, Scalar(1e-5), &pass.norm_stats[1 + 2 * i]);
    x = add(r, x);
    x = gelu(pointwise_conv(x, pw, pb));
    x = batch_norm(x, ps, ph, blk.pointwise_norm.running_mean, blk.pointwise_norm.running_var,
                   mode.backbone_norm, Scalar(1e-5), &pass.norm_stats[2 + 2 * i]);
  }

  pass.logits = linear(global_avg_pool(x), hw, hb);
  return pass;
}

/// Folds batch statistics into running averages:
/// running = momentum * running + (1 - momentum) * batch.
template <typename Scalar>
void apply_norm_stats(ModelParams<Scalar>& params, const std::vector<BatchStats<Scalar>>& stats,
                      Scalar momentum = Scalar(0.9)) {
  auto fold = [&](NormParams<Scalar>& n, const BatchStats<Scalar>& s) {
    if (s.mean.empty()) return;
    n.running_mean.data() = momentum * n.running_mean.data() + (Scalar(1) - momentum) * s.mean.data();
    n.running_var.data() = momentum * n.running_var.data() + (Scalar(1) - momentum) * s.var.data();
  };
  fold(params.pair.embed_norm, stats.at(0));
  for (std::size_t i = 0; i < params.backbone.blocks.size(); ++i) {
    fold(params.backbone.blocks[i].depthwise_norm, stats.at(1 + 2 * i));
    fold(params.backbone.blocks[i].pointwise_norm, stats.at(2 + 2 * i));
  }
}

/// Inference-mode logits for a (B, 3, side, side) batch.
template <typename Scalar>
Tensor<Scalar> logits(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch) {
  Tape<Scalar> tape;
  return forward(tape, params, tape.constant(batch), ForwardMode::inference()).logits.value();
}

/// Predicted class per row; ties go to the lowest class index.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  const Index classes = logits.dim(1);
  for (Index b = 0; b < logits.dim(0); ++b) {
    int best = 0;
    for (Index c = 1; c < classes; ++c)
      if (logits.at(b, c) > logits.at(b, best)) best = static_cast<int>(c);
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

template <typename Scalar>
std::vector<int> predict(const ModelParams<Scalar>& params, const Tensor<Scalar>& batch) {
  return argmax_rows(logits(params, batch));
}

/// Uniform fan-in initialization (bound 1/sqrt(fan_in)) for convolutions and
/// the head; normalization scale 1, shift 0, running mean 0, running var 1.
/// Throws ConfigError on an invalid config.
ModelParams<float> init_model(const ModelConfig& config, std::uint64_t seed);

template <typename Scalar>
void check_pair_shape(const ModelConfig& cfg, const EmbeddingHeadPair<Scalar>& pair) {
  const Index h = cfg.hidden_dim, p = cfg.patch_size;
  auto expect = [](const char* what, const Tensor<Scalar>& t, const Shape& s) {
    if (t.shape() != s)
      throw ShapeError(std::string("pair ") + what + " has shape " + shape_string(t.shape()) + ", expected " +
                       shape_string(s));
  };
  expect("embed.weight", pair.embed_weight, {h, 3, p, p});
  expect("embed.bias", pair.embed_bias, {h});
  expect("embed_norm.scale", pair.embed_norm.scale, {h});
  expect("embed_norm.shift", pair.embed_norm.shift, {h});
  expect("embed_norm.running_mean", pair.embed_norm.running_mean, {h});
  expect("embed_norm.running_var", pair.embed_norm.running_var, {h});
  expect("head.weight", pair.head_weight, {Index(cfg.num_classes), h});
  expect("head.bias", pair.head_bias, {Index(cfg.num_classes)});
}

/// Replaces the active pair; throws ShapeError if its dims do not match.
/// The backbone is copied unchanged.
template <typename Scalar>
ModelParams<Scalar> swap_pair(const ModelParams<Scalar>& params, EmbeddingHeadPair<Scalar> pair) {
  check_pair_shape(params.config, pair);
  ModelParams<Scalar> out = params;
  out.pair = std::move(pair);
  return out;
}

/// FNV-1a over every backbone tensor's shape and bytes (running statistics
/// included).
std::uint64_t checksum(const Backbone<float>& backbone);
std::uint64_t checksum(const EmbeddingHeadPair<float>& pair);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params) {
  ModelParams<To> out;
  out.config = params.config;
  out.backbone_frozen = params.backbone_frozen;
  out.pair.key_id = params.pair.key_id;
  std::vector<Tensor<To>> pair_tensors;
  for_each_tensor(params.pair, [&](const std::string&, const Tensor<From>& t) { pair_tensors.push_back(t.template cast<To>()); });
  std::size_t i = 0;
  for_each_tensor(out.pair, [&](const std::string&, Tensor<To>& t) { t = pair_tensors[i++]; });
  out.backbone.blocks.resize(params.backbone.blocks.size());
  std::vector<Tensor<To>> bb_tensors;
  for_each_tensor(params.backbone, [&](const std::string&, const Tensor<From>& t) { bb_tensors.push_back(t.template cast<To>()); });
  i = 0;
  for_each_tensor(out.backbone, [&](const std::string&, Tensor<To>& t) { t = bb_tensors[i++]; });
  return out;
}

// Checkpoint files: `backbone.bin`, `pair_<key_id>.bin`, and a `config` sidecar.
std::vector<NamedTensor> to_named(const Backbone<float>& backbone);
std::vector<NamedTensor> to_named(const EmbeddingHeadPair<float>& pair);
Backbone<float> backbone_from_named(const ModelConfig& config, const std::vector<NamedTensor>& tensors);
EmbeddingHeadPair<float> pair_from_named(const ModelConfig& config, const std::vector<NamedTensor>& tensors);

void save_backbone(const std::filesystem::path& path, const Backbone<float>& backbone);
void save_pair(const std::filesystem::path& path, const EmbeddingHeadPair<float>& pair);
Backbone<float> load_backbone(const std::filesystem::path& path, const ModelConfig& config);
EmbeddingHeadPair<float> load_pair(const std::filesystem::path& path, const ModelConfig& config, int key_id);
void save_config(const std::filesystem::path& path, const ModelConfig& config);
ModelConfig load_config(const std::filesystem::path& path);

}  // namespace ks
