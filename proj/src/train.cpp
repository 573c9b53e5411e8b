#include "ks/train.hpp"

#include <iostream>
#include <numeric>
#include <optional>

#include "ks/dataset.hpp"

namespace ks {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch statistics)");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv.set("learning_rate", learning_rate);
  kv.set("epochs", epochs);
  kv.set("batch_size", batch_size);
  kv.set("momentum", momentum);
  kv.set("weight_decay", weight_decay);
  kv.set("seed", seed);
  kv.set("backbone_batch_stats", backbone_batch_stats);
  kv.set("allow_block_mismatch", allow_block_mismatch);
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, TrainConfig d) {
  d.learning_rate = kv.get_double_or("learning_rate", d.learning_rate);
  d.epochs = int(kv.get_int_or("epochs", d.epochs));
  d.batch_size = int(kv.get_int_or("batch_size", d.batch_size));
  d.momentum = kv.get_double_or("momentum", d.momentum);
  d.weight_decay = kv.get_double_or("weight_decay", d.weight_decay);
  d.seed = kv.get_u64_or("seed", d.seed);
  d.backbone_batch_stats = kv.get_bool_or("backbone_batch_stats", d.backbone_batch_stats);
  d.allow_block_mismatch = kv.get_bool_or("allow_block_mismatch", d.allow_block_mismatch);
  d.validate();
  return d;
}

void Sgd::step(std::span<Tensor<float>* const> params, std::span<const Tensor<float>> grads) {
  if (velocity_.empty())
    for (auto* p : params) velocity_.push_back(Tensor<float>::zeros(p->shape()));
  const float lr = float(lr_), mu = float(momentum_), wd = float(decay_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = velocity_[i].data();
    auto& p = params[i]->data();
    if (wd != 0.0f)
      v = mu * v + grads[i].data() + wd * p;
    else
      v = mu * v + grads[i].data();
    p -= lr * v;
  }
}

void check_block_alignment(const ModelConfig& config, int block_size, bool allow_mismatch) {
  if (block_size == config.patch_size) return;
  if (!allow_mismatch)
    throw ConfigError("block size " + std::to_string(block_size) + " differs from patch size " +
                      std::to_string(config.patch_size) + " (pass the override flag to allow it)");
  std::cerr << "warning: block size " << block_size << " != patch size " << config.patch_size
            << "; shuffled pixels will cross patch boundaries\n";
}

namespace {

/// One pass of mini-batch training over `data`. Group selection and
/// normalization behavior come from `mode`.
void train_epochs(ModelParams<float>& params, const LabeledImages& data, const TrainConfig& cfg,
                  const ForwardMode& mode, std::uint64_t order_seed, TrainLog* log) {
  std::vector<Tensor<float>*> trainable;
  if (mode.track_pair) for_each_learnable(params.pair, [&](const std::string&, Tensor<float>& t) { trainable.push_back(&t); });
  if (mode.track_backbone)
    for_each_learnable(params.backbone, [&](const std::string&, Tensor<float>& t) { trainable.push_back(&t); });

  Sgd sgd(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  SplitMix64 order_rng(order_seed);
  std::vector<std::size_t> order(data.size());
  std::vector<ImageU8> batch_images;
  std::vector<int> batch_labels;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
      if (end - start < 2) break;  // batch statistics need two samples
      batch_images.clear();
      batch_labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch_images.push_back(data.images[order[i]]);
        batch_labels.push_back(data.labels[order[i]]);
      }
      Tape<float> tape;
      const auto x = tape.constant(to_tensor<float>(batch_images));
      auto pass = forward(tape, params, x, mode);
      const auto loss = softmax_cross_entropy(pass.logits, std::span<const int>(batch_labels));
      tape.backward(loss);

      std::vector<Tensor<float>> grads;
      for (const auto& v : pass.pair_params) grads.push_back(tape.gradient(v));
      for (const auto& v : pass.backbone_params) grads.push_back(tape.gradient(v));
      sgd.step(trainable, grads);
      apply_norm_stats(params, pass.norm_stats, 0.9f);

      const auto preds = argmax_rows(pass.logits.value());
      for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == batch_labels[i];
      loss_sum += double(loss.value().item()) * double(end - start);
      seen += end - start;
    }
    if (log && seen) {
      log->epoch_loss.push_back(loss_sum / double(seen));
      log->epoch_accuracy.push_back(double(correct) / double(seen));
    }
  }
}

}  // namespace

ModelParams<float> pretrain_backbone(const LabeledImages& data, const ModelConfig& config, const TrainConfig& train,
                                     TrainLog* log) {
  train.validate();
  if (data.empty()) throw DataError("pretraining needs a nonempty dataset");
  auto params = init_model(config, substream_seed(train.seed, "init"));
  train_epochs(params, data, train, ForwardMode::pretraining(), substream_seed(train.seed, "pretrain-order"), log);
  return params;
}

EmbeddingHeadPair<float> finetune_pair(const ModelParams<float>& pretrained, const SecretKey& key, int block_size,
                                       const LabeledImages& data, const TrainConfig& train, TrainLog* log) {
  train.validate();
  if (data.empty()) throw DataError("fine-tuning needs a nonempty dataset");
  check_block_alignment(pretrained.config, block_size, train.allow_block_mismatch);
  const auto encrypted = encrypt_dataset(data, key, block_size);
  ModelParams<float> params = pretrained;
  params.backbone_frozen = true;
  train_epochs(params, encrypted, train, ForwardMode::finetuning(train.backbone_batch_stats),
               substream_seed(train.seed, "finetune-order", key.seed), log);
  return params.pair;
}

double accuracy(const BatchPredictor& predict, const LabeledImages& data, std::size_t chunk) {
  if (data.empty()) throw EmptySelection("accuracy of an empty dataset");
  std::size_t correct = 0;
  const std::span<const ImageU8> all(data.images);
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    const auto preds = predict(all.subspan(start, n));
    for (std::size_t i = 0; i < n; ++i) correct += preds[i] == data.labels[start + i];
  }
  return double(correct) / double(data.size());
}

BatchPredictor model_predictor(const ModelParams<float>& params, const PermutationVector* perm) {
  std::optional<PermutationVector> p;
  if (perm) p = *perm;
  return [params, p](std::span<const ImageU8> images) {
    if (!p) return predict(params, to_tensor<float>(images));
    Tape<float> tape;
    const auto x = block_shuffle(tape.constant(to_tensor<float>(images)), *p);
    return argmax_rows(forward(tape, params, x, ForwardMode::inference()).logits.value());
  };
}

}  // namespace ks
