#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ks/keyed_transform.hpp"
#include "ks/model.hpp"

namespace ks {

/// SGD with momentum. Fine-tuning defaults follow the reference setup
/// (learning rate 0.01); epochs are raised for small datasets.
struct TrainConfig {
  double learning_rate = 0.01;
  int epochs = 10;
  int batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Frozen backbone normalizes with batch statistics instead of its stored
  /// running statistics during fine-tuning.
  bool backbone_batch_stats = false;
  /// Permit block_size != patch_size (a warning is printed).
  bool allow_block_mismatch = false;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv, TrainConfig defaults);
  static TrainConfig from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig{}); }
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  ///< running training accuracy per epoch
};

/// Momentum SGD over an ordered list of parameters:
/// v = momentum * v + (g + weight_decay * p);  p -= lr * v.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay) : lr_(lr), momentum_(momentum), decay_(weight_decay) {}

  void step(std::span<Tensor<float>* const> params, std::span<const Tensor<float>> grads);

 private:
  double lr_, momentum_, decay_;
  std::vector<Tensor<float>> velocity_;
};

/// Trains every parameter of a freshly initialized model on plain images.
/// Throws DataError on an empty dataset.
ModelParams<float> pretrain_backbone(const LabeledImages& data, const ModelConfig& config,
                                     const TrainConfig& train, TrainLog* log = nullptr);

/// Starting from the pretrained pair, trains only the embedding and head on
/// images shuffled with `key`; the backbone stays bit-identical.
EmbeddingHeadPair<float> finetune_pair(const ModelParams<float>& pretrained, const SecretKey& key, int block_size,
                                       const LabeledImages& data, const TrainConfig& train,
                                       TrainLog* log = nullptr);

/// Checks block/patch alignment; throws ConfigError unless the override is set.
void check_block_alignment(const ModelConfig& config, int block_size, bool allow_mismatch);

using BatchPredictor = std::function<std::vector<int>(std::span<const ImageU8>)>;

/// Fraction of images whose prediction equals the label. Throws EmptySelection
/// on an empty dataset.
double accuracy(const BatchPredictor& predict, const LabeledImages& data, std::size_t chunk = 128);

/// Plain (unkeyed) model predictor, or keyed when `perm` is given.
BatchPredictor model_predictor(const ModelParams<float>& params, const PermutationVector* perm = nullptr);

}  // namespace ks
