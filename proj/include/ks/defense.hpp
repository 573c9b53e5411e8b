#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ks/config_text.hpp"
#include "ks/keyed_transform.hpp"
#include "ks/model.hpp"
#include "ks/rng.hpp"
#include "ks/train.hpp"

namespace ks {

/// One secret key with its permutation and the pair fine-tuned under it.
struct PoolEntry {
  SecretKey key;
  PermutationVector perm;
  EmbeddingHeadPair<float> pair;
};

class KeySampler;

/// Frozen backbone plus N (key, embedding, head) triples. Entry i carries
/// key_id i; indices are 0-based throughout.
class DefendedClassifier {
 public:
  DefendedClassifier(ModelConfig config, Backbone<float> backbone, std::vector<PoolEntry> pool, int block_size,
                     std::uint64_t sampler_seed);

  std::size_t size() const { return pool_.size(); }
  const ModelConfig& config() const { return config_; }
  const Backbone<float>& backbone() const { return models_.front().backbone; }
  const PoolEntry& entry(std::size_t index) const;
  int block_size() const { return block_size_; }
  std::uint64_t sampler_seed() const { return sampler_seed_; }

  /// Backbone with pair `index` attached.
  const ModelParams<float>& model(std::size_t index) const;

  /// Logits of images in [0, 1] after shuffling with key `index`.
  /// Throws IndexError when index >= size().
  Tensor<float> predict_with_key(const Tensor<float>& batch, std::size_t index) const;
  Tensor<float> predict_with_key(const ImageU8& image, std::size_t index) const;

  /// Independent sampler stream; concurrent callers each take their own.
  KeySampler sampler(std::uint64_t stream = 0) const;

 private:
  ModelConfig config_;
  std::vector<PoolEntry> pool_;
  std::vector<ModelParams<float>> models_;
  int block_size_;
  std::uint64_t sampler_seed_;
};

/// Uniform draws over the key pool from a splitmix64 stream.
class KeySampler {
 public:
  KeySampler(std::uint64_t seed, std::size_t pool_size) : rng_(seed), pool_size_(pool_size) {}
  std::size_t next() { return static_cast<std::size_t>(rng_.below(pool_size_)); }

 private:
  SplitMix64 rng_;
  std::size_t pool_size_;
};

struct DefendedPrediction {
  int label;
  std::size_t key_index;
};

/// Draws a key per image, shuffles with it, runs the matching pair, and
/// returns the argmax (lowest index on ties) with the key used.
DefendedPrediction defended_predict(const DefendedClassifier& defense, KeySampler& sampler, const ImageU8& image);
std::vector<DefendedPrediction> defended_predict(const DefendedClassifier& defense, KeySampler& sampler,
                                                 const Tensor<float>& batch);

/// Fine-tunes one pair per key. Throws KeyError on duplicate or empty keys.
DefendedClassifier build_defense(const ModelParams<float>& pretrained, std::span<const SecretKey> keys,
                                 const LabeledImages& data, const TrainConfig& train, int block_size,
                                 std::uint64_t sampler_seed);

/// Assembles a defense from already trained pairs.
DefendedClassifier assemble_defense(const ModelParams<float>& pretrained, std::span<const SecretKey> keys,
                                    std::vector<EmbeddingHeadPair<float>> pairs, int block_size,
                                    std::uint64_t sampler_seed);

/// `defense.manifest`: key = value text naming the block size, pool size,
/// key file, pair checkpoints, backbone, plain pair, config, sampler seed.
/// Relative paths resolve against the manifest's directory.
struct DefenseManifest {
  int block_size = 4;
  std::size_t pool_size = 0;
  std::filesystem::path key_file;
  std::vector<std::filesystem::path> pair_files;
  std::filesystem::path backbone_file;
  std::filesystem::path plain_pair_file;
  std::filesystem::path config_file;
  std::uint64_t sampler_seed = 0;

  KeyValues to_key_values() const;
  static DefenseManifest from_key_values(const KeyValues& kv);
  void write(const std::filesystem::path& path) const;
  static DefenseManifest read(const std::filesystem::path& path);
  std::filesystem::path base_dir;
  std::filesystem::path source;  ///< file the manifest was read from or written to
};

/// Writes checkpoints, key file, config, and manifest into `dir`.
DefenseManifest save_defense(const std::filesystem::path& dir, const DefendedClassifier& defense,
                             const ModelParams<float>& pretrained);

DefendedClassifier load_defense(const DefenseManifest& manifest);
/// The pretrained model (backbone + original pair) a manifest points to.
ModelParams<float> load_pretrained(const DefenseManifest& manifest);

/// Writes backbone.bin, pair_plain.bin and config into `dir`.
void save_pretrained(const std::filesystem::path& dir, const ModelParams<float>& model);
ModelParams<float> load_pretrained(const std::filesystem::path& dir);

}  // namespace ks
