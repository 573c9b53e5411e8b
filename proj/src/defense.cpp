#include "ks/defense.hpp"

#include <algorithm>
#include <unordered_set>

#include "ks/dataset.hpp"
#include "ks/parallel.hpp"

namespace ks {

DefendedClassifier::DefendedClassifier(ModelConfig config, Backbone<float> backbone, std::vector<PoolEntry> pool,
                                       int block_size, std::uint64_t sampler_seed)
    : config_(std::move(config)), pool_(std::move(pool)), block_size_(block_size), sampler_seed_(sampler_seed) {
  if (pool_.empty()) throw KeyError("a defense needs at least one key");
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    auto& e = pool_[i];
    check_pair_shape(config_, e.pair);
    if (e.perm.block_size() != block_size_)
      throw DimensionError("pool entry " + std::to_string(i) + " has block size " +
                           std::to_string(e.perm.block_size()));
    e.pair.key_id = static_cast<int>(i);
    ModelParams<float> m;
    m.config = config_;
    m.backbone = backbone;
    m.pair = e.pair;
    m.backbone_frozen = true;
    models_.push_back(std::move(m));
  }
}

const PoolEntry& DefendedClassifier::entry(std::size_t index) const {
  if (index >= pool_.size())
    throw IndexError("key index " + std::to_string(index) + " outside pool of " + std::to_string(pool_.size()));
  return pool_[index];
}

const ModelParams<float>& DefendedClassifier::model(std::size_t index) const {
  entry(index);
  return models_[index];
}

Tensor<float> DefendedClassifier::predict_with_key(const Tensor<float>& batch, std::size_t index) const {
  const auto& e = entry(index);
  Tape<float> tape;
  const auto x = block_shuffle(tape.constant(batch), e.perm);
  return forward(tape, models_[index], x, ForwardMode::inference()).logits.value();
}

Tensor<float> DefendedClassifier::predict_with_key(const ImageU8& image, std::size_t index) const {
  return predict_with_key(to_tensor<float>(std::span<const ImageU8>(&image, 1)), index);
}

KeySampler DefendedClassifier::sampler(std::uint64_t stream) const {
  return KeySampler(substream_seed(sampler_seed_, "key-sampler", stream), pool_.size());
}

DefendedPrediction defended_predict(const DefendedClassifier& defense, KeySampler& sampler, const ImageU8& image) {
  const std::size_t r = sampler.next();
  const auto logits = defense.predict_with_key(image, r);
  return {argmax_rows(logits).front(), r};
}

std::vector<DefendedPrediction> defended_predict(const DefendedClassifier& defense, KeySampler& sampler,
                                                 const Tensor<float>& batch) {
  const Index n = batch.dim(0);
  std::vector<std::size_t> draws(static_cast<std::size_t>(n));
  for (auto& d : draws) d = sampler.next();
  // Group images by drawn key so each key runs one batched forward.
  std::vector<DefendedPrediction> out(draws.size());
  const Index per = batch.size() / std::max<Index>(n, 1);
  for (std::size_t k = 0; k < defense.size(); ++k) {
    std::vector<Index> members;
    for (std::size_t i = 0; i < draws.size(); ++i)
      if (draws[i] == k) members.push_back(Index(i));
    if (members.empty()) continue;
    Shape s = batch.shape();
    s[0] = Index(members.size());
    Tensor<float> sub(s);
    for (std::size_t j = 0; j < members.size(); ++j)
      sub.data().segment(Index(j) * per, per) = batch.data().segment(members[j] * per, per);
    const auto labels = argmax_rows(defense.predict_with_key(sub, k));
    for (std::size_t j = 0; j < members.size(); ++j) out[std::size_t(members[j])] = {labels[j], k};
  }
  return out;
}

namespace {
void check_distinct(std::span<const SecretKey> keys) {
  if (keys.empty()) throw KeyError("key list is empty");
  std::unordered_set<std::uint64_t> seen;
  for (const auto& k : keys)
    if (!seen.insert(k.seed).second) throw KeyError("duplicate key seed " + std::to_string(k.seed));
}
}  // namespace

DefendedClassifier assemble_defense(const ModelParams<float>& pretrained, std::span<const SecretKey> keys,
                                    std::vector<EmbeddingHeadPair<float>> pairs, int block_size,
                                    std::uint64_t sampler_seed) {
  check_distinct(keys);
  if (pairs.size() != keys.size()) throw KeyError("pair count differs from key count");
  std::vector<PoolEntry> pool;
  for (std::size_t i = 0; i < keys.size(); ++i)
    pool.push_back({keys[i], derive_permutation(keys[i], block_size), std::move(pairs[i])});
  return DefendedClassifier(pretrained.config, pretrained.backbone, std::move(pool), block_size, sampler_seed);
}

DefendedClassifier build_defense(const ModelParams<float>& pretrained, std::span<const SecretKey> keys,
                                 const LabeledImages& data, const TrainConfig& train, int block_size,
                                 std::uint64_t sampler_seed) {
  check_distinct(keys);
  std::vector<EmbeddingHeadPair<float>> pairs(keys.size());
  parallel_for(keys.size(), [&](std::size_t i) { pairs[i] = finetune_pair(pretrained, keys[i], block_size, data, train); });
  return assemble_defense(pretrained, keys, std::move(pairs), block_size, sampler_seed);
}

// ---------------------------------------------------------------------------

KeyValues DefenseManifest::to_key_values() const {
  KeyValues kv;
  kv.set("block_size", block_size);
  kv.set("n", pool_size);
  kv.set("key_file", key_file.string());
  kv.set("backbone", backbone_file.string());
  kv.set("plain_pair", plain_pair_file.string());
  kv.set("config", config_file.string());
  kv.set("sampler_seed", sampler_seed);
  for (std::size_t i = 0; i < pair_files.size(); ++i) kv.set("pair." + std::to_string(i), pair_files[i].string());
  return kv;
}

DefenseManifest DefenseManifest::from_key_values(const KeyValues& kv) {
  DefenseManifest m;
  m.block_size = static_cast<int>(kv.get_int("block_size"));
  const auto n = kv.get_int("n");
  if (n < 1) throw ConfigError("manifest: n must be >= 1");
  m.pool_size = static_cast<std::size_t>(n);
  m.key_file = kv.get("key_file");
  m.backbone_file = kv.get("backbone");
  m.plain_pair_file = kv.get("plain_pair");
  m.config_file = kv.get("config");
  m.sampler_seed = kv.get_u64("sampler_seed");
  for (std::size_t i = 0; i < m.pool_size; ++i) m.pair_files.emplace_back(kv.get("pair." + std::to_string(i)));
  return m;
}

void DefenseManifest::write(const std::filesystem::path& path) const { to_key_values().write(path); }

DefenseManifest DefenseManifest::read(const std::filesystem::path& path) {
  auto m = from_key_values(KeyValues::read(path));
  m.base_dir = path.parent_path();
  m.source = path;
  return m;
}

namespace {
std::filesystem::path resolve(const DefenseManifest& m, const std::filesystem::path& p) {
  return p.is_absolute() ? p : m.base_dir / p;
}
}  // namespace

void save_pretrained(const std::filesystem::path& dir, const ModelParams<float>& model) {
  std::filesystem::create_directories(dir);
  save_backbone(dir / "backbone.bin", model.backbone);
  save_pair(dir / "pair_plain.bin", model.pair);
  save_config(dir / "config", model.config);
}

ModelParams<float> load_pretrained(const std::filesystem::path& dir) {
  ModelParams<float> m;
  m.config = load_config(dir / "config");
  m.backbone = load_backbone(dir / "backbone.bin", m.config);
  m.pair = load_pair(dir / "pair_plain.bin", m.config, -1);
  return m;
}

DefenseManifest save_defense(const std::filesystem::path& dir, const DefendedClassifier& defense,
                             const ModelParams<float>& pretrained) {
  std::filesystem::create_directories(dir);
  DefenseManifest m;
  m.base_dir = dir;
  m.block_size = defense.block_size();
  m.pool_size = defense.size();
  m.sampler_seed = defense.sampler_seed();
  m.key_file = "keys.txt";
  m.backbone_file = "backbone.bin";
  m.plain_pair_file = "pair_plain.bin";
  m.config_file = "config";
  std::vector<SecretKey> keys;
  for (std::size_t i = 0; i < defense.size(); ++i) {
    keys.push_back(defense.entry(i).key);
    m.pair_files.emplace_back("pair_" + std::to_string(i) + ".bin");
    save_pair(dir / m.pair_files.back(), defense.entry(i).pair);
  }
  write_key_file(dir / m.key_file, keys);
  save_backbone(dir / m.backbone_file, defense.backbone());
  save_pair(dir / m.plain_pair_file, pretrained.pair);
  save_config(dir / m.config_file, defense.config());
  m.source = dir / "defense.manifest";
  m.write(m.source);
  return m;
}

ModelParams<float> load_pretrained(const DefenseManifest& manifest) {
  ModelParams<float> m;
  m.config = load_config(resolve(manifest, manifest.config_file));
  m.backbone = load_backbone(resolve(manifest, manifest.backbone_file), m.config);
  m.pair = load_pair(resolve(manifest, manifest.plain_pair_file), m.config, -1);
  return m;
}

DefendedClassifier load_defense(const DefenseManifest& manifest) {
  const auto pretrained = load_pretrained(manifest);
  auto keys = read_key_file(resolve(manifest, manifest.key_file));
  if (keys.size() < manifest.pool_size)
    throw FormatError("key file has " + std::to_string(keys.size()) + " keys, manifest needs " +
                      std::to_string(manifest.pool_size));
  keys.resize(manifest.pool_size);
  std::vector<EmbeddingHeadPair<float>> pairs;
  for (std::size_t i = 0; i < manifest.pool_size; ++i)
    pairs.push_back(load_pair(resolve(manifest, manifest.pair_files[i]), pretrained.config, int(i)));
  return assemble_defense(pretrained, keys, std::move(pairs), manifest.block_size, manifest.sampler_seed);
}

}  // namespace ks
