#include "ks/model.hpp"

#include <cmath>
#include <map>

namespace ks {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (depth < 1) fail("depth must be >= 1");
  if (patch_size < 1) fail("patch_size must be >= 1");
  if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd and positive");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (image_side < 1 || image_side % patch_size != 0)
    fail("image_side " + std::to_string(image_side) + " is not a multiple of patch_size " +
         std::to_string(patch_size));
}

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv;
  kv.set("hidden_dim", hidden_dim);
  kv.set("depth", depth);
  kv.set("patch_size", patch_size);
  kv.set("kernel_size", kernel_size);
  kv.set("num_classes", num_classes);
  kv.set("image_side", image_side);
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  c.hidden_dim = static_cast<int>(kv.get_int_or("hidden_dim", c.hidden_dim));
  c.depth = static_cast<int>(kv.get_int_or("depth", c.depth));
  c.patch_size = static_cast<int>(kv.get_int_or("patch_size", c.patch_size));
  c.kernel_size = static_cast<int>(kv.get_int_or("kernel_size", c.kernel_size));
  c.num_classes = static_cast<int>(kv.get_int_or("num_classes", c.num_classes));
  c.image_side = static_cast<int>(kv.get_int_or("image_side", c.image_side));
  c.validate();
  return c;
}

namespace {

Tensor<float> uniform_tensor(Shape shape, double bound, SplitMix64& rng) {
  Tensor<float> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

NormParams<float> fresh_norm(Index channels) {
  return {Tensor<float>::constant({channels}, 1.0f), Tensor<float>::zeros({channels}),
          Tensor<float>::zeros({channels}), Tensor<float>::constant({channels}, 1.0f)};
}

template <typename T>
void hash_tensor(std::uint64_t& h, const Tensor<T>& t) {
  auto mix = [&](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto d : t.shape()) mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
  mix(reinterpret_cast<const unsigned char*>(t.ptr()), static_cast<std::size_t>(t.size()) * sizeof(T));
}

std::map<std::string, const Tensor<float>*> index_named(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor<float>*> m;
  for (const auto& t : tensors) m[t.name] = &t.value;
  return m;
}

template <typename Target>
void fill_from_named(Target& target, const std::vector<NamedTensor>& tensors, const char* what) {
  const auto named = index_named(tensors);
  std::size_t used = 0;
  for_each_tensor(target, [&](const std::string& name, Tensor<float>& t) {
    const auto it = named.find(name);
    if (it == named.end()) throw FormatError(std::string(what) + " checkpoint is missing '" + name + "'");
    t = *it->second;
    ++used;
  });
  if (used != tensors.size())
    throw FormatError(std::string(what) + " checkpoint has " + std::to_string(tensors.size()) +
                      " tensors, expected " + std::to_string(used));
}

}  // namespace

ModelParams<float> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  const Index h = config.hidden_dim, p = config.patch_size, k = config.kernel_size, c = config.num_classes;
  ModelParams<float> m;
  m.config = config;

  const double embed_bound = 1.0 / std::sqrt(double(3 * p * p));
  m.pair.embed_weight = uniform_tensor({h, 3, p, p}, embed_bound, rng);
  m.pair.embed_bias = uniform_tensor({h}, embed_bound, rng);
  m.pair.embed_norm = fresh_norm(h);

  for (int d = 0; d < config.depth; ++d) {
    MixerBlock<float> b;
    const double dw_bound = 1.0 / std::sqrt(double(k * k));
    b.depthwise_weight = uniform_tensor({h, 1, k, k}, dw_bound, rng);
    b.depthwise_bias = uniform_tensor({h}, dw_bound, rng);
    b.depthwise_norm = fresh_norm(h);
    const double pw_bound = 1.0 / std::sqrt(double(h));
    b.pointwise_weight = uniform_tensor({h, h}, pw_bound, rng);
    b.pointwise_bias = uniform_tensor({h}, pw_bound, rng);
    b.pointwise_norm = fresh_norm(h);
    m.backbone.blocks.push_back(std::move(b));
  }

  const double head_bound = 1.0 / std::sqrt(double(h));
  m.pair.head_weight = uniform_tensor({c, h}, head_bound, rng);
  m.pair.head_bias = uniform_tensor({c}, head_bound, rng);
  return m;
}

std::uint64_t checksum(const Backbone<float>& backbone) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_tensor(backbone, [&](const std::string&, const Tensor<float>& t) { hash_tensor(h, t); });
  return h;
}

std::uint64_t checksum(const EmbeddingHeadPair<float>& pair) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_tensor(pair, [&](const std::string&, const Tensor<float>& t) { hash_tensor(h, t); });
  return h;
}

std::vector<NamedTensor> to_named(const Backbone<float>& backbone) {
  std::vector<NamedTensor> out;
  for_each_tensor(backbone, [&](const std::string& name, const Tensor<float>& t) { out.push_back({name, t}); });
  return out;
}

std::vector<NamedTensor> to_named(const EmbeddingHeadPair<float>& pair) {
  std::vector<NamedTensor> out;
  for_each_tensor(pair, [&](const std::string& name, const Tensor<float>& t) { out.push_back({name, t}); });
  return out;
}

Backbone<float> backbone_from_named(const ModelConfig& config, const std::vector<NamedTensor>& tensors) {
  // Shapes come from a freshly initialized model of the same config.
  auto reference = init_model(config, 0).backbone;
  Backbone<float> bb = reference;
  fill_from_named(bb, tensors, "backbone");
  std::vector<Shape> expected;
  for_each_tensor(reference, [&](const std::string&, const Tensor<float>& t) { expected.push_back(t.shape()); });
  std::size_t i = 0;
  for_each_tensor(bb, [&](const std::string& name, const Tensor<float>& t) {
    if (t.shape() != expected[i++])
      throw FormatError("backbone tensor '" + name + "' has shape " + shape_string(t.shape()));
  });
  return bb;
}

EmbeddingHeadPair<float> pair_from_named(const ModelConfig& config, const std::vector<NamedTensor>& tensors) {
  EmbeddingHeadPair<float> pair;
  fill_from_named(pair, tensors, "pair");
  try {
    check_pair_shape(config, pair);
  } catch (const ShapeError& e) {
    throw FormatError(e.what());
  }
  return pair;
}

void save_backbone(const std::filesystem::path& path, const Backbone<float>& backbone) {
  save_checkpoint(path, to_named(backbone));
}

void save_pair(const std::filesystem::path& path, const EmbeddingHeadPair<float>& pair) {
  save_checkpoint(path, to_named(pair));
}

Backbone<float> load_backbone(const std::filesystem::path& path, const ModelConfig& config) {
  return backbone_from_named(config, load_checkpoint(path));
}

EmbeddingHeadPair<float> load_pair(const std::filesystem::path& path, const ModelConfig& config, int key_id) {
  auto pair = pair_from_named(config, load_checkpoint(path));
  pair.key_id = key_id;
  return pair;
}

void save_config(const std::filesystem::path& path, const ModelConfig& config) {
  config.to_key_values().write(path);
}

ModelConfig load_config(const std::filesystem::path& path) {
  return ModelConfig::from_key_values(KeyValues::read(path));
}

}  // namespace ks
