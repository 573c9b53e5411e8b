#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ks/dataset.hpp"
#include "ks/defense.hpp"

using namespace ks;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.depth = 1;
  c.patch_size = 4;
  c.kernel_size = 3;
  c.num_classes = 5;
  c.image_side = 8;
  return c;
}

DefendedClassifier tiny_defense(std::size_t n, std::uint64_t sampler_seed = 1) {
  const auto pre = init_model(tiny_config(), 1);
  std::vector<SecretKey> keys;
  std::vector<EmbeddingHeadPair<float>> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    keys.push_back({100 + i});
    pairs.push_back(init_model(tiny_config(), 10 + i).pair);
  }
  return assemble_defense(pre, keys, pairs, 4, sampler_seed);
}

Tensor<float> random_batch(Index n, SplitMix64& rng) {
  Tensor<float> t({n, 3, 8, 8});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("pool construction validates keys") {
  const auto pre = init_model(tiny_config(), 1);
  const std::vector<SecretKey> dup{{1}, {2}, {1}};
  std::vector<EmbeddingHeadPair<float>> pairs(3, pre.pair);
  CHECK_THROWS_AS(assemble_defense(pre, dup, pairs, 4, 0), KeyError);
  CHECK_THROWS_AS(assemble_defense(pre, std::vector<SecretKey>{}, {}, 4, 0), KeyError);
  const std::vector<SecretKey> two{{1}, {2}};
  CHECK_THROWS_AS(assemble_defense(pre, two, pairs, 4, 0), KeyError);
  CHECK_THROWS_AS(build_defense(pre, dup, LabeledImages{}, TrainConfig{}, 4, 0), KeyError);
}

TEST_CASE("entries carry 0-based key ids and their permutations") {
  const auto d = tiny_defense(3);
  CHECK(d.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(d.entry(i).pair.key_id == int(i));
    CHECK(d.entry(i).perm == derive_permutation(d.entry(i).key, 4));
    CHECK(checksum(d.model(i).backbone) == checksum(d.backbone()));
  }
  CHECK_THROWS_AS(d.entry(3), IndexError);
  SplitMix64 rng(1);
  CHECK_THROWS_AS(d.predict_with_key(random_batch(1, rng), 3), IndexError);
}

TEST_CASE("predict_with_key shuffles then runs the matching pair") {
  const auto d = tiny_defense(3);
  SplitMix64 rng(2);
  const auto x = random_batch(4, rng);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& perm = d.entry(k).perm;
    Tensor<float> shuffled(x.shape());
    for (Index b = 0; b < 4; ++b) {
      const Index per = 3 * 8 * 8;
      permute_blocks<float>(std::span<const float>(x.ptr() + b * per, std::size_t(per)),
                            std::span<float>(shuffled.ptr() + b * per, std::size_t(per)), 3, 8, 8, perm);
    }
    CHECK(d.predict_with_key(x, k) == logits(d.model(k), shuffled));
  }
}

TEST_CASE("the sampler is uniform over the pool") {
  const auto d = tiny_defense(5);
  auto s = d.sampler(0);
  std::vector<int> counts(5, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto k = s.next();
    REQUIRE(k < 5);
    ++counts[k];
  }
  for (int c : counts) {
    CHECK(double(c) / draws >= 0.16);
    CHECK(double(c) / draws <= 0.24);
  }
}

TEST_CASE("sampler streams are reproducible and independent") {
  const auto d = tiny_defense(5);
  auto a = d.sampler(3), b = d.sampler(3), c = d.sampler(4);
  int same = 0;
  for (int i = 0; i < 200; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    same += x == c.next();
  }
  CHECK(same < 100);
}

TEST_CASE("defended prediction equals the forced-key prediction for the drawn key") {
  const auto d = tiny_defense(4);
  SplitMix64 rng(3);
  const auto x = random_batch(12, rng);
  auto sampler = d.sampler(0);
  const auto preds = defended_predict(d, sampler, x);
  REQUIRE(preds.size() == 12);
  auto replay = d.sampler(0);
  for (Index i = 0; i < 12; ++i) {
    const auto k = replay.next();
    CHECK(preds[std::size_t(i)].key_index == k);
    CHECK(preds[std::size_t(i)].label == argmax_rows(d.predict_with_key(x.slice(i, i + 1), k))[0]);
  }

  const auto img = to_image(x, 0);
  auto s1 = d.sampler(9);
  const auto one = defended_predict(d, s1, img);
  auto s2 = d.sampler(9);
  CHECK(one.key_index == s2.next());
  CHECK(one.label == argmax_rows(d.predict_with_key(img, one.key_index))[0]);
}

TEST_CASE("a single-key pool is the deterministic keyed model") {
  const auto d = tiny_defense(1);
  SplitMix64 rng(4);
  const auto x = random_batch(6, rng);
  auto sampler = d.sampler(0);
  const auto preds = defended_predict(d, sampler, x);
  const auto expected = argmax_rows(d.predict_with_key(x, 0));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(preds[i].key_index == 0);
    CHECK(preds[i].label == expected[i]);
  }
}

TEST_CASE("manifest round trip reproduces every forced-key prediction") {
  const auto dir = std::filesystem::temp_directory_path() / "ks_defense_test";
  std::filesystem::remove_all(dir);
  const auto pre = init_model(tiny_config(), 1);
  const auto d = tiny_defense(3, 77);
  const auto manifest = save_defense(dir, d, pre);
  const auto loaded = load_defense(DefenseManifest::read(dir / "defense.manifest"));
  CHECK(loaded.size() == 3);
  CHECK(loaded.sampler_seed() == 77);
  CHECK(loaded.block_size() == 4);
  CHECK(checksum(loaded.backbone()) == checksum(d.backbone()));
  SplitMix64 rng(5);
  const auto x = random_batch(3, rng);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(loaded.entry(k).key == d.entry(k).key);
    CHECK(loaded.predict_with_key(x, k) == d.predict_with_key(x, k));
  }
  const auto plain = load_pretrained(DefenseManifest::read(dir / "defense.manifest"));
  CHECK(checksum(plain.pair) == checksum(pre.pair));

  // Relative paths resolve against the manifest's directory.
  const auto moved = std::filesystem::temp_directory_path() / "ks_defense_moved";
  std::filesystem::remove_all(moved);
  std::filesystem::rename(dir, moved);
  CHECK(load_defense(DefenseManifest::read(moved / "defense.manifest")).size() == 3);

  // A truncated key file is a format error.
  std::ofstream(moved / "keys.txt") << "100\n";
  CHECK_THROWS_AS(load_defense(DefenseManifest::read(moved / "defense.manifest")), FormatError);
  std::filesystem::remove_all(moved);
}

TEST_CASE("build_defense fine-tunes one pair per key over a frozen backbone") {
  auto cfg = tiny_config();
  cfg.image_side = 16;
  const auto data = synthesize_dataset(40, 16, 1, 5);
  TrainConfig t;
  t.epochs = 1;
  t.seed = 3;
  const auto pre = pretrain_backbone(data, cfg, t);
  const std::vector<SecretKey> keys{{11}, {22}};
  const auto d = build_defense(pre, keys, data, t, 4, 0);
  CHECK(checksum(d.backbone()) == checksum(pre.backbone));
  CHECK(checksum(d.entry(0).pair) == checksum(finetune_pair(pre, keys[0], 4, data, t)));
  CHECK(checksum(d.entry(0).pair) != checksum(d.entry(1).pair));
}
