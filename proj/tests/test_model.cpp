#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "ks/dataset.hpp"
#include "ks/model.hpp"
#include "ks/train.hpp"

using namespace ks;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.depth = 2;
  c.patch_size = 4;
  c.kernel_size = 3;
  c.num_classes = 4;
  c.image_side = 16;
  return c;
}

Tensor<float> random_batch(Index n, Index side, SplitMix64& rng) {
  Tensor<float> t({n, 3, side, side});
  for (Index i = 0; i < t.size(); ++i) t[i] = float(rng.uniform());
  return t;
}

// Nonzero running statistics so Eval-mode normalization is not an identity.
void perturb_norms(ModelParams<float>& m, SplitMix64& rng) {
  auto jitter = [&](NormParams<float>& n) {
    for (Index i = 0; i < n.running_mean.size(); ++i) {
      n.running_mean[i] = float(rng.uniform(-0.2, 0.2));
      n.running_var[i] = float(rng.uniform(0.5, 1.5));
      n.scale[i] = float(rng.uniform(0.5, 1.5));
      n.shift[i] = float(rng.uniform(-0.2, 0.2));
    }
  };
  jitter(m.pair.embed_norm);
  for (auto& b : m.backbone.blocks) {
    jitter(b.depthwise_norm);
    jitter(b.pointwise_norm);
  }
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  auto c = tiny_config();
  c.kernel_size = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.image_side = 18;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.num_classes = 1;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
  CHECK(ModelConfig::from_key_values(tiny_config().to_key_values()) == tiny_config());
}

TEST_CASE("init is deterministic per seed and logits have the class dimension") {
  const auto a = init_model(tiny_config(), 7), b = init_model(tiny_config(), 7), c = init_model(tiny_config(), 8);
  CHECK(checksum(a.backbone) == checksum(b.backbone));
  CHECK(checksum(a.pair) == checksum(b.pair));
  CHECK(checksum(a.backbone) != checksum(c.backbone));
  SplitMix64 rng(1);
  const auto x = random_batch(3, 16, rng);
  const auto l = logits(a, x);
  CHECK(l.shape() == Shape{3, 4});
  CHECK(l == logits(b, x));
}

TEST_CASE("forward rejects the wrong input shape") {
  const auto m = init_model(tiny_config(), 1);
  SplitMix64 rng(2);
  CHECK_THROWS_AS(logits(m, random_batch(2, 32, rng)), ShapeError);
}

TEST_CASE("zero head weights give logits equal to the head bias") {
  auto m = init_model(tiny_config(), 3);
  m.pair.head_weight.data().setZero();
  SplitMix64 rng(4);
  const auto l = logits(m, random_batch(2, 16, rng));
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 4; ++c) CHECK(l.at(b, c) == m.pair.head_bias[c]);
}

TEST_CASE("inference is equivariant to batch order") {
  auto m = init_model(tiny_config(), 5);
  SplitMix64 rng(6);
  perturb_norms(m, rng);
  const auto x = random_batch(4, 16, rng);
  Tensor<float> rev(x.shape());
  const Index per = x.size() / 4;
  for (Index b = 0; b < 4; ++b)
    for (Index j = 0; j < per; ++j) rev[(3 - b) * per + j] = x[b * per + j];
  const auto l = logits(m, x), lr = logits(m, rev);
  for (Index b = 0; b < 4; ++b)
    for (Index c = 0; c < 4; ++c) CHECK(std::abs(l.at(b, c) - lr.at(3 - b, c)) < 1e-5f);
}

TEST_CASE("finite differences through the whole network, input and pair weights") {
  auto m = cast_params<double>(init_model(tiny_config(), 9));
  SplitMix64 rng(10);
  Tensor<double> x({2, 3, 16, 16});
  for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform();
  const std::vector<int> labels{1, 3};

  auto through_input = [&](Tape<double>& tape, const Var<double>& in) {
    return softmax_cross_entropy(forward(tape, m, in, ForwardMode::inference()).logits,
                                 std::span<const int>(labels));
  };
  CHECK(finite_diff_check<double>(through_input, x, 1e-5, 200) < 1e-4);

  // Tracked pair gradients against central differences on every learnable pair tensor.
  const ForwardMode mode{NormMode::Eval, NormMode::Eval, true, false};
  auto loss_at = [&](const ModelParams<double>& params) {
    Tape<double> tape;
    return softmax_cross_entropy(forward(tape, params, tape.constant(x), mode).logits, std::span<const int>(labels))
        .value()
        .item();
  };
  Tape<double> tape;
  auto pass = forward(tape, m, tape.constant(x), mode);
  tape.backward(softmax_cross_entropy(pass.logits, std::span<const int>(labels)));
  std::size_t k = 0;
  double worst = 0;
  for_each_learnable(m.pair, [&](const std::string&, Tensor<double>& t) {
    const auto g = tape.gradient(pass.pair_params[k++]);
    for (Index i = 0; i < t.size(); i += 7) {
      const double orig = t[i];
      t[i] = orig + 1e-5;
      const double up = loss_at(m);
      t[i] = orig - 1e-5;
      const double down = loss_at(m);
      t[i] = orig;
      const double num = (up - down) / 2e-5;
      worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-8}));
    }
  });
  CHECK(k == pass.pair_params.size());
  CHECK(worst < 1e-4);
}

TEST_CASE("swap_pair replaces the pair and keeps the backbone") {
  const auto m = init_model(tiny_config(), 11);
  const auto other = init_model(tiny_config(), 12);
  const auto swapped = swap_pair(m, other.pair);
  CHECK(checksum(swapped.backbone) == checksum(m.backbone));
  CHECK(checksum(swapped.pair) == checksum(other.pair));
  // Swapping the original back is an involution.
  const auto back = swap_pair(swapped, m.pair);
  CHECK(checksum(back.pair) == checksum(m.pair));

  auto wide = tiny_config();
  wide.hidden_dim = 16;
  CHECK_THROWS_AS(swap_pair(m, init_model(wide, 1).pair), ShapeError);
}

TEST_CASE("checkpoints round trip and reject foreign shapes") {
  const auto dir = std::filesystem::temp_directory_path() / "ks_model_test";
  std::filesystem::create_directories(dir);
  const auto m = init_model(tiny_config(), 13);
  save_backbone(dir / "backbone.bin", m.backbone);
  save_pair(dir / "pair_0.bin", m.pair);
  save_config(dir / "config", m.config);
  CHECK(load_config(dir / "config") == m.config);
  CHECK(checksum(load_backbone(dir / "backbone.bin", m.config)) == checksum(m.backbone));
  const auto pair = load_pair(dir / "pair_0.bin", m.config, 3);
  CHECK(pair.key_id == 3);
  CHECK(checksum(pair) == checksum(m.pair));

  auto wide = tiny_config();
  wide.hidden_dim = 16;
  CHECK_THROWS_AS(load_pair(dir / "pair_0.bin", wide, 0), FormatError);
  CHECK_THROWS_AS(load_backbone(dir / "pair_0.bin", m.config), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("SGD with momentum follows the update rule") {
  Tensor<float> p({2}, {1.0f, -1.0f});
  std::vector<Tensor<float>*> params{&p};
  const std::vector<Tensor<float>> g{Tensor<float>({2}, {0.5f, 0.25f})};
  Sgd sgd(0.1, 0.9, 0.01);
  sgd.step(params, g);
  // v = g + wd p; p -= lr v
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.01)).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-1.0 - 0.1 * (0.25 - 0.01)).epsilon(1e-6));
  const float v0 = 0.5f + 0.01f, p0 = p[0];
  sgd.step(params, g);
  CHECK(p[0] == doctest::Approx(p0 - 0.1 * (0.9 * v0 + 0.5 + 0.01 * p0)).epsilon(1e-6));
}

TEST_CASE("training config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.learning_rate = 0;
  t.epochs = 0;
  CHECK_NOTHROW(t.validate());
  t.learning_rate = -1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.momentum = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("fine-tuning leaves the backbone bit-identical and moves the pair") {
  const auto data = synthesize_dataset(64, 16, 3, 4);
  TrainConfig t;
  t.epochs = 1;
  t.learning_rate = 0.05;
  t.seed = 1;
  const auto pre = pretrain_backbone(data, tiny_config(), t);
  const auto before = checksum(pre.backbone);
  const auto pair = finetune_pair(pre, {77}, 4, data, t);
  CHECK(checksum(pre.backbone) == before);
  CHECK(checksum(pair) != checksum(pre.pair));

  t.backbone_batch_stats = true;
  const auto pair2 = finetune_pair(pre, {77}, 4, data, t);
  CHECK(checksum(pre.backbone) == before);
  CHECK(checksum(pair2) != checksum(pair));

  CHECK_THROWS_AS(finetune_pair(pre, {77}, 2, data, TrainConfig{}), ConfigError);
  CHECK_THROWS_AS(finetune_pair(pre, {77}, 4, LabeledImages{}, t), DataError);
}

TEST_CASE("zero learning rate or zero epochs returns the pretrained pair") {
  const auto data = synthesize_dataset(32, 16, 4, 4);
  TrainConfig t;
  t.epochs = 1;
  t.seed = 2;
  const auto pre = pretrain_backbone(data, tiny_config(), t);
  TrainConfig ft = t;
  ft.learning_rate = 0;
  auto pair = finetune_pair(pre, {5}, 4, data, ft);
  // Running statistics still update; the learnable tensors must not.
  CHECK(pair.embed_weight == pre.pair.embed_weight);
  CHECK(pair.head_weight == pre.pair.head_weight);
  ft = t;
  ft.epochs = 0;
  CHECK(checksum(finetune_pair(pre, {5}, 4, data, ft)) == checksum(pre.pair));
}

TEST_CASE("training is deterministic for a seed") {
  const auto data = synthesize_dataset(48, 16, 5, 4);
  TrainConfig t;
  t.epochs = 1;
  t.seed = 9;
  TrainLog log;
  const auto a = pretrain_backbone(data, tiny_config(), t, &log);
  const auto b = pretrain_backbone(data, tiny_config(), t);
  CHECK(checksum(a.backbone) == checksum(b.backbone));
  CHECK(log.epoch_loss.size() == 1);
  CHECK(std::isfinite(log.epoch_loss[0]));
}

TEST_CASE("accuracy counts matches and rejects empty sets") {
  LabeledImages data;
  for (int i = 0; i < 4; ++i) {
    data.images.push_back(ImageU8(4, 4, 3));
    data.labels.push_back(i % 2);
  }
  const BatchPredictor zeros = [](std::span<const ImageU8> imgs) { return std::vector<int>(imgs.size(), 0); };
  CHECK(accuracy(zeros, data, 3) == 0.5);
  CHECK_THROWS_AS(accuracy(zeros, LabeledImages{}), EmptySelection);
}
