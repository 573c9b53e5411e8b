#include <cmath>

#include "doctest.h"
#include "ks/autodiff.hpp"
#include "ks/rng.hpp"

using namespace ks;
using T64 = Tensor<double>;
using V64 = Var<double>;

namespace {

T64 random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  T64 t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Projects an op output onto fixed random weights so every output
/// coordinate contributes to the scalar being differentiated.
V64 project(const V64& out, const T64& weights) {
  return sum(mul(out, out.tape->constant(weights)));
}

double check(const std::function<V64(Tape<double>&, const V64&)>& f, const T64& x) {
  return finite_diff_check<double>(f, x, 1e-4);
}

}  // namespace

TEST_CASE("GELU fixes the origin") {
  Tape<float> tape;
  const auto y = gelu(tape.constant(Tensor<float>({1}, {0.0f})));
  CHECK(y.value()[0] == 0.0f);
}

TEST_CASE("global average pool of a constant channel returns the constant") {
  Tape<float> tape;
  const auto y = global_avg_pool(tape.constant(Tensor<float>::constant({2, 3, 4, 4}, 2.5f)));
  CHECK(y.shape() == Shape{2, 3});
  for (Index i = 0; i < y.value().size(); ++i) CHECK(y.value()[i] == 2.5f);
}

TEST_CASE("strided convolution with a diagonal 2x2 kernel matches direct summation") {
  Tape<double> tape;
  T64 input({1, 1, 4, 4});
  for (Index i = 0; i < 16; ++i) input[i] = double(i);
  const auto y = patch_embed(tape.constant(input), tape.constant(T64({1, 1, 2, 2}, {1, 0, 0, 1})),
                             tape.constant(T64({1}, {0})), 2);
  // (0,0): x00 + x11 = 0 + 5; (0,1): x02 + x13 = 2 + 7; (1,0): 8 + 13; (1,1): 10 + 15.
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.value() == T64({1, 1, 2, 2}, {5, 9, 21, 25}));
}

TEST_CASE("gradient of sum(w * x) with respect to w is x") {
  SplitMix64 rng(1);
  Tape<double> tape;
  const auto x = random_tensor({2, 3}, rng);
  const auto w = tape.variable(random_tensor({2, 3}, rng));
  const auto loss = sum(mul(w, tape.constant(x)));
  tape.backward(loss);
  CHECK(tape.gradient(w) == x);
}

TEST_CASE("softmax cross-entropy of uniform logits") {
  Tape<double> tape;
  const Index batch = 4, classes = 10;
  const auto logits = tape.variable(T64::constant({batch, classes}, 0.3));
  const std::vector<int> labels{0, 3, 9, 3};
  const auto loss = softmax_cross_entropy(logits, std::span<const int>(labels));
  CHECK(std::abs(loss.value().item() - std::log(double(classes))) < 1e-6);
  tape.backward(loss);
  // Closed form: (uniform - onehot) / batch.
  const auto g = tape.gradient(logits);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < classes; ++c) {
      const double expected = (0.1 - (c == labels[std::size_t(b)] ? 1.0 : 0.0)) / double(batch);
      CHECK(std::abs(g.at(b, c) - expected) < 1e-12);
    }
}

TEST_CASE("softmax cross-entropy is nonnegative") {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    const std::vector<int> labels{int(rng.below(5)), int(rng.below(5))};
    const auto loss =
        softmax_cross_entropy(tape.constant(random_tensor({2, 5}, rng, -20, 20)), std::span<const int>(labels));
    CHECK(loss.value().item() >= 0.0);
  }
}

TEST_CASE("parameters absent from the forward pass get a zero gradient") {
  Tape<double> tape;
  const auto used = tape.variable(T64({3}, {1, 2, 3}));
  const auto unused = tape.variable(T64({2}, {4, 5}));
  tape.backward(sum(used));
  CHECK(tape.gradient(unused) == T64::zeros({2}));
  CHECK(tape.gradient(used) == T64::constant({3}, 1.0));
}

TEST_CASE("backward visits ops in reverse execution order") {
  Tape<double> tape;
  const auto x = tape.variable(T64({2}, {1, 2}));
  const auto a = gelu(x);
  const auto b = gelu(a);
  const auto c = add(a, b);
  const auto loss = sum(c);
  tape.backward(loss);
  CHECK(tape.visit_order() == std::vector<std::size_t>{loss.id, c.id, b.id, a.id});
}

TEST_CASE("backward rejects foreign and non-scalar losses") {
  Tape<double> one, two;
  const auto x = two.variable(T64({1}, {1}));
  CHECK_THROWS_AS(one.backward(sum(x)), TapeError);
  const auto v = one.variable(T64({2}, {1, 2}));
  CHECK_THROWS_AS(one.backward(gelu(v)), TapeError);
}

TEST_CASE("kernels reject nonconforming shapes") {
  Tape<float> t;
  const auto x = t.constant(Tensor<float>({1, 3, 8, 8}));
  CHECK_THROWS_AS(patch_embed(x, t.constant(Tensor<float>({4, 3, 3, 3})), t.constant(Tensor<float>({4})), 4),
                  ShapeError);
  CHECK_THROWS_AS(depthwise_conv(x, t.constant(Tensor<float>({3, 1, 4, 4})), t.constant(Tensor<float>({3}))),
                  ShapeError);
  CHECK_THROWS_AS(pointwise_conv(x, t.constant(Tensor<float>({4, 2})), t.constant(Tensor<float>({4}))), ShapeError);
  CHECK_THROWS_AS(add(x, t.constant(Tensor<float>({1, 3, 8, 4}))), ShapeError);
  CHECK_THROWS_AS(linear(t.constant(Tensor<float>({2, 5})), t.constant(Tensor<float>({3, 4})),
                         t.constant(Tensor<float>({3}))),
                  ShapeError);
  const std::vector<int> bad{7};
  CHECK_THROWS_AS(softmax_cross_entropy(t.constant(Tensor<float>({1, 3})), std::span<const int>(bad)), ShapeError);
}

TEST_CASE("finite differences: trivial functions") {
  SplitMix64 rng(4);
  const auto x = random_tensor({3, 4}, rng);
  const double half_norm = check(
      [](Tape<double>& t, const V64& v) { return sum(mul(mul(v, v), t.constant(T64::constant(v.shape(), 0.5)))); },
      x);
  CHECK(half_norm < 1e-6);
  const double constant =
      check([](Tape<double>& t, const V64& v) { return sum(mul(v, t.constant(T64::zeros(v.shape())))); }, x);
  CHECK(constant <= 1e-8);
}

TEST_CASE("finite differences: every kernel, five random instances each") {
  SplitMix64 rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    CAPTURE(trial);
    // patch embedding: input, weight, bias
    {
      const auto x = random_tensor({2, 3, 4, 4}, rng), w = random_tensor({3, 3, 2, 2}, rng),
                 b = random_tensor({3}, rng), r = random_tensor({2, 3, 2, 2}, rng);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(patch_embed(v, t.constant(w), t.constant(b), 2), r); }, x) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(patch_embed(t.constant(x), v, t.constant(b), 2), r); }, w) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(patch_embed(t.constant(x), t.constant(w), v, 2), r); }, b) < 1e-4);
    }
    // depthwise convolution
    {
      const auto x = random_tensor({2, 3, 5, 5}, rng), w = random_tensor({3, 1, 3, 3}, rng),
                 b = random_tensor({3}, rng), r = random_tensor({2, 3, 5, 5}, rng);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(depthwise_conv(v, t.constant(w), t.constant(b)), r); }, x) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(depthwise_conv(t.constant(x), v, t.constant(b)), r); }, w) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(depthwise_conv(t.constant(x), t.constant(w), v), r); }, b) < 1e-4);
    }
    // pointwise convolution
    {
      const auto x = random_tensor({2, 3, 2, 3}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({4}, rng),
                 r = random_tensor({2, 4, 2, 3}, rng);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(pointwise_conv(v, t.constant(w), t.constant(b)), r); }, x) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(pointwise_conv(t.constant(x), v, t.constant(b)), r); }, w) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(pointwise_conv(t.constant(x), t.constant(w), v), r); }, b) < 1e-4);
    }
    // GELU
    {
      const auto x = random_tensor({3, 4}, rng, -3, 3), r = random_tensor({3, 4}, rng);
      CHECK(check([&](Tape<double>&, const V64& v) { return project(gelu(v), r); }, x) < 1e-4);
    }
    // normalization, batch statistics and running statistics
    for (NormMode mode : {NormMode::Train, NormMode::Eval}) {
      const auto x = random_tensor({3, 2, 2, 2}, rng), s = random_tensor({2}, rng, 0.5, 1.5),
                 h = random_tensor({2}, rng), r = random_tensor({3, 2, 2, 2}, rng);
      const auto rm = random_tensor({2}, rng), rv = random_tensor({2}, rng, 0.5, 2.0);
      auto bn = [&](const V64& xv, const V64& sv, const V64& hv) { return batch_norm(xv, sv, hv, rm, rv, mode); };
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(bn(v, t.constant(s), t.constant(h)), r); }, x) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(bn(t.constant(x), v, t.constant(h)), r); }, s) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(bn(t.constant(x), t.constant(s), v), r); }, h) < 1e-4);
    }
    // residual addition
    {
      const auto x = random_tensor({2, 3}, rng), y = random_tensor({2, 3}, rng), r = random_tensor({2, 3}, rng);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(add(v, t.constant(y)), r); }, x) < 1e-4);
    }
    // global average pool
    {
      const auto x = random_tensor({2, 3, 2, 2}, rng), r = random_tensor({2, 3}, rng);
      CHECK(check([&](Tape<double>&, const V64& v) { return project(global_avg_pool(v), r); }, x) < 1e-4);
    }
    // affine layer
    {
      const auto x = random_tensor({3, 4}, rng), w = random_tensor({2, 4}, rng), b = random_tensor({2}, rng),
                 r = random_tensor({3, 2}, rng);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(linear(v, t.constant(w), t.constant(b)), r); }, x) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(linear(t.constant(x), v, t.constant(b)), r); }, w) < 1e-4);
      CHECK(check([&](Tape<double>& t, const V64& v) { return project(linear(t.constant(x), t.constant(w), v), r); }, b) < 1e-4);
    }
    // softmax cross-entropy, both reductions
    {
      const auto z = random_tensor({4, 5}, rng, -3, 3);
      const std::vector<int> labels{int(rng.below(5)), int(rng.below(5)), int(rng.below(5)), int(rng.below(5))};
      for (auto red : {Reduction::Mean, Reduction::Sum})
        CHECK(check([&](Tape<double>&, const V64& v) { return softmax_cross_entropy(v, std::span<const int>(labels), red); }, z) < 1e-4);
    }
    // keyed block shuffle
    {
      const auto perm = derive_permutation({rng.next()}, 2);
      const auto x = random_tensor({2, 3, 4, 4}, rng), r = random_tensor({2, 3, 4, 4}, rng);
      CHECK(check([&](Tape<double>&, const V64& v) { return project(block_shuffle(v, perm), r); }, x) < 1e-4);
    }
  }
}

TEST_CASE("block shuffle gradient is the unshuffled upstream gradient") {
  SplitMix64 rng(77);
  const auto perm = derive_permutation({5}, 2);
  const auto x = random_tensor({1, 3, 4, 4}, rng), r = random_tensor({1, 3, 4, 4}, rng);
  Tape<double> tape;
  const auto xv = tape.variable(x);
  tape.backward(project(block_shuffle(xv, perm), r));
  T64 expected(r.shape());
  permute_blocks<double>(std::span<const double>(r.ptr(), std::size_t(r.size())),
                         std::span<double>(expected.ptr(), std::size_t(r.size())), 3, 4, 4, perm, true);
  CHECK(tape.gradient(xv) == expected);
}

TEST_CASE("forward kernels are deterministic") {
  SplitMix64 rng(9);
  const auto x = random_tensor({2, 4, 6, 6}, rng), w = random_tensor({4, 1, 5, 5}, rng), b = random_tensor({4}, rng);
  auto run = [&] {
    Tape<double> t;
    return gelu(depthwise_conv(t.constant(x), t.constant(w), t.constant(b))).value();
  };
  CHECK(run() == run());
}

TEST_CASE("batch statistics report the batch mean and unbiased variance") {
  Tape<double> t;
  T64 x({4, 1}, {1, 2, 3, 6});
  BatchStats<double> stats;
  batch_norm(t.constant(x), t.constant(T64({1}, {1})), t.constant(T64({1}, {0})), T64::zeros({1}),
             T64::constant({1}, 1.0), NormMode::Train, 1e-5, &stats);
  CHECK(stats.mean[0] == doctest::Approx(3.0));
  CHECK(stats.var[0] == doctest::Approx(14.0 / 3.0));
}
