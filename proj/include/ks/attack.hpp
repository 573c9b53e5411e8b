#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ks/autodiff.hpp"
#include "ks/defense.hpp"
#include "ks/model.hpp"

namespace ks {

enum class Norm { Linf, L2 };

std::string to_string(Norm norm);
/// Throws ConfigError on anything but "linf" or "l2".
Norm parse_norm(const std::string& text);
/// Decimal or "a/b" budget, e.g. "8/255". Throws ConfigError.
double parse_budget(const std::string& text);

struct AttackConfig {
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255.0;
  int steps = 20;
  double step_size = 0;  ///< 0 selects the default for the norm
  bool random_start = true;
  int restarts = 3;
  std::optional<int> target;
  std::vector<SecretKey> eot_keys;
  std::uint64_t seed = 0;

  /// eps/4 for linf, eps/(2 sqrt(steps)) for l2, unless step_size is set.
  double resolved_step_size() const;
  /// epsilon >= 0, steps >= 1, restarts >= 1, target in [0, num_classes).
  void validate(int num_classes) const;
  std::string describe() const;
};

/// Perturbed batch with the images it came from. Values are in [0, 1].
struct AdvBatch {
  Tensor<float> original;
  Tensor<float> perturbed;
  std::vector<int> labels;
  AttackConfig config;
  std::size_t zero_gradient_steps = 0;
};

/// Differentiable surrogate: one logits node per transformation of x.
template <typename Scalar>
using Surrogate = std::function<std::vector<Var<Scalar>>(Tape<Scalar>&, const Var<Scalar>&)>;

template <typename Scalar>
Surrogate<Scalar> plain_surrogate(ModelParams<Scalar> params) {
  return [params = std::move(params)](Tape<Scalar>& tape, const Var<Scalar>& x) {
    return std::vector<Var<Scalar>>{forward(tape, params, x, ForwardMode::inference()).logits};
  };
}

/// Shuffle with a known permutation, then the matching model.
template <typename Scalar>
Surrogate<Scalar> keyed_surrogate(ModelParams<Scalar> params, PermutationVector perm) {
  return [params = std::move(params), perm = std::move(perm)](Tape<Scalar>& tape, const Var<Scalar>& x) {
    return std::vector<Var<Scalar>>{forward(tape, params, block_shuffle(x, perm), ForwardMode::inference()).logits};
  };
}

/// Every (permutation, model) pair of a pool on the same input.
template <typename Scalar>
Surrogate<Scalar> eot_surrogate(std::vector<ModelParams<Scalar>> models, std::vector<PermutationVector> perms) {
  if (models.empty() || models.size() != perms.size()) throw ConfigError("EoT pool needs one model per key");
  return [models = std::move(models), perms = std::move(perms)](Tape<Scalar>& tape, const Var<Scalar>& x) {
    std::vector<Var<Scalar>> out;
    for (std::size_t k = 0; k < models.size(); ++k)
      out.push_back(forward(tape, models[k], block_shuffle(x, perms[k]), ForwardMode::inference()).logits);
    return out;
  };
}

Surrogate<float> eot_surrogate(const DefendedClassifier& pool);

/// Summed cross-entropy averaged over transformations. Targeted attacks
/// minimize the loss toward `target`, so it is negated here and every attack
/// ascends.
template <typename Scalar>
Var<Scalar> attack_objective(Tape<Scalar>& tape, const Surrogate<Scalar>& surrogate, const Var<Scalar>& x,
                             std::span<const int> labels, std::optional<int> target = std::nullopt) {
  const auto outs = surrogate(tape, x);
  std::vector<int> goal(labels.begin(), labels.end());
  if (target) std::fill(goal.begin(), goal.end(), *target);
  const Scalar weight = Scalar(target ? -1.0 : 1.0) / Scalar(outs.size());
  Var<Scalar> total;
  for (std::size_t k = 0; k < outs.size(); ++k) {
    const auto ce = softmax_cross_entropy(outs[k], goal, Reduction::Sum);
    const auto scaled = mul(ce, tape.constant(Tensor<Scalar>::scalar(weight)));
    total = k == 0 ? scaled : add(total, scaled);
  }
  return total;
}

/// Projected gradient ascent. linf: sign step, coordinate clamp; l2: unit
/// direction step, radial rescale. Each step clips to [0, 1]. With restarts,
/// each image keeps the restart whose final objective is highest. Random
/// starts draw from a per-image stream, so results do not depend on chunking
/// or thread count.
AdvBatch pgd(const Surrogate<float>& surrogate, const Tensor<float>& x, std::span<const int> labels,
             const AttackConfig& config);

/// Single step of size epsilon without random start.
AdvBatch fgsm(const Surrogate<float>& surrogate, const Tensor<float>& x, std::span<const int> labels,
              const AttackConfig& config);

/// PGD through the mean input gradient over all keys of the attacker pool.
AdvBatch eot_attack(const DefendedClassifier& attacker_pool, const Tensor<float>& x, std::span<const int> labels,
                    const AttackConfig& config);

/// Largest per-image deviation in the attack's norm.
double max_perturbation(const AdvBatch& adv);

/// Accuracy of a defended model on a batch.
struct DefendedAccuracy {
  double single_draw = 0;  ///< one sampled key per image
  double expected = 0;     ///< mean over all forced keys
};
DefendedAccuracy defended_accuracy(const DefendedClassifier& defense, const Tensor<float>& batch,
                                   std::span<const int> labels, std::uint64_t sampler_stream);

struct TransferResult {
  AdvBatch adv;
  double surrogate_clean_accuracy = 0;
  double surrogate_robust_accuracy = 0;
  DefendedAccuracy clean;
  DefendedAccuracy robust;
};

/// Crafts PGD on `surrogate` over the whole test set, evaluates on the defense.
TransferResult transfer_attack(const Surrogate<float>& surrogate, const DefendedClassifier& defense,
                               const LabeledImages& test, const AttackConfig& config);

/// Crafts on the plain pretrained model, evaluates on the defense.
TransferResult scenario1_transfer(const ModelParams<float>& plain, const DefendedClassifier& defense,
                                  const LabeledImages& test, const AttackConfig& config);

/// Fine-tunes a pair under a guessed key, crafts through that key's shuffle,
/// evaluates on the defense. Throws KeyError if the guess is a pool key
/// unless `allow_pool_key` is set.
TransferResult scenario2_transfer(const ModelParams<float>& pretrained, const SecretKey& guessed_key,
                                  const DefendedClassifier& defense, const LabeledImages& train,
                                  const LabeledImages& test, const TrainConfig& finetune,
                                  const AttackConfig& config, bool allow_pool_key = false);

/// Indices of images every forced key classifies correctly; a seeded sample
/// of at most `limit` of them (0 keeps all), in ascending order.
/// Throws EmptySelection when none qualify.
std::vector<std::size_t> select_correct(const DefendedClassifier& defense, const LabeledImages& data,
                                        std::size_t limit, std::uint64_t seed);

/// Fraction of filtered images the attack makes misclassified.
struct SuccessRate {
  double expected = 0;     ///< mean over images of the share of forced keys fooled
  double single_draw = 0;  ///< one sampled key per image
  std::size_t count = 0;
};
SuccessRate attack_success_rate(const DefendedClassifier& defense, const AdvBatch& adv,
                                std::uint64_t sampler_stream);

/// Throws KeyError when any attacker key is also a defender key.
void check_disjoint(std::span<const SecretKey> attacker, const DefendedClassifier& defense);

}  // namespace ks
