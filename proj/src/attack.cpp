#include "ks/attack.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "ks/dataset.hpp"
#include "ks/parallel.hpp"

namespace ks {

std::string to_string(Norm norm) { return norm == Norm::Linf ? "linf" : "l2"; }

Norm parse_norm(const std::string& text) {
  if (text == "linf") return Norm::Linf;
  if (text == "l2") return Norm::L2;
  throw ConfigError("unknown norm '" + text + "' (expected linf or l2)");
}

double parse_budget(const std::string& text) {
  auto number = [&](const std::string& part) {
    double v = 0;
    const auto* end = part.data() + part.size();
    const auto [ptr, ec] = std::from_chars(part.data(), end, v);
    if (part.empty() || ec != std::errc{} || ptr != end) throw ConfigError("malformed budget '" + text + "'");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return number(text);
  const double den = number(text.substr(slash + 1));
  if (den == 0) throw ConfigError("budget '" + text + "' divides by zero");
  return number(text.substr(0, slash)) / den;
}

double AttackConfig::resolved_step_size() const {
  if (step_size > 0) return step_size;
  return norm == Norm::Linf ? epsilon / 4.0 : epsilon / 2.0 / std::sqrt(double(steps));
}

void AttackConfig::validate(int num_classes) const {
  if (!(epsilon >= 0) || epsilon > 1) throw ConfigError("attack epsilon must be in [0, 1]");
  if (steps < 1) throw ConfigError("attack steps must be >= 1");
  if (step_size < 0) throw ConfigError("attack step_size must be positive");
  if (restarts < 1) throw ConfigError("attack restarts must be >= 1");
  if (target && (*target < 0 || *target >= num_classes))
    throw ConfigError("target class " + std::to_string(*target) + " outside [0, " + std::to_string(num_classes) + ")");
}

std::string AttackConfig::describe() const {
  std::ostringstream os;
  os << to_string(norm) << " eps=" << epsilon << " steps=" << steps << " step=" << resolved_step_size()
     << " restarts=" << (random_start ? restarts : 1) << (random_start ? " random-start" : "");
  if (target) os << " target=" << *target;
  return os.str();
}

namespace {

constexpr Index kChunk = 32;

/// Per-image objective matching attack_objective, from logits values.
std::vector<double> per_sample_objective(const std::vector<Var<float>>& outs, std::span<const int> labels,
                                         std::optional<int> target) {
  std::vector<double> obj(labels.size(), 0.0);
  for (const auto& o : outs) {
    const auto& z = o.value();
    const Index classes = z.dim(1);
    for (std::size_t b = 0; b < labels.size(); ++b) {
      double zmax = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < classes; ++c) zmax = std::max(zmax, double(z.at(Index(b), c)));
      double s = 0;
      for (Index c = 0; c < classes; ++c) s += std::exp(double(z.at(Index(b), c)) - zmax);
      const int goal = target ? *target : labels[b];
      const double ce = std::log(s) + zmax - double(z.at(Index(b), goal));
      obj[b] += (target ? -ce : ce) / double(outs.size());
    }
  }
  return obj;
}

void random_start(Tensor<float>& adv, const Tensor<float>& x, Index image, const AttackConfig& cfg,
                  std::uint64_t stream) {
  const Index per = x.size() / x.dim(0);
  SplitMix64 rng(substream_seed(cfg.seed, "random-start", stream));
  auto d = adv.data().segment(image * per, per);
  const auto o = x.data().segment(image * per, per);
  if (cfg.norm == Norm::Linf) {
    for (Index i = 0; i < per; ++i) d[i] = o[i] + float(rng.uniform(-cfg.epsilon, cfg.epsilon));
  } else {
    Eigen::VectorXd dir(per);
    for (Index i = 0; i < per; ++i) dir[i] = rng.normal();
    const double radius = cfg.epsilon * std::pow(rng.uniform(), 1.0 / double(per));
    dir *= radius / std::max(dir.norm(), 1e-300);
    d = o + dir.cast<float>();
  }
  d = d.cwiseMax(0.0f).cwiseMin(1.0f);
}

void project(Tensor<float>& adv, const Tensor<float>& x, Index image, const AttackConfig& cfg) {
  const Index per = x.size() / x.dim(0);
  auto d = adv.data().segment(image * per, per);
  const auto o = x.data().segment(image * per, per);
  const float eps = float(cfg.epsilon);
  if (cfg.norm == Norm::Linf) {
    d = o + (d - o).cwiseMax(-eps).cwiseMin(eps);
  } else {
    const double n = (d - o).cast<double>().norm();
    if (n > cfg.epsilon) d = o + ((d - o).cast<double>() * (cfg.epsilon / n)).cast<float>();
  }
  d = d.cwiseMax(0.0f).cwiseMin(1.0f);
}

struct ChunkResult {
  Tensor<float> adv;
  std::size_t zero_gradient = 0;
};

ChunkResult attack_chunk(const Surrogate<float>& surrogate, const Tensor<float>& x, std::span<const int> labels,
                         const AttackConfig& cfg, Index first_image) {
  const Index n = x.dim(0), per = x.size() / n;
  const double alpha = cfg.resolved_step_size();
  const int restarts = cfg.random_start ? cfg.restarts : 1;
  ChunkResult result{x, 0};
  std::vector<double> best(std::size_t(n), -std::numeric_limits<double>::infinity());

  for (int r = 0; r < restarts; ++r) {
    Tensor<float> adv = x;
    if (cfg.random_start)
      for (Index i = 0; i < n; ++i)
        random_start(adv, x, i, cfg, std::uint64_t(first_image + i) * std::uint64_t(restarts) + std::uint64_t(r));

    for (int s = 0; s < cfg.steps; ++s) {
      Tape<float> tape;
      const auto xv = tape.variable(adv);
      tape.backward(attack_objective(tape, surrogate, xv, labels, cfg.target));
      const auto g = tape.gradient(xv);
      for (Index i = 0; i < n; ++i) {
        auto d = adv.data().segment(i * per, per);
        const auto gi = g.data().segment(i * per, per);
        if (cfg.norm == Norm::Linf) {
          d += float(alpha) * gi.array().sign().matrix();
        } else {
          const double gn = gi.cast<double>().norm();
          if (gn < 1e-12) {
            ++result.zero_gradient;
            continue;
          }
          d += (gi.cast<double>() * (alpha / gn)).cast<float>();
        }
        project(adv, x, i, cfg);
      }
    }

    Tape<float> tape;
    const auto obj = per_sample_objective(surrogate(tape, tape.constant(adv)), labels, cfg.target);
    for (Index i = 0; i < n; ++i)
      if (obj[std::size_t(i)] > best[std::size_t(i)]) {
        best[std::size_t(i)] = obj[std::size_t(i)];
        result.adv.data().segment(i * per, per) = adv.data().segment(i * per, per);
      }
  }
  return result;
}

}  // namespace

AdvBatch pgd(const Surrogate<float>& surrogate, const Tensor<float>& x, std::span<const int> labels,
             const AttackConfig& config) {
  if (x.rank() != 4 || Index(labels.size()) != x.dim(0))
    throw ShapeError("pgd: batch " + shape_string(x.shape()) + " with " + std::to_string(labels.size()) + " labels");
  if (!(config.epsilon >= 0) || config.steps < 1 || config.restarts < 1)
    throw ConfigError("pgd: invalid attack config (" + config.describe() + ")");
  const Index n = x.dim(0);
  const std::size_t chunks = std::size_t((n + kChunk - 1) / kChunk);
  std::vector<ChunkResult> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    const Index b = Index(c) * kChunk, e = std::min(n, b + kChunk);
    parts[c] = attack_chunk(surrogate, x.slice(b, e), labels.subspan(std::size_t(b), std::size_t(e - b)), config, b);
  });
  AdvBatch out{x, x, std::vector<int>(labels.begin(), labels.end()), config, 0};
  const Index per = n ? x.size() / n : 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    out.perturbed.data().segment(Index(c) * kChunk * per, parts[c].adv.size()) = parts[c].adv.data();
    out.zero_gradient_steps += parts[c].zero_gradient;
  }
  return out;
}

AdvBatch fgsm(const Surrogate<float>& surrogate, const Tensor<float>& x, std::span<const int> labels,
              const AttackConfig& config) {
  AttackConfig single = config;
  single.steps = 1;
  single.step_size = config.epsilon;
  single.random_start = false;
  single.restarts = 1;
  auto out = pgd(surrogate, x, labels, single);
  out.config = config;
  return out;
}

Surrogate<float> eot_surrogate(const DefendedClassifier& pool) {
  std::vector<ModelParams<float>> models;
  std::vector<PermutationVector> perms;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    models.push_back(pool.model(k));
    perms.push_back(pool.entry(k).perm);
  }
  return eot_surrogate<float>(std::move(models), std::move(perms));
}

AdvBatch eot_attack(const DefendedClassifier& attacker_pool, const Tensor<float>& x, std::span<const int> labels,
                    const AttackConfig& config) {
  return pgd(eot_surrogate(attacker_pool), x, labels, config);
}

double max_perturbation(const AdvBatch& adv) {
  const Index n = adv.original.dim(0);
  if (n == 0) return 0;
  const Index per = adv.original.size() / n;
  double worst = 0;
  for (Index i = 0; i < n; ++i) {
    const Eigen::VectorXd d =
        (adv.perturbed.data().segment(i * per, per) - adv.original.data().segment(i * per, per)).cast<double>();
    worst = std::max(worst, adv.config.norm == Norm::Linf ? d.lpNorm<Eigen::Infinity>() : d.norm());
  }
  return worst;
}

namespace {

constexpr Index kEvalChunk = 100;

/// Forced-key predictions, [key][image].
std::vector<std::vector<int>> forced_predictions(const DefendedClassifier& defense, const Tensor<float>& batch) {
  const Index n = batch.dim(0);
  std::vector<std::vector<int>> out(defense.size());
  parallel_for(defense.size(), [&](std::size_t k) {
    for (Index b = 0; b < n; b += kEvalChunk) {
      const auto p = argmax_rows(defense.predict_with_key(batch.slice(b, std::min(n, b + kEvalChunk)), k));
      out[k].insert(out[k].end(), p.begin(), p.end());
    }
  });
  return out;
}

std::vector<DefendedPrediction> sampled_predictions(const DefendedClassifier& defense, const Tensor<float>& batch,
                                                    std::uint64_t stream) {
  auto sampler = defense.sampler(stream);
  std::vector<DefendedPrediction> out;
  const Index n = batch.dim(0);
  for (Index b = 0; b < n; b += kEvalChunk) {
    const auto p = defended_predict(defense, sampler, batch.slice(b, std::min(n, b + kEvalChunk)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double plain_accuracy(const Surrogate<float>& surrogate, const Tensor<float>& batch, std::span<const int> labels) {
  const Index n = batch.dim(0);
  std::size_t correct = 0;
  for (Index b = 0; b < n; b += kEvalChunk) {
    Tape<float> tape;
    const auto outs = surrogate(tape, tape.constant(batch.slice(b, std::min(n, b + kEvalChunk))));
    const auto p = argmax_rows(outs.front().value());
    for (std::size_t i = 0; i < p.size(); ++i) correct += p[i] == labels[std::size_t(b) + i];
  }
  return double(correct) / double(n);
}

}  // namespace

DefendedAccuracy defended_accuracy(const DefendedClassifier& defense, const Tensor<float>& batch,
                                   std::span<const int> labels, std::uint64_t sampler_stream) {
  const std::size_t n = labels.size();
  if (n == 0) throw EmptySelection("defended accuracy of an empty batch");
  DefendedAccuracy acc;
  const auto forced = forced_predictions(defense, batch);
  std::size_t hits = 0;
  for (const auto& preds : forced)
    for (std::size_t i = 0; i < n; ++i) hits += preds[i] == labels[i];
  acc.expected = double(hits) / double(n * defense.size());
  const auto sampled = sampled_predictions(defense, batch, sampler_stream);
  hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += sampled[i].label == labels[i];
  acc.single_draw = double(hits) / double(n);
  return acc;
}

TransferResult transfer_attack(const Surrogate<float>& surrogate, const DefendedClassifier& defense,
                               const LabeledImages& test, const AttackConfig& config) {
  if (test.empty()) throw EmptySelection("transfer attack on an empty test set");
  config.validate(defense.config().num_classes);
  const auto x = to_tensor<float>(std::span<const ImageU8>(test.images));
  TransferResult r;
  r.adv = pgd(surrogate, x, test.labels, config);
  r.surrogate_clean_accuracy = plain_accuracy(surrogate, x, test.labels);
  r.surrogate_robust_accuracy = plain_accuracy(surrogate, r.adv.perturbed, test.labels);
  r.clean = defended_accuracy(defense, x, test.labels, 0);
  r.robust = defended_accuracy(defense, r.adv.perturbed, test.labels, 1);
  return r;
}

TransferResult scenario1_transfer(const ModelParams<float>& plain, const DefendedClassifier& defense,
                                  const LabeledImages& test, const AttackConfig& config) {
  return transfer_attack(plain_surrogate(plain), defense, test, config);
}

TransferResult scenario2_transfer(const ModelParams<float>& pretrained, const SecretKey& guessed_key,
                                  const DefendedClassifier& defense, const LabeledImages& train,
                                  const LabeledImages& test, const TrainConfig& finetune, const AttackConfig& config,
                                  bool allow_pool_key) {
  if (!allow_pool_key) check_disjoint(std::span<const SecretKey>(&guessed_key, 1), defense);
  const auto pair = finetune_pair(pretrained, guessed_key, defense.block_size(), train, finetune);
  auto surrogate = keyed_surrogate(swap_pair(pretrained, pair), derive_permutation(guessed_key, defense.block_size()));
  return transfer_attack(surrogate, defense, test, config);
}

std::vector<std::size_t> select_correct(const DefendedClassifier& defense, const LabeledImages& data,
                                        std::size_t limit, std::uint64_t seed) {
  if (data.empty()) throw EmptySelection("selection from an empty dataset");
  const auto forced = forced_predictions(defense, to_tensor<float>(std::span<const ImageU8>(data.images)));
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < data.size(); ++i) {
    bool all = true;
    for (const auto& preds : forced) all = all && preds[i] == data.labels[i];
    if (all) ok.push_back(i);
  }
  if (ok.empty()) throw EmptySelection("no image is classified correctly under every key");
  if (limit > 0 && ok.size() > limit) {
    SplitMix64 rng(substream_seed(seed, "selection"));
    for (std::size_t i = 0; i < limit; ++i) std::swap(ok[i], ok[i + rng.below(ok.size() - i)]);
    ok.resize(limit);
    std::sort(ok.begin(), ok.end());
  }
  return ok;
}

SuccessRate attack_success_rate(const DefendedClassifier& defense, const AdvBatch& adv,
                                std::uint64_t sampler_stream) {
  const std::size_t n = adv.labels.size();
  if (n == 0) throw EmptySelection("success rate of an empty selection");
  auto fooled = [&](int pred, std::size_t i) {
    return adv.config.target ? pred == *adv.config.target : pred != adv.labels[i];
  };
  SuccessRate r;
  r.count = n;
  const auto forced = forced_predictions(defense, adv.perturbed);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k_fooled = 0;
    for (const auto& preds : forced) k_fooled += fooled(preds[i], i);
    total += double(k_fooled) / double(defense.size());
  }
  r.expected = total / double(n);
  const auto sampled = sampled_predictions(defense, adv.perturbed, sampler_stream);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += fooled(sampled[i].label, i);
  r.single_draw = double(hits) / double(n);
  return r;
}

void check_disjoint(std::span<const SecretKey> attacker, const DefendedClassifier& defense) {
  for (const auto& a : attacker)
    for (std::size_t i = 0; i < defense.size(); ++i)
      if (defense.entry(i).key.seed == a.seed)
        throw KeyError("attacker key " + std::to_string(a.seed) + " is defender key " + std::to_string(i));
}

}  // namespace ks
