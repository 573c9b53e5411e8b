#include "ks/experiment.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ks/dataset.hpp"

namespace ks {

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& items) {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) os << (i ? "," : "") << items[i];
  return os.str();
}

const std::vector<std::string> kArms{"clean", "white", "scenario1", "scenario2", "eot"};

}  // namespace

void ExperimentConfig::validate(int num_classes) const {
  if (arms.empty()) throw ConfigError("experiment declares no arms");
  for (const auto& a : arms)
    if (std::find(kArms.begin(), kArms.end(), a) == kArms.end()) throw ConfigError("unknown arm '" + a + "'");
  attack.validate(num_classes);
  if (asr_images < 1) throw ConfigError("asr_images must be >= 1");
  if (eot_pools.empty()) throw ConfigError("eot_pools is empty");
  for (auto n : eot_pools)
    if (n < 1) throw ConfigError("eot pool sizes must be >= 1");
  attacker_finetune.validate();
}

KeyValues ExperimentConfig::to_key_values() const {
  KeyValues kv;
  kv.set("seed", seed);
  kv.set("arms", join_list(arms));
  kv.set("norm", to_string(attack.norm));
  kv.set("eps", attack.epsilon);
  kv.set("steps", attack.steps);
  kv.set("step_size", attack.resolved_step_size());
  kv.set("restarts", attack.restarts);
  kv.set("random_start", attack.random_start);
  if (attack.target) kv.set("target", *attack.target);
  kv.set("asr_images", asr_images);
  kv.set("eot_pools", join_list(eot_pools));
  const auto ft = attacker_finetune.to_key_values();
  for (const auto& [k, v] : ft.entries()) kv.set("finetune." + k, v);
  return kv;
}

ExperimentConfig ExperimentConfig::from_key_values(const KeyValues& kv) {
  ExperimentConfig c;
  c.seed = kv.get_u64_or("seed", c.seed);
  if (kv.has("arms")) c.arms = split_list(kv.get("arms"));
  if (kv.has("norm")) c.attack.norm = parse_norm(kv.get("norm"));
  if (kv.has("eps")) c.attack.epsilon = parse_budget(kv.get("eps"));
  c.attack.steps = int(kv.get_int_or("steps", c.attack.steps));
  if (kv.has("step_size")) c.attack.step_size = parse_budget(kv.get("step_size"));
  c.attack.restarts = int(kv.get_int_or("restarts", c.attack.restarts));
  c.attack.random_start = kv.get_bool_or("random_start", c.attack.random_start);
  if (kv.has("target")) c.attack.target = int(kv.get_int("target"));
  c.asr_images = std::size_t(kv.get_int_or("asr_images", static_cast<long long>(c.asr_images)));
  if (kv.has("eot_pools")) {
    c.eot_pools.clear();
    for (const auto& s : split_list(kv.get("eot_pools"))) {
      KeyValues one;
      one.set("n", s);
      const auto n = one.get_int("n");
      if (n < 1) throw ConfigError("eot pool sizes must be >= 1");
      c.eot_pools.push_back(std::size_t(n));
    }
  }
  KeyValues ft;
  for (const auto& [k, v] : kv.entries())
    if (k.rfind("finetune.", 0) == 0) ft.set(k.substr(9), v);
  c.attacker_finetune = TrainConfig::from_key_values(ft);
  return c;
}

double ArmResult::metric(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.name == name) return m.value;
  throw IndexError("arm '" + arm + "' has no metric '" + name + "'");
}

const ArmResult& EvalReport::arm(const std::string& name) const {
  for (const auto& a : arms)
    if (a.arm == name) return a;
  throw IndexError("report has no arm '" + name + "'");
}

namespace {

struct ArmBudget {
  std::string norm;
  double eps;
  int steps;
};

ArmBudget budget_of(const ArmResult& a, const EvalReport& r) {
  if (a.arm == "clean") return {"none", 0.0, 0};
  const auto& e = r.config.entries();
  return {e.at("norm"), parse_budget(e.at("eps")), int(std::stoi(e.at("steps")))};
}

}  // namespace

std::string EvalReport::to_json(bool timing) const {
  nlohmann::ordered_json j;
  j["partial"] = partial;
  if (!failed_stage.empty()) {
    j["failed_stage"] = failed_stage;
    j["error"] = error;
  }
  j["manifest_hash"] = manifest_hash;
  j["attack"] = attack;
  j["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.entries()) j["config"][k] = v;
  j["arms"] = nlohmann::ordered_json::array();
  for (const auto& a : arms) {
    const auto b = budget_of(a, *this);
    nlohmann::ordered_json ja;
    ja["arm"] = a.arm;
    ja["norm"] = b.norm;
    ja["eps"] = b.eps;
    ja["steps"] = b.steps;
    ja["key_mode"] = a.key_mode;
    ja["images"] = a.images;
    ja["zero_gradient_steps"] = a.zero_gradient_steps;
    for (const auto& m : a.metrics) ja["metrics"][m.name] = m.value;
    if (timing) ja["seconds"] = a.seconds;
    j["arms"].push_back(std::move(ja));
  }
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "arm,norm,eps,metric,value\n";
  for (const auto& a : arms) {
    const auto b = budget_of(a, *this);
    for (const auto& m : a.metrics)
      os << a.arm << ',' << b.norm << ',' << format_double(b.eps) << ',' << m.name << ',' << format_double(m.value)
         << '\n';
  }
  return os.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json", std::ios::binary) << to_json();
  std::ofstream(dir / "report.csv", std::ios::binary) << to_csv();
}

std::string manifest_hash(const std::filesystem::path& manifest) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw FormatError("cannot read manifest " + manifest.string());
  std::ostringstream bytes;
  bytes << in.rdbuf();
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.str())));
  return std::string("fnv1a64:") + hex;
}

namespace {

class Runner {
 public:
  Runner(const DefenseManifest& manifest, const LabeledImages& train, const LabeledImages& test,
         const ExperimentConfig& config)
      : manifest_(manifest), train_(train), test_(test), config_(config) {}

  void run(EvalReport& report, const std::filesystem::path& out_dir) {
    report.config = config_.to_key_values();
    report.attack = config_.attack.describe() + " (multi-restart PGD)";
    stage(report, out_dir, "load", [&] {
      if (!manifest_.source.empty()) report.manifest_hash = manifest_hash(manifest_.source);
      defense_.emplace(load_defense(manifest_));
      plain_ = load_pretrained(manifest_);
      config_.validate(plain_.config.num_classes);
      if (test_.empty()) throw EmptySelection("experiment test set is empty");
      x_ = to_tensor<float>(std::span<const ImageU8>(test_.images));
      return std::vector<ArmResult>{};
    });
    for (const auto& arm : config_.arms) stage(report, out_dir, arm, [&] { return run_arm(arm); });
    report.partial = false;
    if (!out_dir.empty()) report.write(out_dir);
  }

 private:
  template <typename Fn>
  void stage(EvalReport& report, const std::filesystem::path& out_dir, const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto results = fn();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (auto& r : results) {
        r.seconds = secs / double(results.size());
        report.arms.push_back(std::move(r));
      }
    } catch (const std::exception& e) {
      report.failed_stage = name;
      report.error = e.what();
      if (!out_dir.empty()) report.write(out_dir);
      const auto* ks_error = dynamic_cast<const Error*>(&e);
      throw StageError(name, e.what(), ks_error ? ks_error->exit_code() : 4);
    }
    if (!out_dir.empty()) report.write(out_dir);
  }

  AttackConfig attack_for(const std::string& arm) const {
    AttackConfig a = config_.attack;
    a.seed = substream_seed(config_.seed, "attack-" + arm);
    return a;
  }

  double clean_accuracy() {
    if (!clean_) clean_ = defended_accuracy(*defense_, x_, test_.labels, 0).single_draw;
    return *clean_;
  }

  void ensure_selection() {
    if (!selection_.empty()) return;
    selection_ = select_correct(*defense_, test_, config_.asr_images, substream_seed(config_.seed, "selection"));
    const auto sub = subset(test_, selection_);
    xs_ = to_tensor<float>(std::span<const ImageU8>(sub.images));
    ys_ = sub.labels;
  }

  /// Attacker keys disjoint from the pool, with their fine-tuned pairs.
  void ensure_attacker(std::size_t count) {
    if (attacker_keys_.size() < count) {
      std::uint64_t round = 0;
      std::vector<SecretKey> keys;
      while (keys.size() < count) {
        for (const auto& k : generate_keys(count, substream_seed(config_.seed, "attacker-keys", round++))) {
          bool clash = std::find(keys.begin(), keys.end(), k) != keys.end();
          for (std::size_t i = 0; i < defense_->size(); ++i) clash = clash || defense_->entry(i).key == k;
          if (!clash && keys.size() < count) keys.push_back(k);
        }
      }
      attacker_keys_ = std::move(keys);
    }
    TrainConfig ft = config_.attacker_finetune;
    ft.seed = substream_seed(config_.seed, "attacker-finetune");
    while (attacker_pairs_.size() < count)
      attacker_pairs_.push_back(
          finetune_pair(plain_, attacker_keys_[attacker_pairs_.size()], defense_->block_size(), train_, ft));
  }

  std::vector<ArmResult> run_arm(const std::string& arm) {
    const auto& d = *defense_;
    if (arm == "clean") {
      ArmResult r{"clean", "sampled key per image", {{"accuracy", clean_accuracy()}}, test_.size()};
      return {r};
    }
    if (arm == "white") {
      ensure_selection();
      const auto adv = eot_attack(d, xs_, ys_, attack_for(arm));
      const auto asr = attack_success_rate(d, adv, 2);
      return {ArmResult{"white", "defender keys (EoT over the full pool)",
                        {{"asr", asr.expected}, {"asr_single_draw", asr.single_draw}},
                        ys_.size(), adv.zero_gradient_steps}};
    }
    if (arm == "scenario1" || arm == "scenario2") {
      TransferResult t;
      std::string mode;
      if (arm == "scenario1") {
        t = transfer_attack(plain_surrogate(plain_), d, test_, attack_for(arm));
        mode = "plain pretrained model";
      } else {
        ensure_attacker(1);
        auto surrogate = keyed_surrogate(swap_pair(plain_, attacker_pairs_[0]),
                                         derive_permutation(attacker_keys_[0], d.block_size()));
        t = transfer_attack(surrogate, d, test_, attack_for(arm));
        mode = "guessed key " + std::to_string(attacker_keys_[0].seed);
      }
      const double clean = clean_accuracy();
      return {ArmResult{arm,
                        mode,
                        {{"robust_accuracy", t.robust.single_draw},
                         {"robust_accuracy_expected", t.robust.expected},
                         {"robust_over_clean", clean > 0 ? t.robust.single_draw / clean : 0.0},
                         {"surrogate_clean_accuracy", t.surrogate_clean_accuracy},
                         {"surrogate_robust_accuracy", t.surrogate_robust_accuracy}},
                        test_.size(),
                        t.adv.zero_gradient_steps}};
    }
    // eot
    ensure_selection();
    std::vector<ArmResult> out;
    for (const auto n : config_.eot_pools) {
      ensure_attacker(n);
      std::vector<SecretKey> keys(attacker_keys_.begin(), attacker_keys_.begin() + std::ptrdiff_t(n));
      std::vector<EmbeddingHeadPair<float>> pairs(attacker_pairs_.begin(), attacker_pairs_.begin() + std::ptrdiff_t(n));
      const auto pool = assemble_defense(plain_, keys, std::move(pairs), d.block_size(), 0);
      const auto adv = eot_attack(pool, xs_, ys_, attack_for("eot"));
      const auto asr = attack_success_rate(d, adv, 2);
      out.push_back({"eot_n" + std::to_string(n), "disjoint attacker pool of " + std::to_string(n),
                     {{"asr", asr.expected}, {"asr_single_draw", asr.single_draw}}, ys_.size(),
                     adv.zero_gradient_steps});
    }
    return out;
  }

  const DefenseManifest& manifest_;
  const LabeledImages& train_;
  const LabeledImages& test_;
  ExperimentConfig config_;
  std::optional<DefendedClassifier> defense_;
  ModelParams<float> plain_;
  Tensor<float> x_;
  std::optional<double> clean_;
  std::vector<std::size_t> selection_;
  Tensor<float> xs_;
  std::vector<int> ys_;
  std::vector<SecretKey> attacker_keys_;
  std::vector<EmbeddingHeadPair<float>> attacker_pairs_;
};

}  // namespace

EvalReport run_experiment(const DefenseManifest& manifest, const LabeledImages& train, const LabeledImages& test,
                          const ExperimentConfig& config, const std::filesystem::path& out_dir) {
  EvalReport report;
  Runner(manifest, train, test, config).run(report, out_dir);
  return report;
}

}  // namespace ks
