#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ks/attack.hpp"
#include "ks/dataset.hpp"
#include "ks/defense.hpp"
#include "ks/experiment.hpp"
#include "ks/train.hpp"

using namespace ks;
namespace fs = std::filesystem;

namespace {

void print_log(const TrainLog& log, const char* what) {
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
    std::fprintf(stderr, "%s epoch %zu  loss %.4f  acc %.4f\n", what, e + 1, log.epoch_loss[e], log.epoch_accuracy[e]);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

struct TrainFlags {
  double lr = 0.01;
  int epochs = 10;
  int batch = 32;
  double momentum = 0.9;
  double weight_decay = 0;
  bool batch_stats = false;
  bool allow_mismatch = false;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "learning rate")->capture_default_str();
    app->add_option("--epochs", epochs, "epochs")->capture_default_str();
    app->add_option("--batch-size", batch, "batch size")->capture_default_str();
    app->add_option("--momentum", momentum)->capture_default_str();
    app->add_option("--weight-decay", weight_decay)->capture_default_str();
  }
  TrainConfig config(std::uint64_t seed) const {
    TrainConfig t;
    t.learning_rate = lr;
    t.epochs = epochs;
    t.batch_size = batch;
    t.momentum = momentum;
    t.weight_decay = weight_decay;
    t.seed = seed;
    t.backbone_batch_stats = batch_stats;
    t.allow_block_mismatch = allow_mismatch;
    t.validate();
    return t;
  }
};

struct AttackFlags {
  std::string method = "pgd";
  std::string norm = "linf";
  std::string eps;
  std::string step_size;
  int steps = 20;
  int restarts = 3;
  bool no_random_start = false;
  int target = -1;

  void add(CLI::App* app) {
    app->add_option("--method", method, "fgsm, pgd or eot")
        ->check(CLI::IsMember({"fgsm", "pgd", "eot"}))
        ->capture_default_str();
    app->add_option("--norm", norm, "linf or l2")->capture_default_str();
    app->add_option("--eps", eps, "budget, decimal or a/b (default 8/255 linf, 0.5 l2)");
    app->add_option("--steps", steps)->capture_default_str();
    app->add_option("--step-size", step_size, "default eps/4 (linf) or eps/(2 sqrt(steps)) (l2)");
    app->add_option("--restarts", restarts)->capture_default_str();
    app->add_flag("--no-random-start", no_random_start);
    app->add_option("--target", target, "target class for a targeted attack");
  }
  AttackConfig config(std::uint64_t seed) const {
    AttackConfig a;
    a.norm = parse_norm(norm);
    a.epsilon = eps.empty() ? (a.norm == Norm::Linf ? 8.0 / 255.0 : 0.5) : parse_budget(eps);
    a.steps = steps;
    if (!step_size.empty()) a.step_size = parse_budget(step_size);
    a.restarts = restarts;
    a.random_start = !no_random_start;
    if (target >= 0) a.target = target;
    a.seed = seed;
    return a;
  }
};

DefendedClassifier open_defense(const std::string& manifest) {
  return load_defense(DefenseManifest::read(manifest));
}

/// Attacker keys that avoid every pool key.
std::vector<SecretKey> attacker_keys(std::size_t n, std::uint64_t seed, const DefendedClassifier& defense) {
  std::vector<SecretKey> keys;
  for (std::uint64_t round = 0; keys.size() < n; ++round)
    for (const auto& k : generate_keys(n, substream_seed(seed, "attacker-keys", round))) {
      bool clash = std::find(keys.begin(), keys.end(), k) != keys.end();
      for (std::size_t i = 0; i < defense.size(); ++i) clash = clash || defense.entry(i).key == k;
      if (!clash && keys.size() < n) keys.push_back(k);
    }
  return keys;
}

std::string report_text(const nlohmann::json& j) {
  std::ostringstream os;
  os << "manifest " << j.value("manifest_hash", std::string("-")) << "\n";
  os << "attack   " << j.value("attack", std::string("-")) << "\n";
  if (j.value("partial", false))
    os << "PARTIAL  failed at " << j.value("failed_stage", std::string("?")) << ": " << j.value("error", std::string())
       << "\n";
  os << "\n" << std::left << std::setw(12) << "arm" << std::setw(6) << "norm" << std::setw(11) << "eps"
     << std::setw(28) << "metric" << "value\n";
  for (const auto& a : j.at("arms")) {
    if (!a.contains("metrics")) continue;
    for (const auto& [name, value] : a.at("metrics").items()) {
      std::ostringstream eps;
      eps << std::setprecision(5) << a.at("eps").get<double>();
      os << std::setw(12) << a.at("arm").get<std::string>() << std::setw(6) << a.at("norm").get<std::string>()
         << std::setw(11) << eps.str() << std::setw(28) << name << std::fixed << std::setprecision(2)
         << 100.0 * value.get<double>() << "%\n";
      os.unsetf(std::ios::fixed);
    }
    os << std::setw(12) << "" << "key mode: " << a.at("key_mode").get<std::string>() << ", " << a.at("images")
       << " images\n";
  }
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keyed block-shuffle defense: data, training, attacks, evaluation"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // synthesize-dataset
  auto* synth = app.add_subcommand("synthesize-dataset", "generate the 10-class synthetic shape set");
  std::string synth_out;
  std::size_t synth_count = 1000;
  int synth_side = 32, synth_classes = 10;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count)->capture_default_str();
  synth->add_option("--side", synth_side)->capture_default_str();
  synth->add_option("--classes", synth_classes)->capture_default_str();
  synth->add_option("--seed", seed)->capture_default_str();

  // keygen
  auto* keygen = app.add_subcommand("keygen", "write a file of random secret keys");
  std::string keygen_out;
  std::size_t keygen_count = 5;
  keygen->add_option("--out", keygen_out)->required();
  keygen->add_option("--count", keygen_count)->capture_default_str();
  keygen->add_option("--seed", seed)->capture_default_str();

  // encrypt
  auto* encrypt = app.add_subcommand("encrypt", "block-shuffle a dataset with one key");
  std::string enc_data, enc_out, enc_keys;
  std::size_t enc_index = 0;
  int block = 4;
  encrypt->add_option("--data", enc_data)->required();
  encrypt->add_option("--keys", enc_keys, "key file")->required();
  encrypt->add_option("--key-index", enc_index, "0-based line in the key file")->capture_default_str();
  encrypt->add_option("--block-size", block)->capture_default_str();
  encrypt->add_option("--out", enc_out)->required();

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train the plain model from scratch");
  std::string pre_data, pre_out, pre_config;
  ModelConfig model_cfg;
  TrainFlags pre_flags;
  pre_flags.lr = 0.05;
  pretrain->add_option("--data", pre_data)->required();
  pretrain->add_option("--out", pre_out)->required();
  pretrain->add_option("--model-config", pre_config, "key = value model config");
  pretrain->add_option("--hidden", model_cfg.hidden_dim)->capture_default_str();
  pretrain->add_option("--depth", model_cfg.depth)->capture_default_str();
  pretrain->add_option("--patch", model_cfg.patch_size)->capture_default_str();
  pretrain->add_option("--kernel", model_cfg.kernel_size)->capture_default_str();
  pretrain->add_option("--classes", model_cfg.num_classes)->capture_default_str();
  pretrain->add_option("--side", model_cfg.image_side)->capture_default_str();
  pre_flags.add(pretrain);
  pretrain->add_option("--seed", seed)->capture_default_str();

  // finetune
  auto* finetune = app.add_subcommand("finetune", "fine-tune one embedding/head pair per key");
  std::string ft_pre, ft_data, ft_keys, ft_out;
  std::size_t ft_n = 0;
  std::uint64_t sampler_seed = 0;
  bool sampler_given = false;
  TrainFlags ft_flags;
  finetune->add_option("--pretrained", ft_pre, "directory written by pretrain")->required();
  finetune->add_option("--data", ft_data)->required();
  finetune->add_option("--keys", ft_keys, "key file")->required();
  finetune->add_option("-n,--pool-size", ft_n, "use the first n keys (default all)");
  finetune->add_option("--block-size", block)->capture_default_str();
  finetune->add_option("--out", ft_out)->required();
  finetune->add_option("--sampler-seed", sampler_seed, "seed of the inference key sampler");
  finetune->add_flag("--backbone-batch-stats", ft_flags.batch_stats);
  finetune->add_flag("--allow-block-mismatch", ft_flags.allow_mismatch);
  ft_flags.add(finetune);
  finetune->add_option("--seed", seed)->capture_default_str();

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "classify with randomized key selection");
  std::string pred_manifest, pred_data, pred_out;
  int pred_key = -1;
  predict_cmd->add_option("--manifest", pred_manifest)->required();
  predict_cmd->add_option("--data", pred_data)->required();
  predict_cmd->add_option("--key-index", pred_key, "force one pool key (0-based)");
  predict_cmd->add_option("--out", pred_out, "write 'label key_index' lines here");
  predict_cmd->add_option("--seed", seed, "sampler stream")->capture_default_str();

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "craft adversarial examples and score the defense");
  std::string att_manifest, att_data, att_train, att_out, att_adv, scenario = "white";
  std::size_t att_limit = 0, eot_pool = 5;
  AttackFlags att_flags;
  TrainFlags att_ft;
  attack_cmd->add_option("--manifest", att_manifest)->required();
  attack_cmd->add_option("--data", att_data, "images to attack")->required();
  attack_cmd->add_option("--train", att_train, "attacker fine-tuning data (scenario 2 and eot)");
  attack_cmd->add_option("--scenario", scenario, "white, 1 or 2")
      ->check(CLI::IsMember({"white", "1", "2"}))
      ->capture_default_str();
  attack_cmd->add_option("--eot-pool", eot_pool, "attacker keys for eot")->capture_default_str();
  attack_cmd->add_option("--limit", att_limit, "attack at most this many images");
  attack_cmd->add_option("--out", att_out, "report.json")->required();
  attack_cmd->add_option("--adv-out", att_adv, "save adversarial images here");
  att_flags.add(attack_cmd);
  attack_cmd->add_option("--ft-epochs", att_ft.epochs, "attacker fine-tuning epochs")->capture_default_str();
  attack_cmd->add_option("--ft-lr", att_ft.lr, "attacker fine-tuning learning rate")->capture_default_str();
  attack_cmd->add_option("--seed", seed)->capture_default_str();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "run the full experiment and write report.json/report.csv");
  std::string ev_manifest, ev_train, ev_test, ev_config, ev_out;
  evaluate->add_option("--manifest", ev_manifest)->required();
  evaluate->add_option("--train", ev_train)->required();
  evaluate->add_option("--test", ev_test)->required();
  evaluate->add_option("--config", ev_config, "key = value experiment config");
  evaluate->add_option("--out", ev_out)->required();
  evaluate->add_option("--seed", seed, "master seed (overrides the config)");

  // report
  auto* report_cmd = app.add_subcommand("report", "print a report as a table");
  std::string rep_in;
  report_cmd->add_option("--in", rep_in, "report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 3;
  }

  try {
    if (*synth) {
      const auto data = synthesize_dataset(synth_count, synth_side, seed, synth_classes);
      save_dataset(synth_out, data);
      std::printf("wrote %zu images to %s\n", data.size(), synth_out.c_str());
    } else if (*keygen) {
      const auto keys = generate_keys(keygen_count, seed);
      write_key_file(keygen_out, keys);
      std::printf("wrote %zu keys to %s\n", keys.size(), keygen_out.c_str());
    } else if (*encrypt) {
      const auto keys = read_key_file(enc_keys);
      if (enc_index >= keys.size())
        throw IndexError("key index " + std::to_string(enc_index) + " outside key file of " +
                         std::to_string(keys.size()));
      save_dataset(enc_out, encrypt_dataset(load_dataset(enc_data), keys[enc_index], block));
    } else if (*pretrain) {
      if (!pre_config.empty()) model_cfg = load_config(pre_config);
      model_cfg.validate();
      const auto data = load_dataset(pre_data, model_cfg.num_classes);
      TrainLog log;
      const auto model = pretrain_backbone(data, model_cfg, pre_flags.config(seed), &log);
      print_log(log, "pretrain");
      save_pretrained(pre_out, model);
    } else if (*finetune) {
      const auto pre = load_pretrained(fs::path(ft_pre));
      const auto data = load_dataset(ft_data, pre.config.num_classes);
      auto keys = read_key_file(ft_keys);
      if (ft_n > 0) {
        if (ft_n > keys.size()) throw ConfigError("key file holds fewer than " + std::to_string(ft_n) + " keys");
        keys.resize(ft_n);
      }
      sampler_given = finetune->count("--sampler-seed") > 0;
      const auto defense = build_defense(pre, keys, data, ft_flags.config(seed), block,
                                         sampler_given ? sampler_seed : substream_seed(seed, "sampler"));
      const auto m = save_defense(ft_out, defense, pre);
      std::printf("wrote %zu pairs, manifest %s\n", defense.size(), m.source.string().c_str());
    } else if (*predict_cmd) {
      const auto defense = open_defense(pred_manifest);
      const auto data = load_dataset(pred_data, defense.config().num_classes);
      const auto x = to_tensor<float>(std::span<const ImageU8>(data.images));
      std::vector<DefendedPrediction> preds;
      if (pred_key >= 0) {
        for (int label : argmax_rows(defense.predict_with_key(x, std::size_t(pred_key))))
          preds.push_back({label, std::size_t(pred_key)});
      } else {
        auto sampler = defense.sampler(seed);
        preds = defended_predict(defense, sampler, x);
      }
      std::ostringstream os;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        os << preds[i].label << ' ' << preds[i].key_index << '\n';
        correct += preds[i].label == data.labels[i];
      }
      if (!pred_out.empty()) write_text(pred_out, os.str());
      else std::cout << os.str();
      std::fprintf(stderr, "accuracy %.4f over %zu images\n", double(correct) / double(std::max<std::size_t>(1, preds.size())),
                   preds.size());
    } else if (*attack_cmd) {
      const auto manifest = DefenseManifest::read(att_manifest);
      const auto defense = load_defense(manifest);
      const auto plain = load_pretrained(manifest);
      auto data = load_dataset(att_data, defense.config().num_classes);
      if (att_limit > 0 && att_limit < data.size()) {
        std::vector<std::size_t> idx(att_limit);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        data = subset(data, idx);
      }
      auto cfg = att_flags.config(substream_seed(seed, "attack"));
      cfg.validate(defense.config().num_classes);
      if (att_flags.method == "fgsm") {
        cfg.steps = 1;
        cfg.step_size = cfg.epsilon;
        cfg.random_start = false;
        cfg.restarts = 1;
      }
      auto need_train = [&] {
        if (att_train.empty()) throw ConfigError("--train is required for scenario 2 and eot");
        return load_dataset(att_train, defense.config().num_classes);
      };
      TrainConfig ft = att_ft.config(substream_seed(seed, "attacker-finetune"));
      Surrogate<float> surrogate;
      std::string key_mode;
      if (att_flags.method == "eot") {
        const auto train = need_train();
        const auto keys = attacker_keys(eot_pool, seed, defense);
        std::vector<EmbeddingHeadPair<float>> pairs;
        for (const auto& k : keys) pairs.push_back(finetune_pair(plain, k, defense.block_size(), train, ft));
        surrogate = eot_surrogate(assemble_defense(plain, keys, std::move(pairs), defense.block_size(), 0));
        key_mode = "disjoint attacker pool of " + std::to_string(eot_pool);
      } else if (scenario == "white") {
        surrogate = eot_surrogate(defense);
        key_mode = "defender keys (EoT over the full pool)";
      } else if (scenario == "1") {
        surrogate = plain_surrogate(plain);
        key_mode = "plain pretrained model";
      } else {
        const auto train = need_train();
        const auto guess = attacker_keys(1, seed, defense).front();
        const auto pair = finetune_pair(plain, guess, defense.block_size(), train, ft);
        surrogate = keyed_surrogate(swap_pair(plain, pair), derive_permutation(guess, defense.block_size()));
        key_mode = "guessed key " + std::to_string(guess.seed);
      }
      const auto t = transfer_attack(surrogate, defense, data, cfg);

      // Same layout as an experiment report so `report` reads either.
      nlohmann::ordered_json arm;
      arm["arm"] = att_flags.method == "eot" ? "eot_n" + std::to_string(eot_pool) : "scenario" + scenario;
      if (scenario == "white" && att_flags.method != "eot") arm["arm"] = "white";
      arm["norm"] = to_string(cfg.norm);
      arm["eps"] = cfg.epsilon;
      arm["steps"] = cfg.steps;
      arm["key_mode"] = key_mode;
      arm["images"] = data.size();
      arm["zero_gradient_steps"] = t.adv.zero_gradient_steps;
      arm["max_perturbation"] = max_perturbation(t.adv);
      auto& m = arm["metrics"];
      m["clean_accuracy"] = t.clean.single_draw;
      m["clean_accuracy_expected"] = t.clean.expected;
      m["robust_accuracy"] = t.robust.single_draw;
      m["robust_accuracy_expected"] = t.robust.expected;
      m["surrogate_clean_accuracy"] = t.surrogate_clean_accuracy;
      m["surrogate_robust_accuracy"] = t.surrogate_robust_accuracy;
      try {
        // ASR over the images every pool key classifies correctly.
        const auto sel = select_correct(defense, data, 0, seed);
        AdvBatch chosen = t.adv;
        chosen.original = Tensor<float>(Shape{Index(sel.size()), 3, t.adv.original.dim(2), t.adv.original.dim(3)});
        chosen.perturbed = chosen.original;
        chosen.labels.clear();
        const Index per = t.adv.original.size() / t.adv.original.dim(0);
        for (std::size_t i = 0; i < sel.size(); ++i) {
          chosen.original.data().segment(Index(i) * per, per) = t.adv.original.data().segment(Index(sel[i]) * per, per);
          chosen.perturbed.data().segment(Index(i) * per, per) = t.adv.perturbed.data().segment(Index(sel[i]) * per, per);
          chosen.labels.push_back(data.labels[sel[i]]);
        }
        const auto asr = attack_success_rate(defense, chosen, 2);
        m["asr"] = asr.expected;
        m["asr_single_draw"] = asr.single_draw;
        arm["asr_images"] = asr.count;
      } catch (const EmptySelection&) {
        arm["asr_images"] = 0;
      }
      nlohmann::ordered_json j;
      j["partial"] = false;
      j["manifest_hash"] = manifest_hash(manifest.source);
      j["attack"] = att_flags.method + " " + cfg.describe();
      j["seed"] = seed;
      j["arms"] = nlohmann::ordered_json::array({arm});
      write_text(att_out, j.dump(2) + "\n");
      if (!att_adv.empty()) {
        LabeledImages adv;
        for (Index i = 0; i < t.adv.perturbed.dim(0); ++i)
          adv.images.push_back(quantize_toward(t.adv.perturbed, t.adv.original, i));
        adv.labels = data.labels;
        save_dataset(att_adv, adv);
        KeyValues meta;
        meta.set("method", att_flags.method);
        meta.set("arm", arm["arm"].get<std::string>());
        meta.set("norm", to_string(cfg.norm));
        meta.set("eps", cfg.epsilon);
        meta.set("steps", cfg.steps);
        meta.set("step_size", cfg.resolved_step_size());
        meta.set("seed", seed);
        meta.write(fs::path(att_adv) / "adv.meta");
      }
      std::printf("clean %.4f  robust %.4f  (surrogate %.4f -> %.4f)\n", t.clean.single_draw, t.robust.single_draw,
                  t.surrogate_clean_accuracy, t.surrogate_robust_accuracy);
    } else if (*evaluate) {
      const auto manifest = DefenseManifest::read(ev_manifest);
      auto cfg = ev_config.empty() ? ExperimentConfig{} : ExperimentConfig::from_key_values(KeyValues::read(ev_config));
      if (evaluate->count("--seed")) cfg.seed = seed;
      const auto defense_cfg = load_pretrained(manifest).config;
      const auto train = load_dataset(ev_train, defense_cfg.num_classes);
      const auto test = load_dataset(ev_test, defense_cfg.num_classes);
      const auto report = run_experiment(manifest, train, test, cfg, ev_out);
      std::cout << report.to_csv();
    } else if (*report_cmd) {
      std::ifstream in(rep_in);
      if (!in) throw FormatError("cannot read " + rep_in);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
        std::cout << report_text(j);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(rep_in + ": " + e.what());
      }
    }
  } catch (const ks::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
