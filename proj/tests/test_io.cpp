#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "ks/checkpoint.hpp"
#include "ks/dataset.hpp"
#include "ks/experiment.hpp"

using namespace ks;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(KS_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("dataset container round trip") {
  const auto dir = scratch("ks_io_dataset");
  const auto data = synthesize_dataset(12, 8, 3, 4);
  save_dataset(dir, data);
  const auto back = load_dataset(dir, 4);
  CHECK(back.labels == data.labels);
  CHECK(back.images == data.images);
  CHECK_THROWS_AS(load_dataset(dir, 3), LabelError);
  fs::remove_all(dir);
}

TEST_CASE("malformed containers are format errors") {
  const auto dir = scratch("ks_io_bad");
  const auto data = synthesize_dataset(4, 8, 1, 4);
  save_dataset(dir, data);
  auto bytes = slurp(dir / kImagesFile);

  std::ofstream(dir / kImagesFile, std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  CHECK_THROWS_AS(load_dataset(dir), FormatError);

  bytes[0] = 'X';
  std::ofstream(dir / kImagesFile, std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_dataset(dir), FormatError);

  save_dataset(dir, data);
  std::ofstream(dir / kLabelsFile) << "0\n1\n";
  CHECK_THROWS_AS(load_dataset(dir), LabelError);
  std::ofstream(dir / kLabelsFile) << "0\n1\nx\n2\n";
  CHECK_THROWS_AS(load_dataset(dir), LabelError);
  CHECK_THROWS_AS(load_dataset(dir / "missing"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint container round trip and corruption") {
  const std::vector<NamedTensor> tensors{{"a", Tensor<float>({2, 2}, {1, 2, 3, 4})}, {"b.c", Tensor<float>({1}, {-0.5f})}};
  const auto bytes = encode_checkpoint(tensors);
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].value == tensors[0].value);
  CHECK(back[1].value == tensors[1].value);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 2)), FormatError);
  auto bad = bytes;
  bad[1] = '?';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
}

TEST_CASE("quantization never leaves the budget") {
  Tensor<float> orig({1, 3, 1, 1}, {10.0f / 255, 0.5f, 1.0f});
  Tensor<float> pert({1, 3, 1, 1}, {10.4f / 255 + 0.03f, 0.5f - 0.0314f, 1.0f});
  const auto img = quantize_toward(pert, orig, 0);
  for (Index c = 0; c < 3; ++c) {
    const double q = img.pixels[std::size_t(c)] / 255.0;
    CHECK(std::abs(q - orig[c]) <= std::abs(pert[c] - orig[c]) + 1e-7);
  }
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.partial = false;
  r.config = ExperimentConfig{}.to_key_values();
  r.arms.push_back({"clean", "sampled key per image", {{"accuracy", 0.875}}, 8, 0, 1.5});
  r.arms.push_back({"eot_n2", "pool", {{"asr", 0.25}}, 4, 0, 2.0});
  const auto csv = r.to_csv();
  CHECK(csv.rfind("arm,norm,eps,metric,value\n", 0) == 0);
  CHECK(csv.find("clean,none,0,accuracy,0.875") != std::string::npos);
  CHECK(r.arm("eot_n2").metric("asr") == 0.25);
  CHECK_THROWS_AS(r.arm("white"), IndexError);
  CHECK(r.to_json(false).find("seconds") == std::string::npos);
  CHECK(r.to_json(true).find("seconds") != std::string::npos);
}

TEST_CASE("experiment config parsing") {
  KeyValues kv;
  kv.set("arms", "clean,eot");
  kv.set("eps", "4/255");
  kv.set("eot_pools", "1,3");
  kv.set("finetune.epochs", "2");
  const auto c = ExperimentConfig::from_key_values(kv);
  CHECK(c.arms == std::vector<std::string>{"clean", "eot"});
  CHECK(c.attack.epsilon == doctest::Approx(4.0 / 255));
  CHECK(c.eot_pools == std::vector<std::size_t>{1, 3});
  CHECK(c.attacker_finetune.epochs == 2);
  kv.set("arms", "clean,bogus");
  CHECK_THROWS_AS(ExperimentConfig::from_key_values(kv).validate(10), ConfigError);
}

TEST_CASE("command line pipeline and exit codes") {
  const auto dir = scratch("ks_io_cli");
  const auto d = dir.string();
  REQUIRE(cli("synthesize-dataset --out " + d + "/train --count 48 --side 16 --seed 1") == 0);
  REQUIRE(cli("synthesize-dataset --out " + d + "/test --count 24 --side 16 --seed 2") == 0);
  REQUIRE(cli("keygen --out " + d + "/keys.txt --count 3 --seed 5") == 0);
  REQUIRE(cli("encrypt --data " + d + "/test --keys " + d + "/keys.txt --key-index 1 --out " + d + "/enc") == 0);
  CHECK(load_dataset(dir / "enc").images ==
        encrypt_dataset(load_dataset(dir / "test"), read_key_file(dir / "keys.txt")[1], 4).images);
  REQUIRE(cli("pretrain --data " + d + "/train --out " + d + "/pre --side 16 --hidden 8 --depth 1 --epochs 1 --seed 3") == 0);
  REQUIRE(cli("finetune --pretrained " + d + "/pre --data " + d + "/train --keys " + d + "/keys.txt -n 2 --epochs 1 --out " +
              d + "/def --seed 4") == 0);
  const auto manifest = d + "/def/defense.manifest";
  REQUIRE(cli("predict --manifest " + manifest + " --data " + d + "/test --out " + d + "/pred.txt") == 0);
  CHECK(fs::exists(dir / "pred.txt"));
  REQUIRE(cli("attack --manifest " + manifest + " --data " + d + "/test --scenario 1 --steps 2 --restarts 1 --out " + d +
              "/att.json --adv-out " + d + "/adv") == 0);
  CHECK(fs::exists(dir / "adv" / "adv.meta"));
  CHECK(cli("report --in " + d + "/att.json") == 0);

  std::ofstream(dir / "exp.conf") << "arms = clean\n";
  REQUIRE(cli("evaluate --manifest " + manifest + " --train " + d + "/train --test " + d + "/test --config " + d +
              "/exp.conf --out " + d + "/ev --seed 9") == 0);
  CHECK(slurp(dir / "ev" / "report.csv").find("clean,none,0,accuracy,") != std::string::npos);
  CHECK(cli("report --in " + d + "/ev/report.json") == 0);

  // 2: format errors
  CHECK(cli("pretrain --data " + d + "/missing --out " + d + "/x --side 16") == 2);
  std::ofstream(dir / "junk.json") << "{ not json";
  CHECK(cli("report --in " + d + "/junk.json") == 2);
  // 3: configuration errors
  CHECK(cli("attack --manifest " + manifest + " --data " + d + "/test --norm l1 --out " + d + "/a.json") == 3);
  CHECK(cli("pretrain --data " + d + "/train --out " + d + "/x --side 18") == 3);
  CHECK(cli("finetune --no-such-flag") == 3);
  std::ofstream(dir / "dup.txt") << "7\n7\n";
  CHECK(cli("finetune --pretrained " + d + "/pre --data " + d + "/train --keys " + d + "/dup.txt --epochs 1 --out " + d +
            "/dup") == 3);
  // 4: runtime failures
  CHECK(cli("predict --manifest " + manifest + " --data " + d + "/test --key-index 5") == 4);
  fs::remove_all(dir);
}
