#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/experiment.hpp"
#include "tumorsynth/rng.hpp"

using namespace tumorsynth;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path p;
  TempDir() {
    p = fs::temp_directory_path() / ("ts_cfg_" + std::to_string(Rng::mix(reinterpret_cast<std::uintptr_t>(this))));
    fs::create_directories(p);
  }
  ~TempDir() { fs::remove_all(p); }
};

std::string error_of(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

// a small config the CLI tests can run in a second or two
json tiny() {
  return {{"phantom", {{"count", 3}, {"heldout_count", 2}, {"patch_edge", 32}}},
          {"autoencoder", {{"steps", 1}, {"model", {{"beta", 0.25}, {"channels", 4}, {"codebook_size", 16}, {"f", 4},
                                                     {"res_blocks", 1}, {"seed", 0}, {"widths", {4, 8}}}}}},
          {"diffusion", {{"controllability_pairs", 2}}}};
}

int run_cli(const std::string& args) {
  const int st = std::system((std::string(TUMORSYNTH_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig d;
  const auto j = to_json(d);
  const auto back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(d));
  EXPECT_EQ(run_config_from_json(json::object()).phantoms.count, d.phantoms.count);
}

TEST(Config, UnknownKeysRejectedWithPath) {
  EXPECT_NE(error_of({{"sed", 3}}).find("'sed'"), std::string::npos);
  EXPECT_NE(error_of({{"diffusion", {{"stepz", 3}}}}).find("'diffusion.stepz'"), std::string::npos);
  EXPECT_NE(error_of({{"autoencoder", {{"model", {{"chanels", 4}}}}}}).find("autoencoder.model.chanels"),
            std::string::npos);
}

TEST(Config, TypeMismatchNamesThePath) {
  EXPECT_NE(error_of({{"diffusion", {{"steps", "many"}}}}).find("diffusion.steps"), std::string::npos);
  EXPECT_NE(error_of({{"phantom", {{"count", 2.5}}}}).find("phantom.count"), std::string::npos);
  EXPECT_NE(error_of({{"turing", 8080}}).find("turing"), std::string::npos);
  // integers are fine where a float is expected
  EXPECT_EQ(run_config_from_json({{"contrastive", {{"lambda_c", 1}}}}).diffusion.lambda_c, 1.0);
}

TEST(Config, ContractsCheckedUpFront) {
  EXPECT_FALSE(error_of({{"phantom", {{"patch_edge", 20}}}}).empty());
  EXPECT_FALSE(error_of({{"diffusion", {{"model", {{"latent_channels", 3}}}}}}).empty());
  EXPECT_FALSE(error_of({{"phantom", {{"organs", {"spleen"}}}}}).empty());
  EXPECT_FALSE(error_of({{"phantom", {{"profiles", {{"glowing"}}}}}}).empty());
  EXPECT_FALSE(error_of({{"turing", {{"method_names", {"a", "a"}}}}}).empty());
  EXPECT_FALSE(error_of({{"augmentation", {{"false_positives", false}, {"false_negatives", false}}}}).empty());
  EXPECT_FALSE(error_of({{"diffusion", {{"controllability_pairs", 30}}}}).empty());
  EXPECT_FALSE(error_of({{"radiomics", {{"mode", "median"}}}}).empty());
  EXPECT_FALSE(error_of(json::array()).empty());
}

TEST(Config, StageSeedsDeriveFromSeed) {
  const auto c = run_config_from_json({{"seed", 10}});
  EXPECT_EQ(c.phantoms.seed, 10u);
  EXPECT_EQ(c.heldout_phantoms().seed, 11u);
  EXPECT_EQ(c.ae_train.seed, 12u);
  EXPECT_EQ(c.diffusion.seed, 13u);
  EXPECT_EQ(c.augment.seed, 14u);
}

TEST(Config, HashTracksEveryField) {
  Rng rng(5);
  const auto base = config_hash(RunConfig{});
  std::set<std::string> seen{base};
  // random single-field edits never collide with the default or each other
  for (int i = 0; i < 30; ++i) {
    const auto s = 2 + rng.below(1000000);
    EXPECT_TRUE(seen.insert(config_hash(run_config_from_json({{"seed", s}}))).second || s == 1);
  }
  EXPECT_NE(config_hash(run_config_from_json({{"diffusion", {{"tumor_weight", 1.5}}}})), base);
}

TEST(Manifest, DeterministicAndHashed) {
  TempDir t;
  std::ofstream(t.p / "a.bin") << "abc";
  auto make = [&] {
    Manifest m{"x", RunConfig{}};
    m.add_artifact(t.p, t.p / "a.bin");
    m.metrics = {{"k", 1}};
    return m.to_json();
  };
  const auto a = make(), b = make();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.at("artifacts")[0].at("path"), "a.bin");
  EXPECT_EQ(a.at("config_hash"), config_hash(RunConfig{}));
  EXPECT_FALSE(a.at("version").get<std::string>().empty());
}

TEST(Cli, ExitCodes) {
  TempDir t;
  std::ofstream(t.p / "bad.json") << R"({"diffusion": {"stepz": 1}})";
  std::ofstream(t.p / "broken.json") << "{";
  std::ofstream(t.p / "tiny.json") << tiny().dump();
  EXPECT_EQ(run_cli("phantom-gen -c " + (t.p / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("phantom-gen -c " + (t.p / "broken.json").string()), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("train-diffusion --contrastive maybe -c " + (t.p / "tiny.json").string() + " -o " + t.p.string()), 2);
  // missing checkpoint is a runtime failure and leaves the marker
  EXPECT_EQ(run_cli("synthesize -c " + (t.p / "tiny.json").string() + " -o " + (t.p / "s").string() +
                    " --healthy x.hdr --mask y.hdr --text hi"),
            3);
  EXPECT_FALSE(fs::exists(t.p / "bad"));
}

TEST(Cli, PhantomGenIsDeterministic) {
  TempDir t;
  std::ofstream(t.p / "tiny.json") << tiny().dump();
  const auto cfg = (t.p / "tiny.json").string();
  ASSERT_EQ(run_cli("phantom-gen -c " + cfg + " -o " + (t.p / "a").string()), 0);
  ASSERT_EQ(run_cli("phantom-gen -c " + cfg + " -o " + (t.p / "b").string()), 0);
  auto read = [](const fs::path& p) { return json::parse(std::ifstream(p / "phantoms" / "phantom-gen.manifest.json")); };
  auto a = read(t.p / "a"), b = read(t.p / "b");
  EXPECT_EQ(a.at("artifacts"), b.at("artifacts"));
  EXPECT_EQ(a.at("config_hash"), b.at("config_hash"));
  EXPECT_EQ(a.at("metrics").at("train"), 3);
  EXPECT_FALSE(fs::exists(t.p / "a" / "phantoms" / ".incomplete"));
  const auto set = json::parse(std::ifstream(t.p / "a" / "phantoms" / "train" / "manifest.json"));
  ASSERT_EQ(set.at("samples").size(), 3u);
  const auto v = load_volume(t.p / "a" / "phantoms" / "train" / set.at("samples")[0].at("volume").get<std::string>());
  EXPECT_EQ(v.shape().d, 32);
}
