#include "tumorsynth/config.hpp"

#include <fstream>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"

namespace tumorsynth {

using nlohmann::json;

namespace {

bool same_kind(const json& def, const json& got) {
  if (def.is_number_float()) return got.is_number();
  if (def.is_number_integer()) return got.is_number_integer();
  if (def.is_array() && def.empty()) return got.is_array();
  return def.type() == got.type();
}

// Overlay `got` on the defaults tree. Objects merge key by key, everything else replaces.
void merge_strict(json& def, const json& got, const std::string& path) {
  if (!same_kind(def, got)) {
    throw ValidationError("config " + (path.empty() ? std::string("root") : path) + ": expected " +
                          std::string(def.type_name()) + ", got " + got.type_name());
  }
  if (!def.is_object()) {
    def = got;
    return;
  }
  for (const auto& [k, v] : got.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (!def.contains(k)) throw ValidationError("config: unknown key '" + p + "'");
    merge_strict(def[k], v, p);
  }
}

template <class F>
auto field(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("config " + what);
}

Shape3 cube(int e) { return {e, e, e}; }

}  // namespace

PhantomSetOptions RunConfig::heldout_phantoms() const {
  PhantomSetOptions h = phantoms;
  h.count = heldout_count;
  h.seed = stage_seed(1);
  return h;
}

json to_json(const RunConfig& c) {
  json organs = json::array();
  for (auto o : c.phantoms.organs) organs.push_back(to_string(o));
  auto ae = to_json(c.ae);
  auto den = to_json(c.denoiser);
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"phantom",
       {{"count", c.phantoms.count},
        {"heldout_count", c.heldout_count},
        {"organs", organs},
        {"profiles", c.phantoms.profiles},
        {"patch_edge", c.phantoms.shape.d},
        {"min_radius_mm", c.phantoms.min_radius_mm},
        {"max_radius_mm", c.phantoms.max_radius_mm}}},
      {"autoencoder",
       {{"model", ae}, {"steps", c.ae_train.steps}, {"lr", c.ae_train.lr}, {"grad_clip", c.ae_train.grad_clip}}},
      {"diffusion",
       {{"model", den},
        {"steps", c.diffusion.steps},
        {"lr", c.diffusion.lr},
        {"grad_clip", c.diffusion.grad_clip},
        {"batch", c.diffusion.batch},
        {"text_aug", c.diffusion.text_aug},
        {"tumor_weight", c.diffusion.tumor_weight},
        {"controllability_pairs", c.controllability_pairs}}},
      {"contrastive",
       {{"lambda_c", c.diffusion.lambda_c}, {"margin", c.diffusion.margin}, {"eval_triplets", c.feature_triplets}}},
      {"text", {{"variants", c.text_variants}, {"similarity_threshold", c.similarity_threshold}}},
      {"augmentation",
       {{"per_case", c.augment.per_case},
        {"magnification", c.augment.magnification},
        {"min_voxels", c.mining.min_voxels},
        {"false_positives", c.mining.false_positives},
        {"false_negatives", c.mining.false_negatives}}},
      {"radiomics", {{"samples", c.radiomics_samples}, {"mode", to_string(c.radiomics_mode)}}},
      {"turing",
       {{"per_cell", c.turing_per_cell},
        {"host", c.turing_host},
        {"port", c.turing_port},
        {"method_names", c.method_names}}},
  };
}

RunConfig run_config_from_json(const json& user) {
  if (!user.is_object()) throw ValidationError("config must be a JSON object");
  json j = to_json(RunConfig{});
  merge_strict(j, user, "");

  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();
  require(!c.output_dir.empty(), "output_dir must be nonempty");

  const auto& ph = j.at("phantom");
  c.phantoms.count = ph.at("count").get<int>();
  c.heldout_count = ph.at("heldout_count").get<int>();
  c.phantoms.organs.clear();
  for (const auto& o : ph.at("organs"))
    c.phantoms.organs.push_back(field("phantom.organs", [&] { return organ_from_string(o.get<std::string>()); }));
  c.phantoms.profiles = field("phantom.profiles", [&] { return ph.at("profiles").get<std::vector<std::vector<std::string>>>(); });
  const int edge = ph.at("patch_edge").get<int>();
  c.phantoms.shape = cube(edge);
  c.phantoms.min_radius_mm = ph.at("min_radius_mm").get<double>();
  c.phantoms.max_radius_mm = ph.at("max_radius_mm").get<double>();
  c.phantoms.seed = c.stage_seed(0);
  require(c.phantoms.count >= 1 && c.heldout_count >= 1, "phantom counts must be >= 1");
  require(!c.phantoms.organs.empty(), "phantom.organs must be nonempty");
  require(c.phantoms.min_radius_mm > 0 && c.phantoms.min_radius_mm <= c.phantoms.max_radius_mm,
          "phantom radii must satisfy 0 < min <= max");
  for (const auto& p : c.phantoms.profiles)
    for (auto o : c.phantoms.organs) field("phantom.profiles", [&] { return resolve_appearance(p, o); });

  const auto& ae = j.at("autoencoder");
  c.ae = field("autoencoder.model", [&] { return ae_config_from_json(ae.at("model")); });
  c.ae_train.steps = ae.at("steps").get<long>();
  c.ae_train.lr = ae.at("lr").get<double>();
  c.ae_train.grad_clip = ae.at("grad_clip").get<double>();
  c.ae_train.seed = c.stage_seed(2);
  require(c.ae_train.steps >= 0 && c.ae_train.lr > 0 && c.ae_train.grad_clip > 0, "autoencoder training values out of range");
  require(edge >= 4 && edge % (c.ae.f * 4) == 0,
          "phantom.patch_edge must be a multiple of 4 * autoencoder f (two denoiser downsamplings)");

  const auto& df = j.at("diffusion");
  c.denoiser = field("diffusion.model", [&] { return denoiser_config_from_json(df.at("model")); });
  c.diffusion.steps = df.at("steps").get<long>();
  c.diffusion.lr = df.at("lr").get<double>();
  c.diffusion.grad_clip = df.at("grad_clip").get<double>();
  c.diffusion.batch = df.at("batch").get<int>();
  c.diffusion.text_aug = df.at("text_aug").get<bool>();
  c.diffusion.tumor_weight = df.at("tumor_weight").get<double>();
  c.controllability_pairs = df.at("controllability_pairs").get<int>();
  c.diffusion.seed = c.stage_seed(3);
  require(c.denoiser.latent_channels == c.ae.channels, "diffusion.model.latent_channels must equal autoencoder.model.channels");
  require(c.denoiser.text_dim == kDefaultEmbeddingDim, "diffusion.model.text_dim must equal the embedding size");
  require(c.diffusion.steps >= 0 && c.diffusion.lr > 0 && c.diffusion.grad_clip > 0 && c.diffusion.batch >= 1,
          "diffusion training values out of range");
  require(c.diffusion.tumor_weight >= 0, "diffusion.tumor_weight must be >= 0");
  require(c.controllability_pairs >= 1 && c.controllability_pairs <= c.heldout_count,
          "diffusion.controllability_pairs must be in 1..phantom.heldout_count");

  const auto& ct = j.at("contrastive");
  c.diffusion.lambda_c = ct.at("lambda_c").get<double>();
  c.diffusion.margin = ct.at("margin").get<double>();
  c.feature_triplets = ct.at("eval_triplets").get<int>();
  require(c.diffusion.lambda_c >= 0 && c.diffusion.margin > 0 && c.feature_triplets >= 1, "contrastive values out of range");

  const auto& tx = j.at("text");
  c.text_variants = tx.at("variants").get<int>();
  c.similarity_threshold = tx.at("similarity_threshold").get<double>();
  require(c.text_variants >= 1, "text.variants must be >= 1");
  require(c.similarity_threshold >= -1 && c.similarity_threshold <= 1, "text.similarity_threshold must be in [-1, 1]");

  const auto& au = j.at("augmentation");
  c.augment.per_case = au.at("per_case").get<int>();
  c.augment.magnification = au.at("magnification").get<double>();
  c.augment.seed = c.stage_seed(4);
  c.mining.min_voxels = au.at("min_voxels").get<int>();
  c.mining.false_positives = au.at("false_positives").get<bool>();
  c.mining.false_negatives = au.at("false_negatives").get<bool>();
  c.mining.patch = c.phantoms.shape;
  require(c.augment.per_case >= 0 && c.augment.magnification >= 1.0 && c.mining.min_voxels >= 1,
          "augmentation values out of range");
  require(c.mining.false_positives || c.mining.false_negatives, "augmentation must mine at least one failure kind");

  const auto& ra = j.at("radiomics");
  c.radiomics_samples = ra.at("samples").get<int>();
  c.radiomics_mode = field("radiomics.mode", [&] { return diversity_mode_from_string(ra.at("mode").get<std::string>()); });
  require(c.radiomics_samples >= 2, "radiomics.samples must be >= 2");

  const auto& tu = j.at("turing");
  c.turing_per_cell = tu.at("per_cell").get<int>();
  c.turing_host = tu.at("host").get<std::string>();
  c.turing_port = tu.at("port").get<int>();
  c.method_names = field("turing.method_names", [&] { return tu.at("method_names").get<std::array<std::string, 2>>(); });
  require(c.turing_per_cell >= 1, "turing.per_cell must be >= 1");
  require(c.turing_port >= 0 && c.turing_port <= 65535, "turing.port must be in 0..65535");
  require(!c.method_names[0].empty() && c.method_names[0] != c.method_names[1], "turing.method_names must be distinct");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("config " + path.string() + " not found");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

// output_dir is where results go, not what they are
std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  return hex64(fnv1a("runconfig:" + j.dump()));
}

}  // namespace tumorsynth
