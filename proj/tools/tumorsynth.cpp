// tumorsynth: command line entry point. Every subcommand reads one config file, validates it before
// touching the disk, and leaves <subcommand>.manifest.json next to its outputs (or a .incomplete marker on failure).

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "tumorsynth/errors.hpp"
#include "tumorsynth/experiment.hpp"
#include "tumorsynth/hash.hpp"
#include "tumorsynth/turing.hpp"

using namespace tumorsynth;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;  // overrides output_dir
};

RunConfig load(const Common& c) {
  try {
    auto cfg = load_run_config(c.config);
    if (!c.out.empty()) cfg.output_dir = c.out;
    return cfg;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

bool on_off(const std::string& v, const char* flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ConfigError(std::string(flag) + " takes on or off");
}

void hash_tree(Manifest& m, const fs::path& root, const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto name = f.filename().string();
    if (name == ".incomplete" || (name.size() > 14 && name.ends_with(".manifest.json"))) continue;
    m.add_artifact(root, f);
  }
}

// name=dir pairs
std::map<std::string, fs::path> named_dirs(const std::vector<std::string>& items, const char* flag) {
  std::map<std::string, fs::path> out;
  for (const auto& s : items) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == s.size()) {
      throw ConfigError(std::string(flag) + " expects name=dir, got '" + s + "'");
    }
    if (!out.emplace(s.substr(0, eq), s.substr(eq + 1)).second) throw ConfigError(std::string(flag) + " repeats " + s);
  }
  return out;
}

// samples of a set directory written by phantom-gen, augment or synthesize
json read_set(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw NotFoundError("no manifest.json in " + dir.string());
  const auto j = json::parse(f);
  if (!j.contains("samples")) throw FormatError(dir.string() + "/manifest.json has no samples");
  return j.at("samples");
}

// pinned on the heap: model points into ae and den
struct Models {
  Autoencoder ae;
  std::unique_ptr<Denoiser> den;
  SynthesisModel model;
};

std::unique_ptr<Models> load_models(const RunConfig& cfg, const std::string& ae_path, const std::string& den_path) {
  const fs::path out(cfg.output_dir);
  auto m = std::make_unique<Models>(
      Models{Autoencoder::load(ae_path.empty() ? out / "ae.ckpt" : fs::path(ae_path)), nullptr, {}});
  auto [den, extra] = Denoiser::load(den_path.empty() ? out / "denoiser.ckpt" : fs::path(den_path));
  m->den = std::make_unique<Denoiser>(std::move(den));
  m->model = {&m->ae, m->den.get(), latent_stats_from_json(extra.at("latent_stats")), m->den->schedule()};
  return m;
}

// --- subcommands ---------------------------------------------------------------

void write_phantom_set(const fs::path& dir, const std::vector<PhantomSpec>& specs, const std::vector<Phantom>& ph) {
  for (const char* sub : {"volumes", "healthy", "masks", "organs"}) fs::create_directories(dir / sub);
  json samples = json::array();
  for (std::size_t i = 0; i < ph.size(); ++i) {
    const std::string stem = "phantom_" + std::to_string(i);
    save_volume(dir / "volumes" / stem, ph[i].volume);
    save_volume(dir / "healthy" / stem, ph[i].healthy);
    save_mask(dir / "masks" / stem, ph[i].mask, ph[i].volume.spacing());
    save_mask(dir / "organs" / stem, ph[i].organ, ph[i].volume.spacing());
    samples.push_back({{"volume", "volumes/" + stem + ".hdr"},
                       {"healthy", "healthy/" + stem + ".hdr"},
                       {"mask", "masks/" + stem + ".hdr"},
                       {"organ_mask", "organs/" + stem + ".hdr"},
                       {"organ", to_string(specs[i].organ)},
                       {"profile", specs[i].descriptor_profile},
                       {"report", ph[i].reference_text}});
  }
  std::ofstream(dir / "manifest.json") << json{{"kind", "phantom_set"}, {"samples", samples}}.dump(2) << "\n";
}

int phantom_gen(const Common& com) {
  const auto cfg = load(com);
  const fs::path out = fs::path(cfg.output_dir) / "phantoms";
  IncompleteMarker marker(out);
  const auto data = make_phantom_data(cfg);
  write_phantom_set(out / "train", data.train_specs, data.train);
  write_phantom_set(out / "heldout", data.heldout_specs, data.heldout);
  Manifest m{"phantom-gen", cfg};
  hash_tree(m, out, out);
  m.metrics = {{"train", data.train.size()}, {"heldout", data.heldout.size()}};
  m.write(out);
  marker.commit();
  std::cout << "wrote " << data.train.size() << " + " << data.heldout.size() << " phantoms to " << out << "\n";
  return 0;
}

int train_ae(const Common& com) {
  const auto cfg = load(com);
  const fs::path out(cfg.output_dir);
  IncompleteMarker marker(out);
  const auto data = make_phantom_data(cfg);
  AEMetrics metrics;
  const auto ae = train_ae_stage(cfg, data, &metrics);
  ae.save(out / "ae.ckpt");
  Manifest m{"train-ae", cfg};
  m.add_artifact(out, out / "ae.ckpt");
  m.metrics = {{"steps", metrics.loss.size()},
               {"first_loss", metrics.loss.empty() ? 0.0 : metrics.loss.front()},
               {"last_loss", metrics.loss.empty() ? 0.0 : metrics.loss.back()},
               {"heldout_reconstruction_mse", reconstruction_mse(ae, normalized_volumes(data.heldout))}};
  m.write(out);
  marker.commit();
  std::cout << "autoencoder: " << m.metrics.dump() << "\n";
  return 0;
}

int train_diffusion_cmd(const Common& com, const std::string& contrastive, const std::string& text_aug,
                        const std::string& ae_path) {
  auto cfg = load(com);
  if (!contrastive.empty() && !on_off(contrastive, "--contrastive")) cfg.diffusion.lambda_c = 0.0;
  if (!text_aug.empty()) cfg.diffusion.text_aug = on_off(text_aug, "--text-aug");
  const fs::path out(cfg.output_dir);
  const fs::path aep = ae_path.empty() ? out / "ae.ckpt" : fs::path(ae_path);
  if (!fs::exists(aep)) throw ConfigError("autoencoder checkpoint " + aep.string() + " not found; run train-ae first");
  IncompleteMarker marker(out);
  const auto ae = Autoencoder::load(aep);
  const auto data = make_phantom_data(cfg);
  auto stage = train_diffusion_stage(cfg, ae, data);
  stage.denoiser->save(out / "denoiser.ckpt", diffusion_extra(stage));
  attach_denoiser(stage, out / "denoiser.ckpt");  // metrics describe the saved weights

  Manifest m{"train-diffusion", cfg};
  m.add_artifact(out, out / "denoiser.ckpt");
  m.metrics["lambda_c"] = cfg.diffusion.lambda_c;
  m.metrics["last_loss"] = stage.metrics.loss.empty() ? 0.0 : stage.metrics.loss.back();
  if (cfg.diffusion.lambda_c > 0) {
    const auto fd = heldout_feature_distances(cfg, stage);
    m.metrics["feature_distances"] = {{"intra", fd.intra}, {"inter", fd.inter}, {"triplets", fd.triplets}};
  } else {
    m.metrics["feature_distances"] = "skipped: contrastive loss off";
  }
  const SynthesisModel sm{&ae, stage.denoiser.get(), stage.stats, stage.schedule};
  const auto ctl = controllability(sm, data, cfg.controllability_pairs, cfg.stage_seed(7));
  m.metrics["controllability"] = {{"wins", ctl.wins}, {"pairs", ctl.pairs.size()}};
  m.write(out);
  marker.commit();
  std::cout << "diffusion: " << m.metrics.dump() << "\n";
  return 0;
}

int synthesize_cmd(const Common& com, const std::string& healthy, const std::string& mask, const std::string& text,
                   std::uint64_t seed, const std::string& ae_path, const std::string& den_path) {
  const auto cfg = load(com);
  if (text.empty()) throw ConfigError("--text must be nonempty");
  const auto models = load_models(cfg, ae_path, den_path);
  const Volume x = load_volume(healthy);
  const TumorMask m = load_mask(mask);
  const fs::path out = fs::path(cfg.output_dir) / "synthesis";
  IncompleteMarker marker(out);
  Rng rng(seed);
  const Volume y = synthesize_tumor(x, m, text, models->model, rng);
  save_volume(out / "volume", y);
  save_mask(out / "mask", m, y.spacing());
  const json prov = synthesis_provenance(seed, text, m, models->model.schedule, {});
  std::ofstream(out / "provenance.json") << prov.dump(2) << "\n";
  const json samples = json::array({{{"volume", "volume.hdr"}, {"mask", "mask.hdr"}, {"report", text}, {"seed", seed}}});
  std::ofstream(out / "manifest.json") << json{{"kind", "synthesis"}, {"samples", samples}}.dump(2) << "\n";
  Manifest man{"synthesize", cfg};
  hash_tree(man, out, out);
  man.metrics = {{"provenance", prov}};
  man.write(out);
  marker.commit();
  std::cout << "wrote " << (out / "volume.hdr") << "\n";
  return 0;
}

int augment_cmd(const Common& com, const std::string& pred, const std::string& truth, const std::string& volume,
                const std::vector<std::string>& healthy, const std::string& source_id, const std::string& organ,
                const std::string& ae_path, const std::string& den_path) {
  const auto cfg = load(com);
  Organ o;
  try {
    o = organ_from_string(organ);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const auto models = load_models(cfg, ae_path, den_path);
  auto opt = cfg.mining;
  opt.source_id = source_id;
  opt.organ = o;
  const auto cases = mine_failures(load_mask(pred), load_mask(truth), load_volume(volume), opt);
  std::vector<Volume> pool;
  for (const auto& h : healthy) pool.push_back(load_volume(h));
  const fs::path out = fs::path(cfg.output_dir) / "augmented";
  IncompleteMarker marker(out);
  MockLMClient lm;
  const auto samples = augment(cases, pool, models->model, lm, cfg.augment);
  const auto set = write_augmented_set(out, samples);
  Manifest m{"augment", cfg};
  hash_tree(m, out, out);
  json mined = json::array();
  for (const auto& c : cases) mined.push_back({{"id", c.source_id}, {"kind", to_string(c.kind)}, {"voxels", c.voxels}});
  m.metrics = {{"failure_cases", mined}, {"samples", set.at("samples")}};
  m.write(out);
  marker.commit();
  std::cout << cases.size() << " failure cases, " << samples.size() << " samples in " << out << "\n";
  return 0;
}

int radiomics_cmd(const Common& com, const std::vector<std::string>& sets_in, bool phantom_sets) {
  const auto cfg = load(com);
  std::map<std::string, std::vector<RadiomicsSample>> sets;
  if (phantom_sets) {
    // varied descriptors vs one fixed descriptor, same geometry sampler
    auto varied = cfg.phantoms;
    varied.count = cfg.radiomics_samples;
    varied.seed = cfg.stage_seed(5);
    auto fixed = varied;
    fixed.profiles = {{"hypodense"}};
    for (const auto& [name, opt] : {std::pair{"varied", varied}, std::pair{"fixed", fixed}}) {
      const auto specs = sample_phantom_specs(opt);
      const auto ph = make_phantoms(specs);
      for (std::size_t i = 0; i < ph.size(); ++i) sets[name].push_back({ph[i].volume, ph[i].mask, specs[i].organ});
    }
  }
  for (const auto& [name, dir] : named_dirs(sets_in, "--set")) {
    for (const auto& s : read_set(dir)) {
      sets[name].push_back({load_volume(dir / s.at("volume").get<std::string>()),
                            load_mask(dir / s.at("mask").get<std::string>()),
                            organ_from_string(s.value("organ", std::string("liver")))});
    }
  }
  if (sets.empty()) throw ConfigError("radiomics-compare needs --set name=dir or --phantom-sets");
  const fs::path out = fs::path(cfg.output_dir) / "radiomics";
  IncompleteMarker marker(out);
  const auto reports = compare_methods(sets, cfg.radiomics_mode);
  write_diversity_table(out / "diversity", reports);
  Manifest m{"radiomics-compare", cfg};
  hash_tree(m, out, out);
  json rs = json::array();
  for (const auto& r : reports) rs.push_back(to_json(r));
  m.metrics = {{"reports", rs}};
  m.write(out);
  marker.commit();
  for (const auto& r : reports)
    std::cout << r.method_name << " " << r.organ << " MV " << r.mv << " SD " << r.sd << "\n";
  return 0;
}

std::vector<CandidateCase> pool_from_dir(const fs::path& dir) {
  std::vector<CandidateCase> out;
  for (const auto& s : read_set(dir)) {
    out.push_back(candidate_from_files((dir / s.at("volume").get<std::string>()).string(),
                                       (dir / s.at("mask").get<std::string>()).string(),
                                       organ_from_string(s.value("organ", std::string("liver"))),
                                       s.value("report", std::string())));
  }
  return out;
}

int turing_cmd(const Common& com, const std::string& cases_path, const std::vector<std::string>& pools_in,
               const std::string& log_path, int port, bool assemble_only) {
  const auto cfg = load(com);
  const fs::path out = fs::path(cfg.output_dir) / "turing";
  const fs::path cp = cases_path.empty() ? out / "cases.json" : fs::path(cases_path);
  std::vector<TuringCase> cases;
  if (fs::exists(cp)) {
    cases = load_case_set(cp);
  } else {
    const auto dirs = named_dirs(pools_in, "--pool");
    std::map<CaseSource, std::vector<CandidateCase>> pools;
    std::set<Organ> organs;
    for (const auto& [name, dir] : dirs) {
      CaseSource src;
      try {
        src = case_source_from_string(name);
      } catch (const Error& e) {
        throw ConfigError(std::string("--pool: ") + e.what());
      }
      pools[src] = pool_from_dir(dir);
      for (const auto& c : pools[src]) organs.insert(c.organ);
    }
    if (pools.size() != kAllSources.size()) throw ConfigError("no case set at " + cp.string() + "; give --pool for real, method_A and method_B");
    IncompleteMarker marker(out);
    cases = assemble_case_set(pools, cfg.turing_per_cell, {organs.begin(), organs.end()}, cfg.stage_seed(6));
    fs::create_directories(cp.parent_path().empty() ? fs::path(".") : cp.parent_path());
    save_case_set(cp, cases);
    Manifest m{"turing-serve", cfg};
    m.add_artifact(out, cp);
    m.metrics = {{"cases", cases.size()}};
    m.write(out);
    marker.commit();
  }
  std::cout << cases.size() << " cases from " << cp << "\n";
  if (assemble_only) return 0;
  fs::create_directories(out);
  TuringService svc(cases, log_path.empty() ? out / "judgments.jsonl" : fs::path(log_path), cfg.stage_seed(6),
                    cfg.method_names);
  TuringServer server(svc);
  const int p = port >= 0 ? port : cfg.turing_port;
  std::cout << "serving on http://" << cfg.turing_host << ":" << p << "\n" << std::flush;
  if (!server.listen(cfg.turing_host, p)) throw Error("could not listen on " + cfg.turing_host + ":" + std::to_string(p));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tumorsynth: text-conditioned tumor synthesis on CT phantoms"};
  app.require_subcommand(1);
  Common com;
  auto add_common = [&](CLI::App* s) {
    s->add_option("-c,--config", com.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
    s->add_option("-o,--out", com.out, "override output_dir");
  };

  auto* pg = app.add_subcommand("phantom-gen", "write the training and held-out phantom sets");
  add_common(pg);

  auto* ta = app.add_subcommand("train-ae", "train the autoencoder");
  add_common(ta);

  std::string contrastive, text_aug, ae_path, den_path;
  auto* td = app.add_subcommand("train-diffusion", "train the latent denoiser");
  add_common(td);
  td->add_option("--contrastive", contrastive, "on|off (off sets lambda_c = 0)");
  td->add_option("--text-aug", text_aug, "on|off (report variants during training)");
  td->add_option("--ae", ae_path, "autoencoder checkpoint (default <out>/ae.ckpt)");

  std::string healthy, mask, text;
  std::uint64_t seed = 0;
  auto* sy = app.add_subcommand("synthesize", "synthesize one tumor into a healthy patch");
  add_common(sy);
  sy->add_option("--healthy", healthy, "healthy volume header")->required();
  sy->add_option("--mask", mask, "tumor mask header")->required();
  sy->add_option("--text", text, "report text")->required();
  sy->add_option("--seed", seed, "sampling seed");
  sy->add_option("--ae", ae_path, "autoencoder checkpoint");
  sy->add_option("--denoiser", den_path, "denoiser checkpoint");

  std::string pred, truth, volume, source_id = "case", organ = "liver";
  std::vector<std::string> healthy_pool;
  auto* au = app.add_subcommand("augment", "mine failures and synthesize targeted samples");
  add_common(au);
  au->add_option("--pred", pred, "predicted mask")->required();
  au->add_option("--truth", truth, "ground-truth mask")->required();
  au->add_option("--volume", volume, "CT volume")->required();
  au->add_option("--healthy", healthy_pool, "healthy patches (repeatable)")->required();
  au->add_option("--source-id", source_id, "case identifier");
  au->add_option("--organ", organ, "liver|pancreas|kidney");
  au->add_option("--ae", ae_path, "autoencoder checkpoint");
  au->add_option("--denoiser", den_path, "denoiser checkpoint");

  std::vector<std::string> sets;
  bool phantom_sets = false;
  auto* rc = app.add_subcommand("radiomics-compare", "diversity table over sample sets");
  add_common(rc);
  rc->add_option("--set", sets, "name=dir with a manifest.json of samples (repeatable)");
  rc->add_flag("--phantom-sets", phantom_sets, "add varied- and fixed-descriptor phantom sets");

  std::string cases_path, log_path;
  std::vector<std::string> pools;
  int port = -1;
  bool assemble_only = false;
  auto* ts = app.add_subcommand("turing-serve", "serve the visual Turing test");
  add_common(ts);
  ts->add_option("--cases", cases_path, "case set file (assembled from --pool when missing)");
  ts->add_option("--pool", pools, "real|method_A|method_B=dir (repeatable)");
  ts->add_option("--log", log_path, "append-only judgment log");
  ts->add_option("--port", port, "port (default from config)");
  ts->add_flag("--assemble-only", assemble_only, "write the case set and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_ = app.exit(e);
    return rc_ == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pg) return phantom_gen(com);
    if (*ta) return train_ae(com);
    if (*td) return train_diffusion_cmd(com, contrastive, text_aug, ae_path);
    if (*sy) return synthesize_cmd(com, healthy, mask, text, seed, ae_path, den_path);
    if (*au) return augment_cmd(com, pred, truth, volume, healthy_pool, source_id, organ, ae_path, den_path);
    if (*rc) return radiomics_cmd(com, sets, phantom_sets);
    if (*ts) return turing_cmd(com, cases_path, pools, log_path, port, assemble_only);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
