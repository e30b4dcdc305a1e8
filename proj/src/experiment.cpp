#include "tumorsynth/experiment.hpp"

#include <fstream>
#include <iterator>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"

namespace tumorsynth {

using nlohmann::json;
namespace fs = std::filesystem;

PhantomData make_phantom_data(const RunConfig& c) {
  PhantomData d;
  d.train_specs = sample_phantom_specs(c.phantoms);
  d.train = make_phantoms(d.train_specs);
  d.heldout_specs = sample_phantom_specs(c.heldout_phantoms());
  d.heldout = make_phantoms(d.heldout_specs);
  return d;
}

Autoencoder train_ae_stage(const RunConfig& c, const PhantomData& data, AEMetrics* metrics) {
  Autoencoder ae(c.ae);
  auto m = train_autoencoder(ae, normalized_volumes(data.train), c.ae_train);
  if (metrics) *metrics = std::move(m);
  return ae;
}

DiffusionStage prepare_diffusion_stage(const RunConfig& c, const Autoencoder& ae, const PhantomData& data) {
  DiffusionStage s;
  s.stats = compute_latent_stats(ae, normalized_volumes(data.train));
  s.schedule = c.denoiser.schedule();
  MockLMClient lm;
  TextPipeline text(lm, c.text_variants, c.similarity_threshold);
  s.train = build_latent_dataset(ae, s.stats, data.train, data.train_specs, text);
  s.heldout = build_latent_dataset(ae, s.stats, data.heldout, data.heldout_specs, text);
  return s;
}

DiffusionStage train_diffusion_stage(const RunConfig& c, const Autoencoder& ae, const PhantomData& data) {
  auto s = prepare_diffusion_stage(c, ae, data);
  s.denoiser = std::make_unique<Denoiser>(c.denoiser);
  s.metrics = train_diffusion(*s.denoiser, s.train, s.schedule, c.diffusion);
  return s;
}

json diffusion_extra(const DiffusionStage& s) {
  return {{"latent_stats", to_json(s.stats)}, {"schedule_hash", hex64(s.schedule.hash())}};
}

void attach_denoiser(DiffusionStage& s, const fs::path& checkpoint) {
  auto [den, extra] = Denoiser::load(checkpoint);
  if (extra.at("schedule_hash") != hex64(s.schedule.hash()) || extra.at("latent_stats") != to_json(s.stats)) {
    throw ContractError(checkpoint.string() + " was trained on different latents or a different schedule");
  }
  s.denoiser = std::make_unique<Denoiser>(std::move(den));
}

FeatureDistances heldout_feature_distances(const RunConfig& c, DiffusionStage& s) {
  return evaluate_feature_distances(*s.denoiser, s.heldout, s.schedule, c.feature_triplets, c.stage_seed(8));
}

ControllabilityResult controllability(const SynthesisModel& m, const PhantomData& data, int pairs,
                                      std::uint64_t seed) {
  if (pairs < 1 || static_cast<std::size_t>(pairs) > data.heldout.size()) {
    throw ContractError("controllability needs 1.." + std::to_string(data.heldout.size()) + " pairs");
  }
  ControllabilityResult r;
  for (int i = 0; i < pairs; ++i) {
    const auto& p = data.heldout[static_cast<std::size_t>(i)];
    const Organ organ = data.heldout_specs[static_cast<std::size_t>(i)].organ;
    Rng r1(seed + static_cast<std::uint64_t>(i)), r2(seed + static_cast<std::uint64_t>(i));
    const auto a = synthesize_tumor(p.healthy, p.mask, render_description({"hypodense"}, organ), m, r1);
    const auto b = synthesize_tumor(p.healthy, p.mask, render_description({"hyperenhancing"}, organ), m, r2);
    ControllabilityPair pr{masked_mean(a, p.mask), masked_mean(b, p.mask)};
    r.wins += pr.hypo < pr.hyper;
    r.pairs.push_back(pr);
  }
  return r;
}

std::string file_hash(const fs::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw NotFoundError("cannot read " + file.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

void Manifest::add_artifact(const fs::path& root, const fs::path& file) {
  artifacts.push_back({{"path", fs::relative(file, root).generic_string()}, {"fnv1a", file_hash(file)}});
}

json Manifest::to_json() const {
  return {{"tool", "tumorsynth"},
          {"subcommand", subcommand},
          {"version", version_string()},
          {"config_hash", config_hash(config)},
          {"seed", config.seed},
          {"config", tumorsynth::to_json(config)},
          {"artifacts", artifacts},
          {"metrics", metrics}};
}

void Manifest::write(const fs::path& dir) const {
  const std::string name = subcommand + ".manifest.json";
  fs::create_directories(dir);
  std::ofstream f(dir / name);
  f << to_json().dump(2) << "\n";
  if (!f) throw Error("could not write " + (dir / name).string());
}

IncompleteMarker::IncompleteMarker(fs::path dir) : marker_(dir / ".incomplete") {
  fs::create_directories(dir);
  std::ofstream(marker_) << "run did not finish\n";
}

void IncompleteMarker::commit() { fs::remove(marker_); }

std::string version_string() { return TUMORSYNTH_VERSION; }

}  // namespace tumorsynth
