#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "tumorsynth/config.hpp"

namespace tumorsynth {

struct PhantomData {
  std::vector<PhantomSpec> train_specs;
  std::vector<Phantom> train;
  std::vector<PhantomSpec> heldout_specs;
  std::vector<Phantom> heldout;
};

PhantomData make_phantom_data(const RunConfig& c);

/// Trains from scratch on the training phantoms.
Autoencoder train_ae_stage(const RunConfig& c, const PhantomData& data, AEMetrics* metrics = nullptr);

struct DiffusionStage {
  std::unique_ptr<Denoiser> denoiser;
  LatentStats stats;
  NoiseSchedule schedule;
  std::vector<LatentSample> train;
  std::vector<LatentSample> heldout;
  DiffusionMetrics metrics;
};

/// Latent stats, schedule and latent datasets (mock text pipeline); no denoiser yet.
DiffusionStage prepare_diffusion_stage(const RunConfig& c, const Autoencoder& ae, const PhantomData& data);
/// prepare_diffusion_stage, then a fresh denoiser trained on the training latents.
DiffusionStage train_diffusion_stage(const RunConfig& c, const Autoencoder& ae, const PhantomData& data);
/// Attaches a saved denoiser; its checkpoint extras must match this stage's stats and schedule.
void attach_denoiser(DiffusionStage& s, const std::filesystem::path& checkpoint);

/// Intra/inter feature distances over c.feature_triplets held-out triplets (seed+8).
FeatureDistances heldout_feature_distances(const RunConfig& c, DiffusionStage& s);

/// Denoiser checkpoint extras: latent stats and the schedule hash.
nlohmann::json diffusion_extra(const DiffusionStage& s);

struct ControllabilityPair {
  double hypo = 0;
  double hyper = 0;
};
struct ControllabilityResult {
  int wins = 0;  // pairs with hypo in-mask mean below hyper
  std::vector<ControllabilityPair> pairs;
};

/// Paired seeds: pair i synthesizes held-out phantom i's healthy patch twice with the same seed, once per term.
ControllabilityResult controllability(const SynthesisModel& m, const PhantomData& data, int pairs,
                                      std::uint64_t seed);

/// Run record. No timestamps, so identical config and seed give identical manifests.
struct Manifest {
  std::string subcommand;
  RunConfig config;
  nlohmann::json artifacts = nlohmann::json::array();  // {path, fnv1a}
  nlohmann::json metrics = nlohmann::json::object();

  void add_artifact(const std::filesystem::path& root, const std::filesystem::path& file);
  nlohmann::json to_json() const;
  /// Writes <dir>/<subcommand>.manifest.json; a plain manifest.json in the same dir describes a sample set.
  void write(const std::filesystem::path& dir) const;
};

std::string file_hash(const std::filesystem::path& file);

/// Creates <dir>/.incomplete; commit() removes it. Left behind when a run fails part way.
class IncompleteMarker {
 public:
  explicit IncompleteMarker(std::filesystem::path dir);
  void commit();

 private:
  std::filesystem::path marker_;
};

std::string version_string();

}  // namespace tumorsynth
