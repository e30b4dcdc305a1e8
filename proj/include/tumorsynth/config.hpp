#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "tumorsynth/autoencoder.hpp"
#include "tumorsynth/contrastive.hpp"
#include "tumorsynth/diffusion.hpp"
#include "tumorsynth/pipeline.hpp"
#include "tumorsynth/radiomics.hpp"
#include "tumorsynth/targeted_aug.hpp"

namespace tumorsynth {

/// Everything a run needs, one file. Stage seeds derive from `seed`:
/// phantoms seed, held-out phantoms seed+1, autoencoder training seed+2, diffusion training seed+3,
/// augmentation seed+4, radiomics sets seed+5, Turing assembly and sessions seed+6, controllability pairs seed+7,
/// held-out feature-distance triplets seed+8.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";

  PhantomSetOptions phantoms;  // .seed is derived
  int heldout_count = 24;

  AEConfig ae;
  AETrainOptions ae_train;  // .seed is derived

  DenoiserConfig denoiser;
  DiffusionTrainOptions diffusion;  // .seed derived; lambda_c and margin come from the contrastive section

  int text_variants = kDefaultVariantCount;
  double similarity_threshold = kDefaultSimilarityThreshold;

  int feature_triplets = 50;  // held-out triplets for the intra/inter distance check
  int controllability_pairs = 20;

  MiningOptions mining;
  AugmentOptions augment;  // .seed is derived

  int radiomics_samples = 40;
  DiversityMode radiomics_mode = DiversityMode::similarity_stats;

  int turing_per_cell = 20;
  std::string turing_host = "127.0.0.1";
  int turing_port = 8080;
  std::array<std::string, 2> method_names{"method_A", "method_B"};

  std::uint64_t stage_seed(int stage) const { return seed + static_cast<std::uint64_t>(stage); }
  PhantomSetOptions heldout_phantoms() const;
};

/// The effective configuration as a structured record; every field is present.
nlohmann::json to_json(const RunConfig& c);

/// Strict: keys missing from the defaults tree and type mismatches raise ValidationError naming the path;
/// module contracts are checked before returning.
RunConfig run_config_from_json(const nlohmann::json& j);

/// FormatError for unreadable JSON, ValidationError for contract violations.
RunConfig load_run_config(const std::filesystem::path& path);

/// Hex hash of the canonical effective config, output_dir excluded.
std::string config_hash(const RunConfig& c);

}  // namespace tumorsynth
