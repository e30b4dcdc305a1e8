#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "tumorsynth/diffusion.hpp"
#include "tumorsynth/text.hpp"
#include "tumorsynth/volume.hpp"

namespace tumorsynth {

inline constexpr int kDefaultMinFailureVoxels = 8;
inline constexpr double kDefaultMagnification = 1.5;

enum class FailureKind { false_positive, false_negative };
std::string_view to_string(FailureKind k);

struct FailureCase {
  FailureKind kind = FailureKind::false_positive;
  Volume sub_volume;
  TumorMask mask;         // the component, in sub_volume coordinates
  std::string source_id;  // "<source>/<fp|fn><n>"
  Organ organ = Organ::liver;
  std::size_t voxels = 0;
};

/// 26-connected components of a binary mask, largest first (ties by first voxel in scan order).
std::vector<TumorMask> connected_components(const TumorMask& m);

struct MiningOptions {
  int min_voxels = kDefaultMinFailureVoxels;
  Shape3 patch{kDefaultPatchEdge, kDefaultPatchEdge, kDefaultPatchEdge};  // clipped to the volume
  bool false_positives = true;
  bool false_negatives = true;
  std::string source_id = "case";
  Organ organ = Organ::liver;
};

/// FP: components of pred \ truth; FN: components of truth \ pred; each at least min_voxels and
/// cropped around the component.
std::vector<FailureCase> mine_failures(const TumorMask& pred, const TumorMask& truth, const Volume& volume,
                                       const MiningOptions& opt = {});

/// Terms measured from the region (thresholds shared with phantom rendering), rendered by the client.
std::string describe_failure(const FailureCase& fc, LMClient& client, const Vocabulary& vocab = default_vocabulary());

struct AugmentedSample {
  Volume volume;
  TumorMask mask;
  std::string report;
  std::string case_id;
  std::uint64_t seed = 0;
  std::size_t healthy_index = 0;
};

struct AugmentOptions {
  int per_case = 1;
  double magnification = kDefaultMagnification;
  std::uint64_t seed = 0;
};

/// Throws ContractError on an empty healthy pool (when there is work to do).
std::vector<AugmentedSample> augment(const std::vector<FailureCase>& cases, const std::vector<Volume>& healthy_pool,
                                     const SynthesisModel& model, LMClient& client, const AugmentOptions& opt);

/// volumes/, masks/ and manifest.json under `dir`; returns the manifest.
nlohmann::json write_augmented_set(const std::filesystem::path& dir, const std::vector<AugmentedSample>& samples);

}  // namespace tumorsynth
