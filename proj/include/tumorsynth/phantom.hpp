#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tumorsynth/volume.hpp"
#include "tumorsynth/vocabulary.hpp"

namespace tumorsynth {

// Appearance thresholds in normalized intensity units. make_phantom renders
// descriptors so that they hold; describe_failure reads them back.
inline constexpr double kAttenuationDelta = 0.15;    // |tumor mean - background mean|
inline constexpr double kCysticMaxSd = 0.02;          // uniform fluid content
inline constexpr double kHeterogeneousMinSd = 0.08;   // mixed content
inline constexpr double kIllDefinedMinWidth = 3.0;    // 10-90% boundary transition, voxels
inline constexpr double kSharpMaxWidth = 1.5;

struct PhantomSpec {
  Organ organ = Organ::liver;
  std::vector<std::string> descriptor_profile;
  Index3 tumor_center{16, 16, 16};
  std::array<double, 3> tumor_radii_mm{5.0, 5.0, 5.0};  // (d, h, w)
  std::uint64_t seed = 0;
  Shape3 shape{kDefaultPatchEdge, kDefaultPatchEdge, kDefaultPatchEdge};
  Spacing3 spacing{};
};

struct Phantom {
  Volume volume;   // HU, with tumor
  Volume healthy;  // HU, same texture without tumor
  TumorMask mask;
  TumorMask organ;
  std::string reference_text;
};

/// Aggregate effect of a descriptor profile.
struct Appearance {
  bool hypo = false;
  bool hyper = false;
  bool cystic = false;
  bool heterogeneous = false;
  bool ill_defined = false;
  bool well_defined = false;
};

/// Throws ValidationError for unknown terms or contradictory combinations.
Appearance resolve_appearance(const std::vector<std::string>& profile, Organ organ,
                              const Vocabulary& vocab = default_vocabulary());

/// Throws ValidationError when the spec is invalid (terms, radii, placement).
void validate_phantom_spec(const PhantomSpec& spec, const Vocabulary& vocab = default_vocabulary());

/// Deterministic procedural CT phantom with one ellipsoidal tumor.
Phantom make_phantom(const PhantomSpec& spec, const Vocabulary& vocab = default_vocabulary());

/// Smooth band-limited noise in roughly [-1, 1]: value noise, `octaves` octaves.
std::vector<float> value_noise(Shape3 shape, double base_cell, int octaves, double persistence, std::uint64_t seed);

struct RegionStats {
  double tumor_mean = 0.0;
  double tumor_sd = 0.0;
  double background_mean = 0.0;
  double boundary_width = 0.0;  // voxels; 0 when contrast is too low to measure
  std::size_t tumor_voxels = 0;
  std::size_t background_voxels = 0;
};

/// Statistics of a normalized volume inside `mask` and in a shell around it.
/// `background` restricts the shell voxels when given (e.g. an organ mask).
RegionStats measure_region(const Volume& normalized, const TumorMask& mask, const TumorMask* background = nullptr);

/// Descriptor terms implied by measured statistics (same thresholds as rendering).
std::vector<std::string> appearance_terms(const RegionStats& s);

}  // namespace tumorsynth
