#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "tumorsynth/vocabulary.hpp"
#include "tumorsynth/volume.hpp"

namespace tumorsynth {

inline constexpr int kGrayLevels = 32;

struct FeatureSpec {
  std::string name;
  std::string category;  // first_order | glcm
  std::string formula;
};

/// Ordered feature list. Unknown formula ids are rejected when loading.
class FeatureRegistry {
 public:
  static FeatureRegistry from_json(const nlohmann::json& j);
  const std::vector<FeatureSpec>& features() const { return features_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return features_.size(); }

 private:
  std::vector<FeatureSpec> features_;
};

/// The 26-feature registry shipped in data/radiomics_features.json.
const FeatureRegistry& default_feature_registry();

struct RadiomicsVector {
  std::vector<double> features;
  std::vector<std::string> feature_names;
  std::string source_id;
  bool degenerate = false;  // no co-occurring voxel pairs; GLCM features are 0

  void validate(const FeatureRegistry& reg = default_feature_registry()) const;
};

/// Gray level 1..32 over [0,1]; values outside are clamped.
int gray_level(double x);

/// 13 unique offsets (dz, dy, dx) at Chebyshev distance 1, first nonzero component positive.
const std::array<std::array<int, 3>, 13>& glcm_offsets();

/// Symmetric co-occurrence counts for one offset, row-major [32 x 32]. Pairs need both voxels in the mask.
std::vector<double> glcm_counts(const Volume& v, const TumorMask& m, const std::array<int, 3>& offset);

struct GlcmFeatures {
  double contrast = 0, correlation = 0, dissimilarity = 0, homogeneity = 0;
  double asm_ = 0, entropy = 0, cluster_shade = 0, cluster_prominence = 0;
};

/// Features of a normalized co-occurrence matrix (counts are normalized here). All zero counts -> all zero.
GlcmFeatures glcm_features(const std::vector<double>& counts);

/// Requires a nonempty mask and a normalized volume.
RadiomicsVector extract_features(const Volume& v, const TumorMask& m, const std::string& source_id = "",
                                 const FeatureRegistry& reg = default_feature_registry());

struct CosineResult {
  std::vector<double> scores;        // pairs (0,1), (0,2), ..., (1,2), ...
  std::vector<std::string> dropped;  // zero-variance features removed by standardization
};

/// Per-feature z-scoring with population SD; zero-variance features dropped.
struct FeatureScaler {
  std::vector<double> mean, sd;
  std::vector<bool> keep;
  std::vector<std::string> dropped;

  std::vector<std::vector<double>> apply(const std::vector<RadiomicsVector>& vs) const;
  std::size_t kept() const;
};
FeatureScaler fit_scaler(const std::vector<RadiomicsVector>& vs);

std::vector<double> cosine_pairs(const std::vector<std::vector<double>>& rows);
CosineResult pairwise_cosine(const std::vector<RadiomicsVector>& vs, bool standardize);

enum class DiversityMode { similarity_stats, feature_variance };
std::string_view to_string(DiversityMode m);
DiversityMode diversity_mode_from_string(std::string_view s);

struct DiversityReport {
  std::string method_name;
  std::string organ;
  std::size_t n_samples = 0;
  double mv = 0;
  double sd = 0;
  DiversityMode mode = DiversityMode::similarity_stats;
  std::vector<std::string> dropped;
};
nlohmann::json to_json(const DiversityReport& r);

/// scaler == nullptr standardizes within the set.
DiversityReport diversity_stats(const std::vector<RadiomicsVector>& vs, DiversityMode mode,
                                const FeatureScaler* scaler = nullptr);

struct RadiomicsSample {
  Volume volume;
  TumorMask mask;
  Organ organ = Organ::liver;
};

/// One report per method per organ. Within an organ, features are standardized with statistics pooled
/// over every method so that the methods are measured on one scale.
std::vector<DiversityReport> compare_methods(const std::map<std::string, std::vector<RadiomicsSample>>& sets,
                                             DiversityMode mode);

/// <stem>.csv (method rows, organ columns, "MV±SD" cells) and <stem>.json.
void write_diversity_table(const std::filesystem::path& stem, const std::vector<DiversityReport>& reports);

}  // namespace tumorsynth
