#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tumorsynth/diffusion.hpp"

namespace tumorsynth {

inline constexpr double kDefaultLambdaC = 0.1;
inline constexpr double kDefaultMargin = 1.0;

/// Set equality of descriptor terms (order and duplicates ignored).
bool same_terms(const DescriptorSet& a, const DescriptorSet& b);

struct TripletMember {
  const LatentSample* sample = nullptr;
  std::string text;
};

/// anchor (R0, x0, m0); positive (R0' with the same terms, x2, m2); negative (R1, x0, m0).
struct Triplet {
  TripletMember anchor;
  TripletMember positive;
  TripletMember negative;
};

/// Throws ContractError when the pool has no valid positive or negative for any anchor.
Triplet make_triplet(const std::vector<LatentSample>& pool, Rng& rng, bool text_aug);
/// Checks the triplet invariants; throws ContractError on violation.
void check_triplet(const Triplet& t);

nlohmann::json to_json(const Triplet& t);

struct TumorFeature {
  std::vector<double> vector;
  std::string source;  // "anchor", "positive", "negative" or free-form
};

/// Masked average pool over sites with nonzero weight, then L2 normalization.
nn::Var extract_tumor_feature(nn::Var activations, const std::vector<double>& site_weights);
TumorFeature extract_tumor_feature(const nn::Tensor& activations, const std::vector<double>& site_weights,
                                   std::string source = {});

struct ContrastiveLosses {
  double same = 0.0;
  double different = 0.0;
  double contrastive = 0.0;
};

ContrastiveLosses contrastive_losses(const TumorFeature& fa, const TumorFeature& fp, const TumorFeature& fn,
                                     double margin = kDefaultMargin);

struct ContrastiveVars {
  nn::Var same;
  nn::Var different;
  nn::Var contrastive;
};

ContrastiveVars contrastive_losses(nn::Var fa, nn::Var fp, nn::Var fn, double margin = kDefaultMargin);

/// Noise prediction plus the tumor feature of one generation branch.
struct BranchOutput {
  nn::Var eps;
  nn::Var feature;
};
using BranchModel = std::function<BranchOutput(nn::Graph&, nn::Var z_t, const ConditionBundle&)>;
/// Feature = tumor-site pool of the bottleneck cross-attention increment. The full bottleneck activation is
/// dominated by the image, and the negative shares the anchor's image, so it barely sees the text.
BranchModel denoiser_branch(Denoiser& d);

/// One shared timestep and noise draw for all three branches of a triplet.
struct TripletDraw {
  int t = 1;
  nn::Tensor eps;
};

TripletDraw draw_triplet(const Triplet& tr, const NoiseSchedule& sched, Rng& rng);

struct TotalLossTerms {
  nn::Var total;
  double ldm = 0.0;
  double same = 0.0;
  double different = 0.0;
};

/// L_ldm (anchor and positive branches) + lambda_c * (L_same - L_different), averaged over the batch.
TotalLossTerms total_loss(nn::Graph& g, const BranchModel& model, const std::vector<Triplet>& batch,
                          const std::vector<TripletDraw>& draws, const NoiseSchedule& sched, double lambda_c,
                          double margin = kDefaultMargin, double tumor_weight = 0.0);

// ---------------------------------------------------------------------------

struct DiffusionTrainOptions {
  long steps = 3000;
  double lr = 3e-4;
  double grad_clip = 1.0;
  int batch = 2;
  double lambda_c = kDefaultLambdaC;  // 0 disables the contrastive branches
  double margin = kDefaultMargin;
  bool text_aug = true;               // sample report variants; off uses the cleaned report only
  double tumor_weight = 0.0;          // see noise_error
  std::uint64_t seed = 0;
  int log_every = 0;
};

struct DiffusionMetrics {
  std::vector<double> loss;
  std::vector<double> ldm;
  std::vector<double> contrastive;
};

/// Single-writer training loop. Marks the denoiser trained.
DiffusionMetrics train_diffusion(Denoiser& d, const std::vector<LatentSample>& data, const NoiseSchedule& sched,
                                 const DiffusionTrainOptions& opt);

struct FeatureDistances {
  double intra = 0.0;  // mean ||fa - fp||^2
  double inter = 0.0;  // mean ||fa - fn||^2
  int triplets = 0;
};

/// Feature distances over `n` triplets drawn from `pool`. One-step features at timestep `t`
/// (0 selects T/2) unless `full_generation`, which runs the reverse loop first.
FeatureDistances evaluate_feature_distances(Denoiser& d, const std::vector<LatentSample>& pool,
                                            const NoiseSchedule& sched, int n, std::uint64_t seed, int t = 0,
                                            bool full_generation = false);

}  // namespace tumorsynth
