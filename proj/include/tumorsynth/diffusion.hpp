#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tumorsynth/autoencoder.hpp"
#include "tumorsynth/nn/graph.hpp"
#include "tumorsynth/text.hpp"
#include "tumorsynth/volume.hpp"

namespace tumorsynth {

inline constexpr int kDefaultTimesteps = 200;
// Linear beta endpoints for T=200 (the common 1e-4..0.02 pair scaled by 1000/T).
inline constexpr double kDefaultBetaStart = 5e-4;
inline constexpr double kDefaultBetaEnd = 0.1;

/// Tables are indexed by step t = 1..T at position t-1; alpha_bar(0) is 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
  double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)]; }
  std::uint64_t hash() const;
};

NoiseSchedule build_schedule(int T = kDefaultTimesteps, double beta_start = kDefaultBetaStart,
                             double beta_end = kDefaultBetaEnd);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
nn::Tensor forward_noise(const nn::Tensor& z0, int t, const nn::Tensor& eps, const NoiseSchedule& s);
/// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
nn::Tensor estimate_z0(const nn::Tensor& z_t, const nn::Tensor& eps_hat, int t, const NoiseSchedule& s);

/// Ancestral step z_t -> z_{t-1}: (z_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t xi,
/// sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t). `rng` null selects the deterministic mode (sigma = 0).
nn::Tensor posterior_step(const nn::Tensor& z_t, const nn::Tensor& eps_hat, int t, const NoiseSchedule& s, Rng* rng);
double posterior_sigma(int t, const NoiseSchedule& s);

nn::Tensor standard_normal(const std::vector<int>& shape, Rng& rng);

// ---------------------------------------------------------------------------
// Conditioning

struct ConditionBundle {
  nn::Tensor z_healthy;    // [C, d, h, w]
  nn::Tensor text;         // [text_dim]
  nn::Tensor mask_latent;  // [1, d, h, w], values in {0,1}
  int t = 1;
};

/// Nearest-neighbour downsample of a voxel mask: latent site i samples voxel f*i + f/2.
nn::Tensor downsample_mask(const TumorMask& m, int f);

/// 1 where any voxel of the f^3 cell is in the mask, else 0. Shape [1, d/f, h/f, w/f].
nn::Tensor tumor_cells(const TumorMask& m, int f);

struct LatentStats {
  std::vector<double> mean;
  std::vector<double> sd;

  nn::Tensor standardize(const nn::Tensor& z) const;
  nn::Tensor unstandardize(const nn::Tensor& z) const;
};

nlohmann::json to_json(const LatentStats& s);
LatentStats latent_stats_from_json(const nlohmann::json& j);

/// Per-channel mean/SD of encoder outputs over a dataset.
LatentStats compute_latent_stats(const Autoencoder& ae, const std::vector<Volume>& xs);

// ---------------------------------------------------------------------------
// Denoiser: time-conditional 3D U-Net with cross-attention to text tokens.

struct DenoiserConfig {
  int latent_channels = 4;
  std::vector<int> widths{16, 32};  // channels at full latent resolution and at 1/2; bottleneck at 1/4 uses widths[1]
  int time_dim = 32;
  int text_dim = kDefaultEmbeddingDim;
  int context_tokens = 4;
  int attn_dim = 32;
  // the schedule the network is trained for; the output adds sqrt(1 - alpha_bar_t) * z_t, the best linear
  // noise guess for unit-variance latents, so the convolutions only learn the residual
  int timesteps = kDefaultTimesteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  bool input_skip = true;
  std::uint64_t seed = 0;

  void validate() const;
  NoiseSchedule schedule() const;
  std::uint64_t architecture_hash() const;
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

struct DenoiserOutput {
  nn::Var eps;
  nn::Var bottleneck;                      // [C_b, d/4, h/4, w/4]
  nn::Var bottleneck_text;                 // the bottleneck cross-attention increment, same shape
  std::vector<double> bottleneck_weights;  // mask_latent average-pooled to bottleneck sites
};

/// Sinusoidal embedding of a timestep.
nn::Tensor timestep_embedding(int t, int dim);

class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg);

  const DenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  /// ContractError unless `s` is the schedule this denoiser was built for.
  void require_schedule(const NoiseSchedule& s) const;
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }

  DenoiserOutput forward(nn::Graph& g, nn::Var z_t, const ConditionBundle& cond);
  nn::Tensor predict_noise(const nn::Tensor& z_t, const ConditionBundle& cond) const;

  /// Zero every cross-attention output projection (the text pathway).
  void zero_cross_attention();

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
  /// Returns the denoiser and the `extra` block stored with it.
  static std::pair<Denoiser, nlohmann::json> load(const std::filesystem::path& path);

 private:
  DenoiserConfig cfg_;
  NoiseSchedule schedule_;
  nn::ParameterStore params_;
  bool trained_ = false;

  nn::Var p(nn::Graph& g, const std::string& name) { return g.param(params_.get(name)); }
  nn::Var res_block(nn::Graph& g, nn::Var h, nn::Var temb, const std::string& name);
  nn::Var cross_attention(nn::Graph& g, nn::Var h, nn::Var context, const std::string& name,
                          const std::vector<double>* mask_sites, nn::Var* increment = nullptr);
};

/// A noise predictor usable by the loss: the denoiser, or an analytic oracle in tests.
using NoisePredictor = std::function<nn::Var(nn::Graph&, nn::Var z_t, const ConditionBundle&)>;
NoisePredictor denoiser_predictor(Denoiser& d);

// ---------------------------------------------------------------------------
// Training data and loss

struct LatentSample {
  nn::Tensor z0;           // standardized encoder output of the tumor patch
  nn::Tensor z_healthy;    // standardized E((1-m) x)
  nn::Tensor mask_latent;  // [1, d, h, w]
  nn::Tensor tumor_cells;  // [1, d, h, w], empty when unknown
  DescriptorSet descriptors;
  ReportVariantSet variants;
};

/// One Monte-Carlo draw of the loss expectation for a sample.
struct LdmDraw {
  int t = 1;
  nn::Tensor eps;
  std::string text;
};

/// t ~ U{1..T}, eps ~ N(0, I), one report variant (or the cleaned text when text_aug is off).
LdmDraw draw_ldm(const LatentSample& s, const NoiseSchedule& sched, Rng& rng, bool text_aug);

ConditionBundle make_condition(const LatentSample& s, const std::string& text, int t);

/// mean((eps - eps_hat)^2). With tumor_weight > 0 each site is weighted 1 + tumor_weight * tumor_cells,
/// renormalized to mean weight 1, so the few tumor sites are not drowned out by the background.
nn::Var noise_error(nn::Var eps_hat, const nn::Tensor& eps, const LatentSample& s, double tumor_weight);

/// Mean over the batch of noise_error.
nn::Var ldm_loss(nn::Graph& g, const NoisePredictor& predict, const std::vector<const LatentSample*>& batch,
                 const std::vector<LdmDraw>& draws, const NoiseSchedule& sched, double tumor_weight = 0.0);

// ---------------------------------------------------------------------------
// Sampling and synthesis

struct SamplingOptions {
  bool deterministic = false;
};

/// Reverse loop from z_T = noise down to z_0.
nn::Tensor sample_latent(const std::function<nn::Tensor(const nn::Tensor&, int)>& predict, const nn::Tensor& z_T,
                         const NoiseSchedule& sched, Rng& rng, const SamplingOptions& opt = {});

struct SynthesisModel {
  const Autoencoder* ae = nullptr;
  const Denoiser* denoiser = nullptr;
  LatentStats stats;
  NoiseSchedule schedule;
};

/// Generates a tumor inside `m` conditioned on `report_text` and composites it into the
/// healthy patch: voxels outside the mask are copied from the input unchanged. The input
/// may be in HU or normalized; the output uses the same domain.
Volume synthesize_tumor(const Volume& x_healthy, const TumorMask& m, const std::string& report_text,
                        const SynthesisModel& model, Rng& rng, const SamplingOptions& opt = {});

/// Provenance record written next to synthesized volumes.
nlohmann::json synthesis_provenance(std::uint64_t seed, const std::string& text, const TumorMask& m,
                                    const NoiseSchedule& s, const SamplingOptions& opt);

}  // namespace tumorsynth
