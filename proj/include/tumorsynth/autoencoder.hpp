#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

#include "tumorsynth/nn/graph.hpp"
#include "tumorsynth/volume.hpp"

namespace tumorsynth {

struct AEConfig {
  int f = 4;                       // spatial downsample factor, power of two
  int channels = 4;                // latent channels C
  int codebook_size = 256;         // K
  std::vector<int> widths{16, 32}; // one per downsampling level
  int res_blocks = 2;
  double beta = 0.25;              // commitment weight
  std::uint64_t seed = 0;

  int levels() const;
  /// Throws ValidationError on inconsistent values.
  void validate() const;
};

nlohmann::json to_json(const AEConfig& c);
AEConfig ae_config_from_json(const nlohmann::json& j);

/// (C, D/f, H/f, W/f) latent grid.
struct LatentTensor {
  nn::Tensor data;
  int f = 1;
  Shape3 source_shape;

  int channels() const { return data.dim(0); }
  Shape3 spatial() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
  std::size_t sites() const { return spatial().voxels(); }
};

struct QuantizeResult {
  LatentTensor z_q;
  std::vector<int> indices;  // one per site, row-major
  double codebook_loss = 0.0;
  double commitment_loss = 0.0;
};

/// Nearest-entry assignment of each site of z (C-vectors) to the rows of a [K, C] codebook.
QuantizeResult quantize(const LatentTensor& z, const nn::Tensor& codebook);

/// Quantities held fixed by the stop-gradient operator, captured at one weight setting.
/// Evaluating the loss with these frozen gives a surrogate whose plain derivative is the
/// straight-through gradient, so it can be checked by finite differences.
struct FrozenQuantization {
  std::vector<int> indices;
  nn::Tensor z;   // encoder output
  nn::Tensor e;   // selected codebook rows
};

struct AELossTerms {
  nn::Var total;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
};

class Autoencoder {
 public:
  explicit Autoencoder(AEConfig cfg);

  const AEConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const nn::Tensor& codebook() const { return params_.get("codebook").value; }

  LatentTensor encode(const Volume& x) const;
  QuantizeResult quantize(const LatentTensor& z) const { return tumorsynth::quantize(z, codebook()); }
  Volume decode(const LatentTensor& z_q) const;
  /// decode(quantize(encode(x)).z_q)
  Volume reconstruct(const Volume& x) const;

  nn::Var encode_graph(nn::Graph& g, nn::Var x);
  nn::Var decode_graph(nn::Graph& g, nn::Var z);

  /// reconstruction MSE + codebook + beta * commitment.
  AELossTerms loss(nn::Graph& g, const Volume& x, const FrozenQuantization* frozen = nullptr);
  FrozenQuantization freeze(const Volume& x) const;

  /// Codebook rows drawn from encoder outputs on `samples`, plus small jitter.
  void init_codebook(const std::vector<Volume>& samples, Rng& rng);
  bool codebook_initialized() const { return codebook_initialized_; }

  void save(const std::filesystem::path& path) const;
  static Autoencoder load(const std::filesystem::path& path);

 private:
  AEConfig cfg_;
  nn::ParameterStore params_;
  bool codebook_initialized_ = false;

  nn::Var p(nn::Graph& g, const std::string& name) { return g.param(params_.get(name)); }
  void check_input(const Volume& x) const;
};

nn::Tensor volume_to_tensor(const Volume& v);
Volume tensor_to_volume(const nn::Tensor& t, Spacing3 spacing, bool normalized);

struct AETrainOptions {
  long steps = 1000;
  double lr = 1e-4;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int log_every = 0;  // 0 = silent
};

struct AEMetrics {
  std::vector<double> loss;
  std::vector<double> reconstruction;
};

/// Throws NumericError when the loss becomes non-finite.
AEMetrics train_autoencoder(Autoencoder& ae, const std::vector<Volume>& dataset, const AETrainOptions& opt);

/// Mean reconstruction MSE over a set of normalized volumes.
double reconstruction_mse(const Autoencoder& ae, const std::vector<Volume>& xs);

}  // namespace tumorsynth
