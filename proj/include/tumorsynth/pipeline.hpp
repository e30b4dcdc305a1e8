#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tumorsynth/autoencoder.hpp"
#include "tumorsynth/contrastive.hpp"
#include "tumorsynth/diffusion.hpp"
#include "tumorsynth/phantom.hpp"
#include "tumorsynth/text.hpp"

namespace tumorsynth {

/// Profiles used when a phantom set does not list its own.
std::vector<std::vector<std::string>> default_training_profiles();

struct PhantomSetOptions {
  int count = 96;
  std::vector<Organ> organs{Organ::liver, Organ::pancreas, Organ::kidney};
  std::vector<std::vector<std::string>> profiles;  // empty selects default_training_profiles()
  Shape3 shape{kDefaultPatchEdge, kDefaultPatchEdge, kDefaultPatchEdge};
  double min_radius_mm = 4.0;
  double max_radius_mm = 7.0;
  std::uint64_t seed = 0;
};

/// Random placement and radii for one profile; retries until the spec validates.
PhantomSpec random_phantom_spec(Organ organ, const std::vector<std::string>& profile, const PhantomSetOptions& opt,
                                Rng& rng);
/// Profiles and organs cycle; geometry is random per spec.
std::vector<PhantomSpec> sample_phantom_specs(const PhantomSetOptions& opt);
std::vector<Phantom> make_phantoms(const std::vector<PhantomSpec>& specs);

/// Descriptor extraction plus variant generation, cached on the cleaned report.
class TextPipeline {
 public:
  TextPipeline(LMClient& client, int variants = kDefaultVariantCount, double threshold = kDefaultSimilarityThreshold)
      : client_(&client), variants_(variants), threshold_(threshold) {}

  std::pair<DescriptorSet, ReportVariantSet> process(const RadiologyReport& report);
  int variants() const { return variants_; }

 private:
  LMClient* client_;
  int variants_;
  double threshold_;
  std::map<std::string, ReportVariantSet> cache_;
};

LatentSample make_latent_sample(const Autoencoder& ae, const LatentStats& stats, const Volume& x_normalized,
                                const TumorMask& m, DescriptorSet d, ReportVariantSet v);

/// Phantom volumes are preprocessed to [0,1]; reports are the phantoms' reference texts.
std::vector<LatentSample> build_latent_dataset(const Autoencoder& ae, const LatentStats& stats,
                                               const std::vector<Phantom>& phantoms, const std::vector<PhantomSpec>& specs,
                                               TextPipeline& text);

std::vector<Volume> normalized_volumes(const std::vector<Phantom>& phantoms);

/// In-mask mean of a volume.
double masked_mean(const Volume& v, const TumorMask& m);

}  // namespace tumorsynth
