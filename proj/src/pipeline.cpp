#include "tumorsynth/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "tumorsynth/errors.hpp"

namespace tumorsynth {

std::vector<std::vector<std::string>> default_training_profiles() {
  return {{"hypodense"},
          {"hyperenhancing"},
          {"cystic"},
          {"heterogeneous"},
          {"hypodense", "ill-defined"},
          {"hyperenhancing", "ill-defined"}};
}

PhantomSpec random_phantom_spec(Organ organ, const std::vector<std::string>& profile, const PhantomSetOptions& opt,
                                Rng& rng) {
  PhantomSpec s;
  s.organ = organ;
  s.descriptor_profile = profile;
  s.shape = opt.shape;
  const auto a = resolve_appearance(profile, organ);
  const double reach = a.ill_defined ? 5.0 : 0.0;
  for (int attempt = 0; attempt < 200; ++attempt) {
    for (auto& r : s.tumor_radii_mm) r = rng.uniform(opt.min_radius_mm, opt.max_radius_mm);
    const double rmax = *std::max_element(s.tumor_radii_mm.begin(), s.tumor_radii_mm.end());
    auto axis = [&](int n) {
      const double c = (n - 1) / 2.0;
      const double slack = std::max(0.0, n / 2.0 - 1.5 - rmax - reach);
      return static_cast<int>(std::lround(c + rng.uniform(-slack, slack)));
    };
    s.tumor_center = {axis(s.shape.d), axis(s.shape.h), axis(s.shape.w)};
    s.seed = rng.next_u64();
    try {
      validate_phantom_spec(s);
      return s;
    } catch (const ValidationError&) {
      // shrink and try again
    }
  }
  throw ValidationError("could not place a tumor for this profile inside the phantom grid");
}

std::vector<PhantomSpec> sample_phantom_specs(const PhantomSetOptions& opt) {
  if (opt.count < 0) throw ValidationError("phantom count must be >= 0");
  if (opt.organs.empty()) throw ValidationError("phantom set needs at least one organ");
  if (!(opt.min_radius_mm > 0) || opt.max_radius_mm < opt.min_radius_mm) throw ValidationError("bad radius range");
  const auto profiles = opt.profiles.empty() ? default_training_profiles() : opt.profiles;
  Rng rng(opt.seed);
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < opt.count; ++i) {
    const auto& profile = profiles[static_cast<std::size_t>(i) % profiles.size()];
    const Organ organ = opt.organs[static_cast<std::size_t>(i / static_cast<int>(profiles.size())) % opt.organs.size()];
    auto child = rng.fork(static_cast<std::uint64_t>(i));
    specs.push_back(random_phantom_spec(organ, profile, opt, child));
  }
  return specs;
}

std::vector<Phantom> make_phantoms(const std::vector<PhantomSpec>& specs) {
  std::vector<Phantom> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(make_phantom(s));
  return out;
}

std::pair<DescriptorSet, ReportVariantSet> TextPipeline::process(const RadiologyReport& report) {
  auto d = extract_descriptors(report, *client_);
  const std::string key = std::string(to_string(report.organ)) + "|" + d.cleaned_text;
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, generate_variants(d, variants_, *client_, threshold_)).first;
  ReportVariantSet v = it->second;
  v.report_id = report.id;
  return {std::move(d), std::move(v)};
}

LatentSample make_latent_sample(const Autoencoder& ae, const LatentStats& stats, const Volume& x_normalized,
                                const TumorMask& m, DescriptorSet d, ReportVariantSet v) {
  if (!x_normalized.normalized()) throw ContractError("latent samples are built from normalized volumes");
  if (m.shape() != x_normalized.shape()) throw ShapeError("mask and volume shapes differ");
  LatentSample s;
  s.z0 = stats.standardize(ae.encode(x_normalized).data);
  s.z_healthy = stats.standardize(ae.encode(apply_inverse_mask(x_normalized, m)).data);
  s.mask_latent = downsample_mask(m, ae.config().f);
  s.tumor_cells = tumor_cells(m, ae.config().f);
  s.descriptors = std::move(d);
  s.variants = std::move(v);
  return s;
}

std::vector<Volume> normalized_volumes(const std::vector<Phantom>& phantoms) {
  std::vector<Volume> xs;
  xs.reserve(phantoms.size());
  for (const auto& p : phantoms) xs.push_back(preprocess(p.volume));
  return xs;
}

std::vector<LatentSample> build_latent_dataset(const Autoencoder& ae, const LatentStats& stats,
                                               const std::vector<Phantom>& phantoms,
                                               const std::vector<PhantomSpec>& specs, TextPipeline& text) {
  if (phantoms.size() != specs.size()) throw ContractError("one spec per phantom");
  std::vector<LatentSample> out;
  out.reserve(phantoms.size());
  for (std::size_t i = 0; i < phantoms.size(); ++i) {
    RadiologyReport r{"phantom-" + std::to_string(i), specs[i].organ, phantoms[i].reference_text};
    auto [d, v] = text.process(r);
    out.push_back(make_latent_sample(ae, stats, preprocess(phantoms[i].volume), phantoms[i].mask, std::move(d),
                                     std::move(v)));
  }
  return out;
}

double masked_mean(const Volume& v, const TumorMask& m) {
  if (m.shape() != v.shape()) throw ShapeError("mask and volume shapes differ");
  double s = 0;
  std::size_t n = 0;
  const auto d = v.data();
  const auto k = m.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (k[i]) {
      s += d[i];
      ++n;
    }
  if (n == 0) throw ContractError("mean over an empty mask");
  return s / static_cast<double>(n);
}

}  // namespace tumorsynth
