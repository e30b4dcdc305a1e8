#include "tumorsynth/targeted_aug.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"
#include "tumorsynth/phantom.hpp"

namespace tumorsynth {

using nlohmann::json;

namespace {

constexpr std::string_view kDescribePrompt =
    "Describe the lesion in one short sentence using only terms from the provided list.";

}  // namespace

std::string_view to_string(FailureKind k) {
  return k == FailureKind::false_positive ? "false_positive" : "false_negative";
}

std::vector<TumorMask> connected_components(const TumorMask& m) {
  const auto& s = m.shape();
  std::vector<int> label(s.voxels(), -1);
  std::vector<TumorMask> comps;
  std::vector<std::array<int, 3>> stack;
  int next = 0;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!m.at(z, y, x) || label[m.index(z, y, x)] >= 0) continue;
        TumorMask c(s);
        stack.push_back({z, y, x});
        label[m.index(z, y, x)] = next;
        while (!stack.empty()) {
          const auto [cz, cy, cx] = stack.back();
          stack.pop_back();
          c.at(cz, cy, cx) = 1;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int nz = cz + dz, ny = cy + dy, nx = cx + dx;
                if (!m.contains(nz, ny, nx) || !m.at(nz, ny, nx)) continue;
                auto& l = label[m.index(nz, ny, nx)];
                if (l >= 0) continue;
                l = next;
                stack.push_back({nz, ny, nx});
              }
        }
        comps.push_back(std::move(c));
        ++next;
      }
  std::stable_sort(comps.begin(), comps.end(), [](const TumorMask& a, const TumorMask& b) { return a.count() > b.count(); });
  return comps;
}

std::vector<FailureCase> mine_failures(const TumorMask& pred, const TumorMask& truth, const Volume& volume,
                                       const MiningOptions& opt) {
  if (pred.shape() != truth.shape() || pred.shape() != volume.shape()) {
    throw ShapeError("prediction, truth and volume must share a grid");
  }
  if (opt.min_voxels < 1) throw ValidationError("min_voxels must be >= 1");
  const auto& s = volume.shape();
  const Shape3 patch{std::min(opt.patch.d, s.d), std::min(opt.patch.h, s.h), std::min(opt.patch.w, s.w)};

  std::vector<FailureCase> out;
  auto mine = [&](const TumorMask& a, const TumorMask& b, FailureKind kind, const char* tag) {
    TumorMask diff(s);
    for (std::size_t i = 0; i < diff.data().size(); ++i) diff.data()[i] = a.data()[i] && !b.data()[i];
    int n = 0;
    for (auto& comp : connected_components(diff)) {
      const std::size_t count = comp.count();
      if (count < static_cast<std::size_t>(opt.min_voxels)) continue;
      auto p = crop_patch(volume, comp, patch);
      FailureCase fc;
      fc.kind = kind;
      fc.sub_volume = std::move(p.volume);
      fc.mask = std::move(p.mask);
      fc.source_id = opt.source_id + "/" + tag + std::to_string(n++);
      fc.organ = opt.organ;
      fc.voxels = fc.mask.count();
      out.push_back(std::move(fc));
    }
  };
  if (opt.false_positives) mine(pred, truth, FailureKind::false_positive, "fp");
  if (opt.false_negatives) mine(truth, pred, FailureKind::false_negative, "fn");
  return out;
}

std::string describe_failure(const FailureCase& fc, LMClient& client, const Vocabulary& vocab) {
  if (fc.mask.empty()) throw ContractError("failure case mask is empty");
  const Volume x = fc.sub_volume.normalized() ? fc.sub_volume : preprocess(fc.sub_volume);
  const RegionStats st = measure_region(x, fc.mask);
  std::vector<std::string> terms;
  for (const auto& t : appearance_terms(st))
    if (vocab.contains(fc.organ, t)) terms.push_back(t);
  const json payload{{"organ", to_string(fc.organ)},
                     {"terms", terms},
                     {"region",
                      {{"tumor_mean", st.tumor_mean},
                       {"tumor_sd", st.tumor_sd},
                       {"background_mean", st.background_mean},
                       {"boundary_width", st.boundary_width},
                       {"voxels", st.tumor_voxels}}}};
  auto r = complete_with_retry(client, {"describe", std::string(kDescribePrompt), payload.dump()}, 3);
  if (r.text.empty()) throw FormatError("language model returned an empty description");
  return r.text;
}

std::vector<AugmentedSample> augment(const std::vector<FailureCase>& cases, const std::vector<Volume>& healthy_pool,
                                     const SynthesisModel& model, LMClient& client, const AugmentOptions& opt) {
  if (opt.per_case < 0) throw ValidationError("per_case must be >= 0");
  std::vector<AugmentedSample> out;
  if (opt.per_case == 0 || cases.empty()) return out;
  if (healthy_pool.empty()) throw ContractError("augmentation needs a nonempty healthy pool");
  Rng rng(opt.seed);
  for (const auto& fc : cases) {
    const TumorMask mask = magnify_mask(fc.mask, opt.magnification);
    const std::string report = describe_failure(fc, client);
    for (int k = 0; k < opt.per_case; ++k) {
      AugmentedSample s;
      s.healthy_index = rng.below(healthy_pool.size());
      s.seed = Rng::mix(fnv1a(fc.source_id) ^ Rng::mix(opt.seed + static_cast<std::uint64_t>(k)));
      const Volume& h = healthy_pool[s.healthy_index];
      if (h.shape() != mask.shape()) {
        throw ShapeError("healthy volume " + std::to_string(s.healthy_index) + " does not match the case patch shape");
      }
      Rng sample_rng(s.seed);
      s.volume = synthesize_tumor(h, mask, report, model, sample_rng);
      s.mask = mask;
      s.report = report;
      s.case_id = fc.source_id;
      out.push_back(std::move(s));
    }
  }
  return out;
}

json write_augmented_set(const std::filesystem::path& dir, const std::vector<AugmentedSample>& samples) {
  std::filesystem::create_directories(dir / "volumes");
  std::filesystem::create_directories(dir / "masks");
  json records = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = "sample_" + std::to_string(i);
    save_volume(dir / "volumes" / stem, s.volume);
    save_mask(dir / "masks" / stem, s.mask, s.volume.spacing());
    records.push_back({{"volume", "volumes/" + stem + ".hdr"},
                       {"mask", "masks/" + stem + ".hdr"},
                       {"report", s.report},
                       {"case_id", s.case_id},
                       {"seed", s.seed},
                       {"healthy_index", s.healthy_index}});
  }
  json manifest{{"kind", "augmented_set"}, {"synthetic_to_real_ratio", "1:1"}, {"samples", records}};
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << "\n";
  if (!f) throw Error("could not write " + (dir / "manifest.json").string());
  return manifest;
}

}  // namespace tumorsynth
