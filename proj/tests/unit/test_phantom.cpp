#include <gtest/gtest.h>

#include <algorithm>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/phantom.hpp"

using namespace tumorsynth;

namespace {

PhantomSpec spec_for(Organ organ, std::vector<std::string> profile, std::uint64_t seed) {
  PhantomSpec s;
  s.organ = organ;
  s.descriptor_profile = std::move(profile);
  s.seed = seed;
  return s;
}

RegionStats stats_of(const Phantom& p) {
  auto v = preprocess(p.volume);
  return measure_region(v, p.mask, &p.organ);
}

bool has(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TEST(Phantom, HypodenseSeed7IsDarkerThanBackground) {
  auto p = make_phantom(spec_for(Organ::liver, {"hypodense"}, 7));
  auto st = stats_of(p);
  EXPECT_LT(st.tumor_mean, st.background_mean - 0.15);
  EXPECT_EQ(p.reference_text, "a hypodense lesion in the liver");
}

TEST(Phantom, Deterministic) {
  auto s = spec_for(Organ::kidney, {"heterogeneous", "ill-defined"}, 3);
  auto a = make_phantom(s);
  auto b = make_phantom(s);
  EXPECT_TRUE(std::equal(a.volume.data().begin(), a.volume.data().end(), b.volume.data().begin()));
  EXPECT_EQ(a.mask, b.mask);
}

TEST(Phantom, CysticSmootherThanHeterogeneous) {
  auto c = stats_of(make_phantom(spec_for(Organ::liver, {"cystic"}, 11)));
  auto h = stats_of(make_phantom(spec_for(Organ::liver, {"heterogeneous"}, 11)));
  EXPECT_LT(c.tumor_sd, h.tumor_sd);
}

TEST(Phantom, ContradictionsRejected) {
  EXPECT_THROW(make_phantom(spec_for(Organ::liver, {"hypodense", "hyperenhancing"}, 1)), ValidationError);
  EXPECT_THROW(make_phantom(spec_for(Organ::liver, {"cystic", "heterogeneous"}, 1)), ValidationError);
  EXPECT_THROW(make_phantom(spec_for(Organ::liver, {"ill-defined", "well-defined"}, 1)), ValidationError);
  EXPECT_THROW(make_phantom(spec_for(Organ::liver, {"not-a-term"}, 1)), ValidationError);
}

TEST(Phantom, RejectsBadGeometry) {
  auto s = spec_for(Organ::liver, {"hypodense"}, 1);
  s.tumor_radii_mm = {0.0, 5.0, 5.0};
  EXPECT_THROW(make_phantom(s), ValidationError);
  s.tumor_radii_mm = {5.0, 5.0, 5.0};
  s.tumor_center = {3, 16, 16};
  EXPECT_THROW(make_phantom(s), ValidationError);
}

TEST(Phantom, MaskIsTheEllipsoid) {
  auto p = make_phantom(spec_for(Organ::pancreas, {"hypodense"}, 2));
  EXPECT_TRUE(p.mask.at(16, 16, 16));
  EXPECT_TRUE(p.mask.at(16, 16, 21));
  EXPECT_FALSE(p.mask.at(16, 16, 22));
  EXPECT_EQ(p.volume.shape(), (Shape3{32, 32, 32}));
  EXPECT_FALSE(p.volume.normalized());
}

TEST(Phantom, HealthyMatchesOutsideSharpTumor) {
  auto p = make_phantom(spec_for(Organ::liver, {"hyperenhancing"}, 5));
  const auto& s = p.volume.shape();
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (!p.mask.at(z, y, x)) ASSERT_EQ(p.volume.at(z, y, x), p.healthy.at(z, y, x));
}

// Contract check over every vocabulary term with a rendering effect, 20 seeds each.
TEST(Phantom, DescriptorContractsHoldForAllTerms) {
  const auto& vocab = default_vocabulary();
  for (Organ organ : kAllOrgans) {
    for (const auto* ep : vocab.for_organ(organ)) {
      const auto& e = *ep;
      if (e.effect == TermEffect::none) continue;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto st = stats_of(make_phantom(spec_for(organ, {e.phrase}, seed * 31 + 1)));
        SCOPED_TRACE(e.phrase + " seed " + std::to_string(seed));
        switch (e.effect) {
          case TermEffect::hypo: EXPECT_LT(st.tumor_mean, st.background_mean - kAttenuationDelta); break;
          case TermEffect::hyper: EXPECT_GT(st.tumor_mean, st.background_mean + kAttenuationDelta); break;
          case TermEffect::cystic:
            EXPECT_LT(st.tumor_sd, kCysticMaxSd);
            EXPECT_LT(st.boundary_width, kSharpMaxWidth);
            break;
          case TermEffect::heterogeneous: EXPECT_GT(st.tumor_sd, kHeterogeneousMinSd); break;
          case TermEffect::ill_defined: EXPECT_GE(st.boundary_width, kIllDefinedMinWidth); break;
          case TermEffect::well_defined: EXPECT_LT(st.boundary_width, kSharpMaxWidth); break;
          case TermEffect::none: break;
        }
      }
    }
  }
}

TEST(Phantom, MeasuredTermsRecoverProfileCategory) {
  const std::vector<std::pair<std::vector<std::string>, std::string>> cases = {
      {{"hypodense"}, "hypoattenuating"},
      {{"hyperenhancing"}, "hyperenhancing"},
      {{"cystic"}, "cystic"},
      {{"heterogeneous"}, "heterogeneous"},
      {{"hypodense", "ill-defined"}, "ill-defined"},
  };
  for (const auto& [profile, expected] : cases) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto terms = appearance_terms(stats_of(make_phantom(spec_for(Organ::liver, profile, seed))));
      EXPECT_TRUE(has(terms, expected)) << expected << " seed " << seed;
    }
  }
}
