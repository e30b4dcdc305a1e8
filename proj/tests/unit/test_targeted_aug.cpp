#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/phantom.hpp"
#include "tumorsynth/pipeline.hpp"
#include "tumorsynth/targeted_aug.hpp"

using namespace tumorsynth;

namespace {

const Shape3 kGrid{8, 8, 8};

MiningOptions whole_grid() {
  MiningOptions o;
  o.patch = kGrid;  // crop is the identity, so case coordinates are grid coordinates
  return o;
}

Volume flat_volume() { return Volume(kGrid); }

TumorMask box(int z0, int z1, int y0, int y1, int x0, int x1) {
  TumorMask m(kGrid);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) m.at(z, y, x) = 1;
  return m;
}

TumorMask unite(TumorMask a, const TumorMask& b) {
  for (std::size_t i = 0; i < a.data().size(); ++i) a.data()[i] |= b.data()[i];
  return a;
}

std::size_t overlap(const TumorMask& a, const TumorMask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) n += a.data()[i] && b.data()[i];
  return n;
}

bool contains_any(const std::string& s, std::initializer_list<const char*> words) {
  for (const char* w : words)
    if (s.find(w) != std::string::npos) return true;
  return false;
}

// every attribute of the generating profile shows up in the description
bool matches_profile(const std::string& text, const std::vector<std::string>& profile, Organ organ) {
  const auto a = resolve_appearance(profile, organ);
  if (a.cystic) return contains_any(text, {"cystic"});
  if (a.hypo && !contains_any(text, {"hypoattenuating", "hypodense"})) return false;
  if (a.hyper && !contains_any(text, {"hyperenhancing", "hyperattenuating"})) return false;
  if (a.heterogeneous && !contains_any(text, {"heterogeneous"})) return false;
  if (a.ill_defined && !contains_any(text, {"ill-defined"})) return false;
  return true;
}

}  // namespace

TEST(Components, TwentySixConnectivity) {
  TumorMask m(kGrid);
  m.at(0, 0, 0) = m.at(1, 1, 1) = m.at(2, 2, 2) = 1;  // corner-touching chain
  m.at(6, 6, 6) = 1;
  const auto comps = connected_components(m);
  ASSERT_EQ(comps.size(), 2u);
  EXPECT_EQ(comps[0].count(), 3u);
  EXPECT_EQ(comps[1].count(), 1u);
  EXPECT_TRUE(connected_components(TumorMask(kGrid)).empty());
}

// golden 1
TEST(Mining, PerfectPredictionYieldsNothing) {
  const auto t = box(2, 4, 2, 4, 2, 4);
  EXPECT_TRUE(mine_failures(t, t, flat_volume(), whole_grid()).empty());
}

// golden 2
TEST(Mining, DisjointBlobIsOneFalsePositive) {
  const auto blob = box(1, 1, 1, 2, 1, 5);  // 10 voxels
  const auto speck = box(6, 6, 6, 6, 5, 7);  // 3 voxels, below the default minimum
  const auto cases = mine_failures(unite(blob, speck), TumorMask(kGrid), flat_volume(), whole_grid());
  ASSERT_EQ(cases.size(), 1u);
  EXPECT_EQ(cases[0].kind, FailureKind::false_positive);
  EXPECT_EQ(cases[0].voxels, 10u);
  EXPECT_EQ(cases[0].mask, blob);
  EXPECT_EQ(cases[0].source_id, "case/fp0");
}

// golden 3
TEST(Mining, HalfCoveredTruthIsOneFalseNegative) {
  const auto truth = box(2, 3, 2, 5, 2, 5);  // 32 voxels
  const auto pred = box(2, 3, 2, 5, 2, 3);   // covers x = 2..3
  const auto cases = mine_failures(pred, truth, flat_volume(), whole_grid());
  ASSERT_EQ(cases.size(), 1u);
  EXPECT_EQ(cases[0].kind, FailureKind::false_negative);
  EXPECT_EQ(cases[0].voxels, 16u);
  EXPECT_EQ(cases[0].mask, box(2, 3, 2, 5, 4, 5));
  EXPECT_EQ(cases[0].source_id, "case/fn0");
}

TEST(Mining, KindFiltersAndErrors) {
  const auto truth = box(0, 1, 0, 1, 0, 2);                      // 12 voxels, missed
  const auto pred = box(5, 6, 5, 6, 5, 7);                       // 12 voxels, spurious
  auto o = whole_grid();
  EXPECT_EQ(mine_failures(pred, truth, flat_volume(), o).size(), 2u);
  o.false_positives = false;
  EXPECT_EQ(mine_failures(pred, truth, flat_volume(), o).at(0).kind, FailureKind::false_negative);
  o.min_voxels = 13;
  EXPECT_TRUE(mine_failures(pred, truth, flat_volume(), o).empty());
  o.min_voxels = 0;
  EXPECT_THROW(mine_failures(pred, truth, flat_volume(), o), ValidationError);
  EXPECT_THROW(mine_failures(pred, TumorMask({8, 8, 7}), flat_volume(), whole_grid()), ShapeError);
}

TEST(Mining, CropIsCentredPatch) {
  Volume v(Shape3{16, 16, 16});
  for (std::size_t i = 0; i < v.data().size(); ++i) v.data()[i] = static_cast<float>(i % 97);
  TumorMask truth(v.shape());
  for (int z = 10; z < 13; ++z)
    for (int y = 10; y < 13; ++y)
      for (int x = 10; x < 13; ++x) truth.at(z, y, x) = 1;
  MiningOptions o;
  o.patch = {8, 8, 8};
  const auto cases = mine_failures(TumorMask(v.shape()), truth, v, o);
  ASSERT_EQ(cases.size(), 1u);
  EXPECT_EQ(cases[0].sub_volume.shape(), (Shape3{8, 8, 8}));
  EXPECT_EQ(cases[0].voxels, 27u);
  const auto expect = crop_patch(v, truth, {8, 8, 8});
  EXPECT_TRUE(std::equal(expect.volume.data().begin(), expect.volume.data().end(),
                         cases[0].sub_volume.data().begin()));
}

TEST(Mining, PropertyPartitionsDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    TumorMask pred(kGrid), truth(kGrid);
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
      pred.data()[i] = rng.uniform() < 0.2;
      truth.data()[i] = rng.uniform() < 0.2;
    }
    auto o = whole_grid();
    o.min_voxels = 1;
    std::size_t fp = 0, fn = 0;
    TumorMask seen(kGrid);
    for (const auto& c : mine_failures(pred, truth, flat_volume(), o)) {
      ASSERT_FALSE(c.mask.empty());
      ASSERT_EQ(overlap(c.mask, seen), 0u);
      seen = unite(seen, c.mask);
      if (c.kind == FailureKind::false_positive) {
        ASSERT_EQ(overlap(c.mask, truth), 0u);
        ASSERT_EQ(overlap(c.mask, pred), c.voxels);
        fp += c.voxels;
      } else {
        ASSERT_EQ(overlap(c.mask, pred), 0u);
        ASSERT_EQ(overlap(c.mask, truth), c.voxels);
        fn += c.voxels;
      }
    }
    ASSERT_EQ(fp, pred.count() - overlap(pred, truth));
    ASSERT_EQ(fn, truth.count() - overlap(pred, truth));
  }
}

TEST(Describe, HypodenseSentenceForm) {
  PhantomSpec spec;
  spec.descriptor_profile = {"hypodense"};
  spec.seed = 7;
  const auto ph = make_phantom(spec);
  const auto cases = mine_failures(TumorMask(ph.mask.shape()), ph.mask, ph.volume);
  ASSERT_EQ(cases.size(), 1u);
  MockLMClient client;
  const auto text = describe_failure(cases[0], client);
  EXPECT_EQ(text, "a hypoattenuating lesion is seen in the liver");
  EXPECT_EQ(describe_failure(cases[0], client), text);
}

TEST(Describe, CysticRegion) {
  PhantomSpec spec;
  spec.descriptor_profile = {"cystic"};
  spec.seed = 3;
  const auto ph = make_phantom(spec);
  const auto cases = mine_failures(TumorMask(ph.mask.shape()), ph.mask, ph.volume);
  ASSERT_EQ(cases.size(), 1u);
  MockLMClient client;
  EXPECT_NE(describe_failure(cases[0], client).find("cystic"), std::string::npos);
}

TEST(Describe, ClosedLoopRecoversProfile) {
  const auto profiles = default_training_profiles();
  const std::vector<Organ> organs{Organ::liver, Organ::pancreas, Organ::kidney};
  PhantomSetOptions popt;
  Rng rng(11);
  MockLMClient client;
  int hits = 0;
  std::string misses;
  for (int i = 0; i < 50; ++i) {
    const auto& profile = profiles[static_cast<std::size_t>(i) % profiles.size()];
    const Organ organ = organs[static_cast<std::size_t>(i / 6) % organs.size()];
    auto child = rng.fork(static_cast<std::uint64_t>(i));
    auto spec = random_phantom_spec(organ, profile, popt, child);
    spec.seed = child.next_u64();
    const auto ph = make_phantom(spec);
    MiningOptions o;
    o.organ = organ;
    o.false_positives = false;
    const auto cases = mine_failures(TumorMask(ph.mask.shape()), ph.mask, ph.volume, o);
    ASSERT_EQ(cases.size(), 1u);
    const auto text = describe_failure(cases[0], client);
    if (matches_profile(text, profile, organ)) {
      ++hits;
    } else {
      misses += std::to_string(i) + ": " + text + "\n";
    }
  }
  EXPECT_GE(hits, 45) << misses;
}

TEST(Describe, EmptyMaskIsAnError) {
  FailureCase fc;
  fc.sub_volume = flat_volume();
  fc.mask = TumorMask(kGrid);
  MockLMClient client;
  EXPECT_THROW(describe_failure(fc, client), ContractError);
}

namespace {

struct TinyModels {
  Autoencoder ae;
  Denoiser den;
  SynthesisModel model;
};

std::unique_ptr<TinyModels> tiny_models() {
  AEConfig ac;
  ac.widths = {4, 8};
  ac.codebook_size = 16;
  ac.res_blocks = 1;
  ac.seed = 3;
  DenoiserConfig dc;
  dc.timesteps = 8;
  dc.beta_start = 0.01;
  dc.beta_end = 0.3;
  dc.widths = {4, 8};
  dc.time_dim = 8;
  dc.context_tokens = 2;
  dc.attn_dim = 8;
  dc.seed = 17;
  auto m = std::make_unique<TinyModels>(TinyModels{Autoencoder(ac), Denoiser(dc), {}});
  const auto ph = make_phantom(PhantomSpec{});
  Rng rng(1);
  m->ae.init_codebook({preprocess(ph.volume)}, rng);
  m->den.mark_trained();
  m->model.stats = compute_latent_stats(m->ae, {preprocess(ph.volume)});
  m->model.schedule = build_schedule(8, 0.01, 0.3);
  m->model.ae = &m->ae;
  m->model.denoiser = &m->den;
  return m;
}

std::vector<FailureCase> two_cases(const Phantom& ph) {
  const auto truth = ph.mask;
  TumorMask pred(truth.shape());
  // a spurious blob away from the tumor, plus the missed tumor
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 24; x < 27; ++x) pred.at(z, y, x) = 1;
  auto cases = mine_failures(pred, truth, ph.volume);
  EXPECT_EQ(cases.size(), 2u);
  return cases;
}

}  // namespace

TEST(Augment, SixSamplesWithDistinctProvenance) {
  const auto m = tiny_models();
  PhantomSpec spec;
  spec.descriptor_profile = {"hypodense"};
  const auto ph = make_phantom(spec);
  const auto cases = two_cases(ph);
  MockLMClient client;
  AugmentOptions opt;
  opt.per_case = 3;
  opt.seed = 9;
  const auto out = augment(cases, {ph.healthy}, m->model, client, opt);
  ASSERT_EQ(out.size(), 6u);
  std::set<std::pair<std::string, std::uint64_t>> prov;
  for (const auto& s : out) {
    EXPECT_FALSE(s.mask.empty());
    EXPECT_FALSE(s.report.empty());
    EXPECT_EQ(s.volume.shape(), s.mask.shape());
    prov.insert({s.case_id, s.seed});
    for (std::size_t i = 0; i < s.mask.data().size(); ++i)
      if (!s.mask.data()[i]) ASSERT_EQ(s.volume.data()[i], ph.healthy.data()[i]);
  }
  EXPECT_EQ(prov.size(), 6u);
  // magnified masks keep the mined support
  for (std::size_t i = 0; i < cases[0].mask.data().size(); ++i)
    if (cases[0].mask.data()[i]) ASSERT_TRUE(out[0].mask.data()[i]);
  EXPECT_GT(out[0].mask.count(), cases[0].mask.count());
}

TEST(Augment, TrivialAndErrorPaths) {
  const auto m = tiny_models();
  const auto ph = make_phantom(PhantomSpec{});
  const auto cases = two_cases(ph);
  MockLMClient client;
  AugmentOptions opt;
  opt.per_case = 0;
  EXPECT_TRUE(augment(cases, {ph.healthy}, m->model, client, opt).empty());
  opt.per_case = 1;
  EXPECT_THROW(augment(cases, {}, m->model, client, opt), ContractError);
  opt.per_case = -1;
  EXPECT_THROW(augment(cases, {ph.healthy}, m->model, client, opt), ValidationError);
}

TEST(Augment, WritesManifest) {
  const auto m = tiny_models();
  const auto ph = make_phantom(PhantomSpec{});
  auto cases = two_cases(ph);
  cases.resize(1);
  MockLMClient client;
  AugmentOptions opt;
  opt.per_case = 2;
  const auto out = augment(cases, {ph.healthy}, m->model, client, opt);
  const auto dir = std::filesystem::temp_directory_path() / "ts_augment_set";
  std::filesystem::remove_all(dir);
  const auto manifest = write_augmented_set(dir, out);
  ASSERT_EQ(manifest.at("samples").size(), 2u);
  for (const auto& r : manifest.at("samples")) {
    EXPECT_TRUE(std::filesystem::exists(dir / r.at("volume").get<std::string>()));
    EXPECT_EQ(r.at("case_id"), cases[0].source_id);
  }
  EXPECT_EQ(load_mask(dir / manifest.at("samples")[1].at("mask").get<std::string>()), out[1].mask);
  std::filesystem::remove_all(dir);
}
