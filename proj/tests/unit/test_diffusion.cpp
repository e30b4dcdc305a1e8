#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tumorsynth/diffusion.hpp"
#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"
#include "tumorsynth/phantom.hpp"

using namespace tumorsynth;
using nn::Tensor;
using tumorsynth::testing::gradcheck;

namespace {

DenoiserConfig tiny_denoiser(int T = kDefaultTimesteps, double b0 = kDefaultBetaStart, double b1 = kDefaultBetaEnd) {
  DenoiserConfig c;
  c.timesteps = T;
  c.beta_start = b0;
  c.beta_end = b1;
  c.widths = {4, 8};
  c.time_dim = 8;
  c.context_tokens = 2;
  c.attn_dim = 8;
  c.seed = 11;
  return c;
}

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    den += b.data[i] * b.data[i];
  }
  return std::sqrt(num / den);
}

LatentSample random_sample(std::uint64_t seed, const std::string& text = "a hypodense lesion in the liver") {
  Rng rng(seed);
  LatentSample s;
  s.z0 = standard_normal({4, 8, 8, 8}, rng);
  s.z_healthy = standard_normal({4, 8, 8, 8}, rng);
  s.mask_latent = Tensor({1, 8, 8, 8});
  for (int z = 2; z < 6; ++z)
    for (int y = 2; y < 6; ++y)
      for (int x = 3; x < 6; ++x) s.mask_latent.data[(z * 8 + y) * 8 + x] = 1.0;
  s.descriptors.cleaned_text = text;
  s.descriptors.terms = {"hypodense"};
  return s;
}

ConditionBundle cond_for(const LatentSample& s, const std::string& text, int t) { return make_condition(s, text, t); }

}  // namespace

// --- schedule ---------------------------------------------------------------

TEST(Schedule, SingleStep) {
  auto s = build_schedule(1, 0.02, 0.02);
  ASSERT_EQ(s.alpha_bar.size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.98);
}

TEST(Schedule, TwoStepHandCase) {
  auto s = build_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1], 0.72, 1e-15);
}

TEST(Schedule, DefaultEndsNearPureNoise) {
  auto s = build_schedule();
  EXPECT_EQ(s.T, 200);
  EXPECT_LT(s.alpha_bar_at(200), 0.05);
}

// The 1e-4..0.02 pair was tuned for T=1000; at T=200 it leaves a lot of signal.
TEST(Schedule, ClassicEndpointsAtTwoHundredSteps) {
  auto s = build_schedule(200, 1e-4, 0.02);
  double log_prod = 0;
  for (int i = 0; i < 200; ++i) log_prod += std::log1p(-(1e-4 + (0.02 - 1e-4) * i / 199.0));
  EXPECT_NEAR(s.alpha_bar_at(200), std::exp(log_prod), 1e-12);
  EXPECT_GT(s.alpha_bar_at(200), 0.13);
  EXPECT_LT(s.alpha_bar_at(200), 0.14);
}

TEST(Schedule, RejectsBadRanges) {
  EXPECT_THROW(build_schedule(0, 0.1, 0.2), ValidationError);
  EXPECT_THROW(build_schedule(10, 0.0, 0.2), ValidationError);
  EXPECT_THROW(build_schedule(10, 0.3, 0.2), ValidationError);
  EXPECT_THROW(build_schedule(10, 0.1, 1.0), ValidationError);
}

TEST(Schedule, PropertyMonotoneAndProduct) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int T = rng.uniform_int(1, 300);
    const double b0 = rng.uniform(1e-5, 0.05);
    const double b1 = rng.uniform(b0, 0.2);
    auto s = build_schedule(T, b0, b1);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      EXPECT_NEAR(s.alpha_at(t), 1.0 - s.beta_at(t), 1e-15);
      prod *= s.alpha_at(t);
      EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
      EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    }
  }
}

TEST(Schedule, HashTracksBetas) {
  EXPECT_EQ(build_schedule().hash(), build_schedule().hash());
  EXPECT_NE(build_schedule().hash(), build_schedule(200, 1e-4, 0.02).hash());
}

// --- forward / inverse ------------------------------------------------------

TEST(ForwardNoise, ZeroNoiseScalesSignal) {
  auto s = build_schedule(10, 0.01, 0.1);
  Rng rng(1);
  auto z0 = standard_normal({2, 2, 2, 2}, rng);
  auto zt = forward_noise(z0, 7, Tensor(z0.shape), s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_DOUBLE_EQ(zt.data[i], std::sqrt(s.alpha_bar_at(7)) * z0.data[i]);
}

TEST(ForwardNoise, EarlyStepIsNearIdentity) {
  auto s = build_schedule(10, 1e-6, 1e-5);
  Rng rng(2);
  auto z0 = standard_normal({4, 4, 4, 4}, rng);
  auto eps = standard_normal(z0.shape, rng);
  auto zt = forward_noise(z0, 1, eps, s);
  double d = 0, n = 0;
  for (std::size_t i = 0; i < z0.size(); ++i) {
    d += (zt.data[i] - z0.data[i]) * (zt.data[i] - z0.data[i]);
    n += z0.data[i] * z0.data[i];
  }
  EXPECT_LT(std::sqrt(d), 1e-2 * std::sqrt(n));
}

TEST(ForwardNoise, Errors) {
  auto s = build_schedule(10);
  Tensor z({4, 2, 2, 2});
  EXPECT_THROW(forward_noise(z, 1, Tensor({4, 2, 2, 3}), s), ShapeError);
  EXPECT_THROW(forward_noise(z, 0, z, s), ContractError);
  EXPECT_THROW(forward_noise(z, 11, z, s), ContractError);
}

TEST(EstimateZ0, PropertyInvertsForwardNoise) {
  Rng rng(3);
  for (int T : {1, 10, 200}) {
    auto s = build_schedule(T, std::min(kDefaultBetaStart * 200.0 / T, 0.02), std::min(kDefaultBetaEnd * 200.0 / T, 0.5));
    for (int i = 0; i < 100; ++i) {
      const int t = rng.uniform_int(1, T);
      auto z0 = standard_normal({4, 4, 4, 4}, rng);
      auto eps = standard_normal(z0.shape, rng);
      auto back = estimate_z0(forward_noise(z0, t, eps, s), eps, t, s);
      EXPECT_LT(rel_l2(back, z0), 1e-6) << "T=" << T << " t=" << t;
    }
  }
}

TEST(EstimateZ0, ZeroNoiseReduction) {
  auto s = build_schedule(10);
  Tensor zt({1}, {0.7});
  EXPECT_DOUBLE_EQ(estimate_z0(zt, Tensor({1}, {0.0}), 4, s).data[0], 0.7 / std::sqrt(s.alpha_bar_at(4)));
}

TEST(EstimateZ0, TwoStepHandCase) {
  auto s = build_schedule(2, 0.1, 0.2);
  auto z0 = estimate_z0(Tensor({1}, {1.0}), Tensor({1}, {0.5}), 2, s);
  EXPECT_NEAR(z0.data[0], (1.0 - std::sqrt(0.28) * 0.5) / std::sqrt(0.72), 1e-12);
  EXPECT_NEAR(z0.data[0], 0.8667, 1e-4);
}

// --- reverse step -----------------------------------------------------------

TEST(PosteriorStep, FinalStepAddsNoNoise) {
  auto s = build_schedule(10);
  EXPECT_EQ(posterior_sigma(1, s), 0.0);
  Rng rng(4), noise(5);
  auto z = standard_normal({2, 2, 2, 2}, rng);
  auto e = standard_normal(z.shape, rng);
  auto a = posterior_step(z, e, 1, s, &noise);
  auto b = posterior_step(z, e, 1, s, nullptr);
  EXPECT_EQ(a.data, b.data);
}

TEST(PosteriorStep, SigmaMatchesPosteriorVariance) {
  auto s = build_schedule(50, 1e-3, 0.05);
  for (int t = 2; t <= 50; ++t) {
    const double ab = s.alpha_bar_at(t), ab1 = s.alpha_bar_at(t - 1);
    const double var = (1.0 - ab1) / (1.0 - ab) * (1.0 - ab / ab1);
    EXPECT_NEAR(posterior_sigma(t, s), std::sqrt(var), 1e-12);
  }
}

TEST(PosteriorStep, SmallBetaIsContinuous) {
  auto s = build_schedule(5, 1e-9, 1e-9);
  Rng rng(6);
  auto z = standard_normal({2, 2, 2, 2}, rng);
  auto e = standard_normal(z.shape, rng);
  auto next = posterior_step(z, e, 3, s, nullptr);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(next.data[i], z.data[i], 1e-4);
}

TEST(PosteriorStep, RejectsStepZero) {
  auto s = build_schedule(5);
  Tensor z({1}, {0.0});
  Rng rng(1);
  EXPECT_THROW(posterior_step(z, z, 0, s, &rng), ContractError);
}

TEST(Sampling, OracleDenoiserRecoversLatent) {
  for (int T : {1, 10, 200}) {
    auto s = build_schedule(T, std::min(kDefaultBetaStart * 200.0 / T, 0.02), std::min(kDefaultBetaEnd * 200.0 / T, 0.5));
    Rng rng(static_cast<std::uint64_t>(T));
    const auto z0 = standard_normal({4, 8, 8, 8}, rng);
    auto oracle = [&](const Tensor& z, int t) {
      Tensor e(z.shape);
      const double ab = s.alpha_bar_at(t);
      for (std::size_t i = 0; i < z.size(); ++i) e.data[i] = (z.data[i] - std::sqrt(ab) * z0.data[i]) / std::sqrt(1 - ab);
      return e;
    };
    auto out = sample_latent(oracle, standard_normal(z0.shape, rng), s, rng, {true});
    EXPECT_LT(rel_l2(out, z0), 1e-3) << "T=" << T;
  }
}

// --- conditioning helpers ---------------------------------------------------

TEST(Conditioning, DownsampleMaskPicksCellCentres) {
  TumorMask m({8, 8, 8});
  m.at(2, 2, 2) = 1;  // centre of cell (0,0,0) for f=4
  m.at(5, 1, 1) = 1;  // not a centre
  auto t = downsample_mask(m, 4);
  EXPECT_EQ(t.shape, (std::vector<int>{1, 2, 2, 2}));
  EXPECT_EQ(t.data[0], 1.0);
  double total = 0;
  for (double v : t.data) total += v;
  EXPECT_EQ(total, 1.0);
  EXPECT_THROW(downsample_mask(TumorMask({8, 8, 6}), 4), ShapeError);
}

TEST(Conditioning, LatentStatsRoundTrip) {
  LatentStats st{{0.5, -1.0}, {2.0, 0.25}};
  Rng rng(8);
  auto z = standard_normal({2, 3, 3, 3}, rng);
  auto back = st.unstandardize(st.standardize(z));
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(back.data[i], z.data[i], 1e-12);
  auto j = latent_stats_from_json(to_json(st));
  EXPECT_EQ(j.mean, st.mean);
  EXPECT_THROW(st.standardize(Tensor({3, 2, 2, 2})), ShapeError);
}

TEST(Conditioning, TimestepEmbeddingIsSinusoidal) {
  auto e = timestep_embedding(7, 8);
  EXPECT_DOUBLE_EQ(e.data[0], std::sin(7.0));
  EXPECT_DOUBLE_EQ(e.data[4], std::cos(7.0));
  EXPECT_NEAR(e.data[1], std::sin(7.0 * std::pow(10000.0, -0.25)), 1e-15);
}

// --- denoiser ---------------------------------------------------------------

TEST(Denoiser, OutputShapeMatchesInput) {
  Denoiser d(DenoiserConfig{});
  auto s = random_sample(1);
  auto eps = d.predict_noise(s.z0, cond_for(s, s.descriptors.cleaned_text, 5));
  EXPECT_EQ(eps.shape, (std::vector<int>{4, 8, 8, 8}));
}

TEST(Denoiser, Deterministic) {
  Denoiser d(tiny_denoiser());
  auto s = random_sample(2);
  auto c = cond_for(s, "a cystic lesion in the kidney", 9);
  EXPECT_EQ(d.predict_noise(s.z0, c).data, d.predict_noise(s.z0, c).data);
}

TEST(Denoiser, TextPathwayIsCrossAttentionOnly) {
  Denoiser d(tiny_denoiser());
  auto s = random_sample(3);
  auto a = cond_for(s, "a hypodense lesion in the liver", 40);
  auto b = cond_for(s, "a hyperenhancing lesion in the liver", 40);
  auto ea = d.predict_noise(s.z0, a), eb = d.predict_noise(s.z0, b);
  double diff = 0;
  for (std::size_t i = 0; i < ea.size(); ++i) diff += std::abs(ea.data[i] - eb.data[i]);
  EXPECT_GT(diff, 0.0);

  d.zero_cross_attention();
  EXPECT_EQ(d.predict_noise(s.z0, a).data, d.predict_noise(s.z0, b).data);
}

TEST(Denoiser, ShapeErrors) {
  Denoiser d(tiny_denoiser());
  auto s = random_sample(4);
  auto c = cond_for(s, "x", 1);
  EXPECT_THROW(d.predict_noise(Tensor({3, 8, 8, 8}), c), ShapeError);
  EXPECT_THROW(d.predict_noise(Tensor({4, 6, 8, 8}), c), ShapeError);
  auto bad = c;
  bad.mask_latent = Tensor({1, 4, 4, 4});
  EXPECT_THROW(d.predict_noise(s.z0, bad), ShapeError);
  bad = c;
  bad.text = Tensor({16});
  EXPECT_THROW(d.predict_noise(s.z0, bad), ShapeError);
  bad = c;
  bad.t = 0;
  EXPECT_THROW(d.predict_noise(s.z0, bad), ContractError);
}

TEST(Denoiser, CheckpointRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ts_den_ckpt";
  std::filesystem::create_directories(dir);
  Denoiser d(tiny_denoiser());
  d.save(dir / "d.ckpt", {{"note", "x"}});
  auto [back, extra] = Denoiser::load(dir / "d.ckpt");
  EXPECT_TRUE(back.trained());
  EXPECT_EQ(extra.at("note"), "x");
  auto s = random_sample(5);
  auto c = cond_for(s, "a cystic lesion", 3);
  auto a = d.predict_noise(s.z0, c), b = back.predict_noise(s.z0, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-4);
  std::filesystem::remove_all(dir);
}

TEST(Denoiser, ConfigValidation) {
  auto c = tiny_denoiser();
  c.widths = {4};
  EXPECT_THROW(Denoiser{c}, ValidationError);
  c = tiny_denoiser();
  c.time_dim = 7;
  EXPECT_THROW(Denoiser{c}, ValidationError);
  EXPECT_NE(tiny_denoiser().architecture_hash(), DenoiserConfig{}.architecture_hash());
  auto seeded = tiny_denoiser();
  seeded.seed = 99;
  EXPECT_EQ(seeded.architecture_hash(), tiny_denoiser().architecture_hash());
  EXPECT_NE(tiny_denoiser(10).architecture_hash(), tiny_denoiser().architecture_hash());
  EXPECT_THROW(Denoiser{tiny_denoiser(10, 0.3, 0.2)}, ValidationError);
}

TEST(Denoiser, InputSkipIsLinearNoiseGuess) {
  Denoiser d(tiny_denoiser(10));
  for (const char* n : {"out.w", "out.b"}) {
    auto& v = d.params().get(n).value.data;
    std::fill(v.begin(), v.end(), 0.0);
  }
  auto s = random_sample(21);
  const auto sched = build_schedule(10);
  for (int t : {1, 4, 10}) {
    const auto eps = d.predict_noise(s.z0, cond_for(s, "x", t));
    const double c = std::sqrt(1.0 - sched.alpha_bar_at(t));
    for (std::size_t i = 0; i < eps.size(); ++i) ASSERT_DOUBLE_EQ(eps.data[i], c * s.z0.data[i]);
  }
  auto cfg = tiny_denoiser(10);
  cfg.input_skip = false;
  Denoiser plain(cfg);
  for (const char* n : {"out.w", "out.b"}) {
    auto& v = plain.params().get(n).value.data;
    std::fill(v.begin(), v.end(), 0.0);
  }
  for (double v : plain.predict_noise(s.z0, cond_for(s, "x", 4)).data) ASSERT_EQ(v, 0.0);
}

TEST(Denoiser, TimestepOutsideScheduleRejected) {
  Denoiser d(tiny_denoiser(10));
  auto s = random_sample(22);
  EXPECT_THROW(d.predict_noise(s.z0, cond_for(s, "x", 11)), ContractError);
  EXPECT_THROW(d.predict_noise(s.z0, cond_for(s, "x", 0)), ContractError);
  EXPECT_NO_THROW(d.require_schedule(build_schedule(10)));
  EXPECT_THROW(d.require_schedule(build_schedule(10, 1e-3, 0.1)), ContractError);
}

// --- loss -------------------------------------------------------------------

TEST(LdmLoss, OraclePredictorGivesZero) {
  auto s = build_schedule(50);
  auto a = random_sample(6), b = random_sample(7);
  Rng rng(8);
  std::vector<LdmDraw> draws{draw_ldm(a, s, rng, false), draw_ldm(b, s, rng, false)};
  std::vector<const LatentSample*> batch{&a, &b};
  int call = 0;
  NoisePredictor oracle = [&](nn::Graph& g, nn::Var, const ConditionBundle&) { return g.constant(draws[call++].eps); };
  nn::Graph g;
  EXPECT_EQ(ldm_loss(g, oracle, batch, draws, s).value().data[0], 0.0);
}

TEST(LdmLoss, ZeroPredictorMatchesNoiseEnergy) {
  auto s = build_schedule();
  std::vector<LatentSample> items;
  for (int i = 0; i < 5; ++i) items.push_back(random_sample(100 + i));
  std::vector<const LatentSample*> batch;
  std::vector<LdmDraw> draws;
  Rng rng(9);
  for (auto& it : items) {
    batch.push_back(&it);
    draws.push_back(draw_ldm(it, s, rng, false));
  }
  NoisePredictor zero = [](nn::Graph& g, nn::Var z, const ConditionBundle&) { return g.constant(Tensor(z.shape())); };
  nn::Graph g;
  const double l = ldm_loss(g, zero, batch, draws, s).value().data[0];  // 10240 standard normal draws
  EXPECT_NEAR(l, 1.0, 0.05);
}

TEST(LdmLoss, DrawUsesVariantsOnlyWithTextAug) {
  auto s = build_schedule(10);
  auto a = random_sample(10);
  a.variants.variants = {"v one", "v two"};
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    auto d = draw_ldm(a, s, rng, true);
    EXPECT_TRUE(d.text == "v one" || d.text == "v two");
    EXPECT_GE(d.t, 1);
    EXPECT_LE(d.t, 10);
    EXPECT_EQ(draw_ldm(a, s, rng, false).text, a.descriptors.cleaned_text);
  }
}

TEST(LdmLoss, GradientMatchesFiniteDifferences) {
  Denoiser d(tiny_denoiser());
  auto s = build_schedule();
  auto a = random_sample(12), b = random_sample(13, "a hyperenhancing lesion in the liver");
  Rng rng(14);
  std::vector<LdmDraw> draws{draw_ldm(a, s, rng, false), draw_ldm(b, s, rng, false)};
  std::vector<const LatentSample*> batch{&a, &b};
  auto predict = denoiser_predictor(d);
  auto r = gradcheck(d.params(), [&](nn::Graph& g) { return ldm_loss(g, predict, batch, draws, s); }, 24, 15);
  EXPECT_GE(r.checked, 16);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(LdmLoss, TumorWeightedError) {
  auto a = random_sample(30);
  Rng rng(31);
  const Tensor eps = standard_normal(a.z0.shape, rng);
  nn::Graph g;
  auto zero = g.constant(Tensor(a.z0.shape));
  // no cells recorded: plain mean square
  double plain = 0;
  for (double v : eps.data) plain += v * v;
  plain /= static_cast<double>(eps.size());
  EXPECT_NEAR(noise_error(zero, eps, a, 5.0).value().data[0], plain, 1e-14);

  a.tumor_cells = a.mask_latent;  // 48 of 512 sites
  EXPECT_NEAR(noise_error(zero, eps, a, 0.0).value().data[0], plain, 1e-14);
  // weights 1 + 5 m, normalized by their mean (512 + 5*48)/512
  const double mean_w = (512.0 + 5.0 * 48.0) / 512.0;
  double want = 0;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 512; ++i) {
      const double e = eps.data[c * 512 + i];
      want += (1.0 + 5.0 * a.mask_latent.data[i]) / mean_w * e * e;
    }
  want /= 2048.0;
  EXPECT_NEAR(noise_error(zero, eps, a, 5.0).value().data[0], want, 1e-12);
  EXPECT_THROW(noise_error(zero, eps, a, -1.0), ContractError);
}

TEST(LdmLoss, WeightedGradientMatchesFiniteDifferences) {
  Denoiser d(tiny_denoiser());
  auto s = build_schedule();
  auto a = random_sample(32);
  a.tumor_cells = a.mask_latent;
  Rng rng(33);
  std::vector<LdmDraw> draws{draw_ldm(a, s, rng, false)};
  std::vector<const LatentSample*> batch{&a};
  auto predict = denoiser_predictor(d);
  auto r = gradcheck(d.params(), [&](nn::Graph& g) { return ldm_loss(g, predict, batch, draws, s, 10.0); }, 24, 34);
  EXPECT_GE(r.checked, 16);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Conditioning, TumorCellsMarkAnyTouchedCell) {
  TumorMask m(Shape3{8, 8, 8});
  m.at(0, 0, 0) = 1;  // corner of cell (0,0,0)
  m.at(5, 2, 7) = 1;  // cell (1,0,1)
  const auto c = tumor_cells(m, 4);
  ASSERT_EQ(c.shape, (std::vector<int>{1, 2, 2, 2}));
  EXPECT_EQ(std::vector<double>(c.data.begin(), c.data.end()), (std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0}));
  // the centre sample misses both voxels
  for (double v : downsample_mask(m, 4).data) EXPECT_EQ(v, 0.0);
}

// --- synthesis --------------------------------------------------------------

namespace {

struct TinyModels {
  Autoencoder ae;
  Denoiser den;
  SynthesisModel model;
};

TinyModels tiny_models() {
  AEConfig ac;
  ac.widths = {4, 8};
  ac.codebook_size = 16;
  ac.res_blocks = 1;
  ac.seed = 3;
  TinyModels m{Autoencoder(ac), Denoiser(tiny_denoiser(8, 0.01, 0.3)), {}};
  PhantomSpec spec;
  auto ph = make_phantom(spec);
  Rng rng(1);
  m.ae.init_codebook({preprocess(ph.volume)}, rng);
  m.den.mark_trained();
  m.model.stats = compute_latent_stats(m.ae, {preprocess(ph.volume)});
  m.model.schedule = build_schedule(8, 0.01, 0.3);
  return m;
}

}  // namespace

TEST(Synthesis, RequiresTrainedWeights) {
  auto m = tiny_models();
  Denoiser fresh(tiny_denoiser(8, 0.01, 0.3));
  SynthesisModel sm = m.model;
  sm.ae = &m.ae;
  sm.denoiser = &fresh;
  auto ph = make_phantom(PhantomSpec{});
  Rng rng(1);
  EXPECT_THROW(synthesize_tumor(ph.healthy, ph.mask, "a hypodense lesion", sm, rng), ContractError);
  sm.denoiser = nullptr;
  EXPECT_THROW(synthesize_tumor(ph.healthy, ph.mask, "a hypodense lesion", sm, rng), ContractError);
  sm.denoiser = &m.den;
  sm.schedule = build_schedule(9, 0.01, 0.3);
  EXPECT_THROW(synthesize_tumor(ph.healthy, ph.mask, "a hypodense lesion", sm, rng), ContractError);
}

TEST(Synthesis, CompositingLeavesOutsideUntouched) {
  auto m = tiny_models();
  m.model.ae = &m.ae;
  m.model.denoiser = &m.den;
  Rng seeds(2);
  for (int i = 0; i < 4; ++i) {
    PhantomSpec spec;
    spec.seed = seeds.next_u64();
    spec.tumor_center = {14 + i, 16, 17 - i};
    auto ph = make_phantom(spec);
    for (bool normalized : {false, true}) {
      const Volume x = normalized ? preprocess(ph.healthy) : ph.healthy;
      Rng rng(static_cast<std::uint64_t>(i));
      auto out = synthesize_tumor(x, ph.mask, "a hypodense lesion in the liver", m.model, rng);
      EXPECT_EQ(out.normalized(), x.normalized());
      bool changed = false;
      for (std::size_t k = 0; k < x.data().size(); ++k) {
        if (ph.mask.data()[k]) {
          changed = changed || out.data()[k] != x.data()[k];
        } else {
          ASSERT_EQ(out.data()[k], x.data()[k]);
        }
      }
      EXPECT_TRUE(changed);
    }
  }
}

TEST(Synthesis, EmptyMaskReturnsInput) {
  auto m = tiny_models();
  m.model.ae = &m.ae;
  m.model.denoiser = &m.den;
  auto ph = make_phantom(PhantomSpec{});
  Rng rng(3);
  auto out = synthesize_tumor(ph.healthy, TumorMask(ph.healthy.shape()), "a cystic lesion", m.model, rng);
  EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), ph.healthy.data().begin()));
}

TEST(Synthesis, SameSeedSameOutput) {
  auto m = tiny_models();
  m.model.ae = &m.ae;
  m.model.denoiser = &m.den;
  auto ph = make_phantom(PhantomSpec{});
  Rng a(4), b(4);
  auto x = synthesize_tumor(ph.healthy, ph.mask, "a cystic lesion", m.model, a);
  auto y = synthesize_tumor(ph.healthy, ph.mask, "a cystic lesion", m.model, b);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Synthesis, ProvenanceRecord) {
  TumorMask m({4, 4, 4});
  m.at(1, 1, 1) = 1;
  auto s = build_schedule(10);
  auto p = synthesis_provenance(7, "a cyst", m, s, {});
  EXPECT_EQ(p.at("seed"), 7);
  EXPECT_EQ(p.at("text"), "a cyst");
  EXPECT_EQ(p.at("schedule_hash"), hex64(s.hash()));
  TumorMask m2 = m;
  m2.at(2, 2, 2) = 1;
  EXPECT_NE(p.at("mask_hash"), synthesis_provenance(7, "a cyst", m2, s, {}).at("mask_hash"));
}
