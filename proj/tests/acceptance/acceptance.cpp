// Acceptance run: one PASS/FAIL line per primary criterion, exit status 1 if any fails.
// The controllability and contrastive checks train the reference models from configs/reference.json once and
// cache the checkpoints under <build>/acceptance_cache/<config hash>/.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "gradcheck.hpp"
#include "tumorsynth/errors.hpp"
#include "tumorsynth/experiment.hpp"
#include "tumorsynth/turing.hpp"

using namespace tumorsynth;
using nlohmann::json;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

int failures = 0;

struct Outcome {
  bool pass;
  std::string detail;
};

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  failures += !o.pass;
  std::ostringstream line;
  line << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " (" << std::fixed;
  line.precision(1);
  line << secs << " s)";
  std::cout << line.str() << std::endl;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    den += b.data[i] * b.data[i];
  }
  return std::sqrt(num / den);
}

// the default schedule at T=200; shorter chains scale beta so they still end near pure noise
NoiseSchedule schedule_for(int T) {
  if (T == kDefaultTimesteps) return build_schedule();
  return build_schedule(T, std::min(kDefaultBetaStart * 200.0 / T, 0.02), std::min(kDefaultBetaEnd * 200.0 / T, 0.5));
}

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.widths = {4, 8};
  c.time_dim = 8;
  c.context_tokens = 2;
  c.attn_dim = 8;
  c.seed = 21;
  return c;
}

LatentSample latent_sample(std::vector<std::string> terms, std::uint64_t seed, int variant_seed) {
  Rng rng(seed);
  LatentSample s;
  s.z0 = standard_normal({4, 8, 8, 8}, rng);
  s.z_healthy = standard_normal({4, 8, 8, 8}, rng);
  s.mask_latent = Tensor({1, 8, 8, 8});
  for (int z = 2; z < 6; ++z)
    for (int y = 1; y < 5; ++y)
      for (int x = 3; x < 7; ++x) s.mask_latent.data[(z * 8 + y) * 8 + x] = 1.0;
  s.descriptors.organ = Organ::liver;
  s.descriptors.terms = terms;
  s.descriptors.cleaned_text = render_description(terms, Organ::liver);
  s.descriptors.report_id = "r" + std::to_string(seed);
  for (int f = 0; f < 3; ++f) s.variants.variants.push_back(render_variant(terms, Organ::liver, variant_seed + f));
  return s;
}

// --- criteria ------------------------------------------------------------------

Outcome inversion() {
  Rng rng(101);
  double worst = 0;
  int draws = 0;
  for (int T : {1, 10, 200}) {
    const auto s = schedule_for(T);
    for (int i = 0; i < 100; ++i, ++draws) {
      const int t = rng.uniform_int(1, T);
      const auto z0 = standard_normal({4, 8, 8, 8}, rng);
      const auto eps = standard_normal(z0.shape, rng);
      worst = std::max(worst, rel_l2(estimate_z0(forward_noise(z0, t, eps, s), eps, t, s), z0));
    }
  }
  return {worst < 1e-6, std::to_string(draws) + " draws over T in {1,10,200}, max rel err " + fmt(worst) + " < 1e-6"};
}

Outcome oracle_sampling() {
  const auto s = build_schedule();
  Rng rng(102);
  const auto z0 = standard_normal({4, 8, 8, 8}, rng);
  auto oracle = [&](const Tensor& z, int t) {
    Tensor e(z.shape);
    const double ab = s.alpha_bar_at(t);
    for (std::size_t i = 0; i < z.size(); ++i) e.data[i] = (z.data[i] - std::sqrt(ab) * z0.data[i]) / std::sqrt(1 - ab);
    return e;
  };
  const auto out = sample_latent(oracle, standard_normal(z0.shape, rng), s, rng, {true});
  const double err = rel_l2(out, z0);
  return {err < 1e-3, "T=200 deterministic reverse loop, rel err " + fmt(err) + " < 1e-3"};
}

Outcome gradchecks() {
  using testing::gradcheck;
  std::string detail;
  bool ok = true;
  auto record = [&](const std::string& name, const testing::GradCheckResult& r) {
    ok = ok && r.checked >= 16 && r.max_rel_error < 1e-3;
    detail += name + " " + std::to_string(r.checked) + " weights max rel " + fmt(r.max_rel_error) + "; ";
  };

  const auto sched = build_schedule();
  {
    Denoiser d(small_denoiser());
    auto a = latent_sample({"hypodense"}, 1, 0), b = latent_sample({"hyperenhancing"}, 2, 0);
    Rng rng(103);
    std::vector<LdmDraw> draws{draw_ldm(a, sched, rng, false), draw_ldm(b, sched, rng, false)};
    std::vector<const LatentSample*> batch{&a, &b};
    auto predict = denoiser_predictor(d);
    record("L_ldm", gradcheck(d.params(), [&](nn::Graph& g) { return ldm_loss(g, predict, batch, draws, sched); }, 24, 104));
  }
  {
    AEConfig c;
    c.widths = {4, 8};
    c.codebook_size = 16;
    c.res_blocks = 1;
    c.seed = 5;
    Autoencoder ae(c);
    Rng rng(105);
    std::vector<float> v(32 * 32 * 32);
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    const Volume x(Shape3{32, 32, 32}, std::move(v), {}, true);  // 8^3 latents at f=4
    ae.init_codebook({x}, rng);
    const auto frozen = ae.freeze(x);
    record("AE", gradcheck(ae.params(), [&](nn::Graph& g) { return ae.loss(g, x, &frozen).total; }, 24, 106));
  }
  {
    Denoiser d(small_denoiser());
    std::vector<LatentSample> pool{latent_sample({"hypodense"}, 3, 0), latent_sample({"hypodense"}, 4, 5),
                                   latent_sample({"hyperenhancing"}, 5, 0), latent_sample({"cystic"}, 6, 0)};
    Rng rng(107);
    std::vector<Triplet> batch{make_triplet(pool, rng, true)};
    std::vector<TripletDraw> draws{draw_triplet(batch[0], sched, rng)};
    auto branch = denoiser_branch(d);
    record("total(lambda_c=0.1)",
           gradcheck(d.params(), [&](nn::Graph& g) { return total_loss(g, branch, batch, draws, sched, 0.1).total; }, 24,
                     108));
  }
  return {ok, detail + "each >= 16 weights, < 1e-3"};
}

Outcome inpainting(const SynthesisModel& model, const PhantomData& data) {
  int calls = 0, bad = 0;
  Rng seeds(109);
  for (int i = 0; i < 50; ++i, ++calls) {
    const auto& p = data.heldout[static_cast<std::size_t>(i) % data.heldout.size()];
    const Organ organ = data.heldout_specs[static_cast<std::size_t>(i) % data.heldout.size()].organ;
    Rng rng(seeds.next_u64());
    const auto out = synthesize_tumor(p.healthy, p.mask, render_description({i % 2 ? "hypodense" : "cystic"}, organ), model, rng);
    for (std::size_t k = 0; k < out.data().size(); ++k) {
      if (!p.mask.data()[k] && out.data()[k] != p.healthy.data()[k]) {
        ++bad;
        break;
      }
    }
  }
  return {bad == 0, std::to_string(calls) + " calls, " + std::to_string(bad) + " with any changed voxel outside the mask"};
}

Outcome radiomics_oracle() {
  FILE* pipe = popen(("python3 " + std::string(TUMORSYNTH_SOURCE_DIR) + "/tests/oracles/diversity_oracle.py --json").c_str(), "r");
  if (!pipe) return {false, "could not start python3"};
  std::string out;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  if (pclose(pipe) != 0) return {false, "oracle script failed"};
  const auto j = json::parse(out);

  auto vectors = [](const json& rows) {
    std::vector<RadiomicsVector> vs;
    for (const auto& r : rows) {
      RadiomicsVector v;
      v.features = r.get<std::vector<double>>();
      for (std::size_t i = 0; i < v.features.size(); ++i) v.feature_names.push_back("f" + std::to_string(i));
      vs.push_back(v);
    }
    return vs;
  };
  const auto a = vectors(j.at("A"));
  auto pool = a;
  for (const auto& v : vectors(j.at("B"))) pool.push_back(v);
  const auto scaler = fit_scaler(pool);

  double worst = 0;
  for (auto mode : {DiversityMode::similarity_stats, DiversityMode::feature_variance}) {
    const std::string m = mode == DiversityMode::similarity_stats ? "similarity" : "feature_variance";
    for (const auto& [which, sc] : {std::pair{"own", (const FeatureScaler*)nullptr}, std::pair{"pooled", &scaler}}) {
      const auto r = diversity_stats(a, mode, sc);
      const auto& ref = j.at("results").at(std::string(which) + " " + m);
      worst = std::max({worst, std::abs(r.mv - ref.at("mv").get<double>()), std::abs(r.sd - ref.at("sd").get<double>())});
    }
  }

  // varied vs fixed descriptor phantom sets, same geometry sampler
  PhantomSetOptions varied;
  varied.count = 40;
  varied.organs = {Organ::liver};
  varied.seed = 110;
  auto fixed = varied;
  fixed.profiles = {{"hypodense"}};
  std::map<std::string, std::vector<RadiomicsSample>> sets;
  for (const auto& [name, opt] : {std::pair{"varied", varied}, std::pair{"fixed", fixed}}) {
    const auto specs = sample_phantom_specs(opt);
    const auto ph = make_phantoms(specs);
    for (std::size_t i = 0; i < ph.size(); ++i) sets[name].push_back({ph[i].volume, ph[i].mask, specs[i].organ});
  }
  const auto reports = compare_methods(sets, DiversityMode::similarity_stats);
  double mv_varied = 0, mv_fixed = 0;
  for (const auto& r : reports) (r.method_name == "varied" ? mv_varied : mv_fixed) = r.mv;
  return {worst <= 1e-12 && mv_varied > mv_fixed,
          "both modes vs python oracle max |diff| " + fmt(worst) + " <= 1e-12; similarity MV varied " + fmt(mv_varied) +
              " > fixed " + fmt(mv_fixed) + " (40 each)"};
}

Outcome turing_arithmetic() {
  std::vector<TuringCase> cases;
  int n = 0;
  for (auto src : kAllSources)
    for (int i = 0; i < 20; ++i) cases.push_back({"c" + std::to_string(n++), Organ::liver, SizeBucket::small, src, "v", "m", ""});
  TuringSession s;
  s.session_id = "scripted";
  std::map<CaseSource, int> seen;
  for (const auto& c : cases) {
    const int k = seen[c.source]++;
    Verdict v = Verdict::synthetic;
    if (c.source == CaseSource::real) v = k < 6 ? Verdict::synthetic : Verdict::real;
    if (c.source == CaseSource::method_A) v = k < 12 ? Verdict::real : Verdict::synthetic;
    s.order.push_back(c.case_id);
    s.judgments[c.case_id] = {c.case_id, v, 0};
  }
  const auto r = error_report({s}, cases, {"method_A", "method_B"});
  const double scripted = r.cells.at(0).error_rate;

  std::map<CaseSource, std::vector<CandidateCase>> pools;
  for (auto src : kAllSources)
    for (double d : {10.0, 30.0, 60.0})
      for (int i = 0; i < 20; ++i) pools[src].push_back({"v", "m", Organ::liver, d, "report " + std::to_string(i)});
  const auto set = assemble_case_set(pools, 20, {Organ::liver}, 111);
  const double random = simulate_random_readers(set, 1000, 112);
  return {scripted == 45.0 && std::abs(random - 50.0) <= 5.0,
          "scripted session " + fmt(scripted) + "% (exactly 45.0), 1000 random readers " + fmt(random) + "% (50 +- 5)"};
}

Outcome text_pipeline() {
  MockLMClient client;
  int terms = 0, bad = 0;
  for (Organ o : kAllOrgans) {
    for (const auto* e : default_vocabulary().for_organ(o)) {
      ++terms;
      DescriptorSet d;
      d.organ = o;
      d.terms = {e->phrase};
      d.cleaned_text = render_description(d.terms, o);
      const auto vs = generate_variants(d, 100, client);
      bool ok = vs.variants.size() == 100;
      for (const auto& v : vs.variants) ok = ok && v.find(e->phrase) != std::string::npos;
      ok = ok && validate_similarity(d.cleaned_text, d.cleaned_text).score == 1.0;
      bad += !ok;
    }
  }
  return {bad == 0 && terms > 0, std::to_string(terms) + " vocabulary terms x 100 variants, " + std::to_string(bad) +
                                     " failing (count, term containment or self-score 1.0)"};
}

Outcome failure_mining() {
  const Shape3 grid{8, 8, 8};
  MiningOptions o;
  o.patch = grid;
  const Volume flat(grid);
  auto box = [&](int z0, int z1, int y0, int y1, int x0, int x1) {
    TumorMask m(grid);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m.at(z, y, x) = 1;
    return m;
  };
  int ok = 0;
  // perfect prediction
  ok += mine_failures(box(2, 4, 2, 4, 2, 4), box(2, 4, 2, 4, 2, 4), flat, o).empty();
  // one 10-voxel spurious blob plus a 3-voxel speck below min_voxels
  auto pred = box(1, 1, 1, 2, 1, 5);
  const auto speck = box(6, 6, 6, 6, 5, 7);
  for (std::size_t i = 0; i < pred.data().size(); ++i) pred.data()[i] |= speck.data()[i];
  auto c = mine_failures(pred, TumorMask(grid), flat, o);
  ok += c.size() == 1 && c[0].kind == FailureKind::false_positive && c[0].voxels == 10 && c[0].mask == box(1, 1, 1, 2, 1, 5);
  // half-covered 32-voxel truth
  c = mine_failures(box(2, 3, 2, 5, 2, 3), box(2, 3, 2, 5, 2, 5), flat, o);
  ok += c.size() == 1 && c[0].kind == FailureKind::false_negative && c[0].voxels == 16 && c[0].mask == box(2, 3, 2, 5, 4, 5);
  return {ok == 3, std::to_string(ok) + "/3 golden cases exact"};
}

// --- reference models ------------------------------------------------------------

struct Reference {
  RunConfig cfg;
  PhantomData data;
  std::unique_ptr<Autoencoder> ae;
  DiffusionStage stage;
  SynthesisModel model;
};

std::unique_ptr<Reference> reference_models() {
  auto r = std::make_unique<Reference>();
  r->cfg = load_run_config(fs::path(TUMORSYNTH_SOURCE_DIR) / "configs" / "reference.json");
  const fs::path cache = fs::path(TUMORSYNTH_BINARY_DIR) / "acceptance_cache" / config_hash(r->cfg);
  fs::create_directories(cache);
  r->data = make_phantom_data(r->cfg);
  const auto t0 = std::chrono::steady_clock::now();
  // always continue from what is on disk, so a fresh run and a cached run see the same weights
  if (!fs::exists(cache / "ae.ckpt")) train_ae_stage(r->cfg, r->data).save(cache / "ae.ckpt");
  r->ae = std::make_unique<Autoencoder>(Autoencoder::load(cache / "ae.ckpt"));
  if (!fs::exists(cache / "denoiser.ckpt")) {
    const auto trained = train_diffusion_stage(r->cfg, *r->ae, r->data);
    trained.denoiser->save(cache / "denoiser.ckpt", diffusion_extra(trained));
  }
  r->stage = prepare_diffusion_stage(r->cfg, *r->ae, r->data);
  attach_denoiser(r->stage, cache / "denoiser.ckpt");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "reference models ready in " << static_cast<int>(secs) << " s (cache " << cache.string() << ")" << std::endl;
  r->model = {r->ae.get(), r->stage.denoiser.get(), r->stage.stats, r->stage.schedule};
  return r;
}

}  // namespace

int main() {
  criterion("eps-inversion", inversion);
  criterion("oracle-sampling", oracle_sampling);
  criterion("gradient-checks", gradchecks);
  criterion("radiomics-oracle", radiomics_oracle);
  criterion("turing-arithmetic", turing_arithmetic);
  criterion("text-pipeline", text_pipeline);
  criterion("failure-mining", failure_mining);

  std::unique_ptr<Reference> ref;
  try {
    ref = reference_models();
  } catch (const std::exception& e) {
    std::cout << "reference training failed: " << e.what() << std::endl;
  }
  auto needs_ref = [&](const std::function<Outcome()>& f) {
    return [&ref, f]() -> Outcome { return ref ? f() : Outcome{false, "no reference models"}; };
  };
  criterion("inpainting-contract", needs_ref([&] { return inpainting(ref->model, ref->data); }));
  criterion("text-controllability", needs_ref([&] {
              const auto c = controllability(ref->model, ref->data, ref->cfg.controllability_pairs, ref->cfg.stage_seed(7));
              return Outcome{c.wins >= 16, std::to_string(c.wins) + "/" + std::to_string(c.pairs.size()) +
                                               " paired seeds with hypodense mean below hyperenhancing (>= 16)"};
            }));
  criterion("contrastive-effect", needs_ref([&] {
              const double lc = ref->cfg.diffusion.lambda_c;
              const auto fd = heldout_feature_distances(ref->cfg, ref->stage);
              return Outcome{lc == 0.1 && fd.intra < fd.inter, "lambda_c " + fmt(lc) + ", " + std::to_string(fd.triplets) +
                                                                  " held-out triplets, intra " + fmt(fd.intra) +
                                                                  " < inter " + fmt(fd.inter)};
            }));

  std::cout << (failures ? "ACCEPTANCE FAILED: " + std::to_string(failures) + " criteria" : std::string("ACCEPTANCE PASSED"))
            << std::endl;
  return failures ? 1 : 0;
}
