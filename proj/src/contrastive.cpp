#include "tumorsynth/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "tumorsynth/errors.hpp"

namespace tumorsynth {

using nlohmann::json;
using nn::Graph;
using nn::Tensor;
using nn::Var;

bool same_terms(const DescriptorSet& a, const DescriptorSet& b) {
  return std::set<std::string>(a.terms.begin(), a.terms.end()) == std::set<std::string>(b.terms.begin(), b.terms.end());
}

namespace {

std::string pick_text(const LatentSample& s, Rng& rng, bool text_aug) {
  if (text_aug && !s.variants.variants.empty()) return s.variants.variants[rng.below(s.variants.variants.size())];
  return s.descriptors.cleaned_text;
}

}  // namespace

Triplet make_triplet(const std::vector<LatentSample>& pool, Rng& rng, bool text_aug) {
  const std::size_t n = pool.size();
  if (n < 3) throw ContractError("triplets need at least three samples");
  // anchors with at least one positive and one negative
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < n; ++i) {
    bool pos = false, neg = false;
    for (std::size_t j = 0; j < n && !(pos && neg); ++j) {
      if (j == i) continue;
      if (same_terms(pool[i].descriptors, pool[j].descriptors)) pos = true;
      else neg = true;
    }
    if (pos && neg) anchors.push_back(i);
  }
  if (anchors.empty()) throw ContractError("no sample has both a same-terms partner and a different-terms partner");

  const std::size_t a = anchors[rng.below(anchors.size())];
  std::vector<std::size_t> pos, neg;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == a) continue;
    (same_terms(pool[a].descriptors, pool[j].descriptors) ? pos : neg).push_back(j);
  }
  const std::size_t p = pos[rng.below(pos.size())];
  const std::size_t q = neg[rng.below(neg.size())];

  Triplet t;
  t.anchor = {&pool[a], pick_text(pool[a], rng, text_aug)};
  t.positive = {&pool[p], pick_text(pool[p], rng, text_aug)};
  t.negative = {&pool[a], pick_text(pool[q], rng, text_aug)};
  check_triplet(t);
  return t;
}

void check_triplet(const Triplet& t) {
  if (!t.anchor.sample || !t.positive.sample || !t.negative.sample) throw ContractError("triplet has an empty slot");
  if (t.positive.sample == t.anchor.sample) throw ContractError("positive must use a different volume");
  if (t.negative.sample != t.anchor.sample) throw ContractError("negative must share the anchor volume and mask");
  if (!same_terms(t.anchor.sample->descriptors, t.positive.sample->descriptors)) {
    throw ContractError("positive descriptor terms differ from the anchor's");
  }
  if (t.negative.text == t.anchor.text) throw ContractError("negative report equals the anchor report");
  auto terms_of = [](const TripletMember& m) {
    auto found = scan_vocabulary(m.text, m.sample->descriptors.organ, default_vocabulary());
    return std::set<std::string>(found.begin(), found.end());
  };
  if (terms_of(t.negative) == std::set<std::string>(t.anchor.sample->descriptors.terms.begin(),
                                                    t.anchor.sample->descriptors.terms.end())) {
    throw ContractError("negative report carries the anchor's descriptor terms");
  }
}

json to_json(const Triplet& t) {
  auto member = [](const TripletMember& m) {
    return json{{"report_id", m.sample->descriptors.report_id}, {"terms", m.sample->descriptors.terms}, {"text", m.text}};
  };
  return {{"anchor", member(t.anchor)}, {"positive", member(t.positive)}, {"negative", member(t.negative)}};
}

// ---------------------------------------------------------------------------

Var extract_tumor_feature(Var activations, const std::vector<double>& site_weights) {
  double w = 0;
  for (double v : site_weights) w += v;
  if (!(w > 0)) throw ContractError("tumor mask is empty at latent resolution; magnify the mask first");
  return nn::l2_normalize(nn::weighted_channel_mean(activations, site_weights));
}

TumorFeature extract_tumor_feature(const Tensor& activations, const std::vector<double>& site_weights, std::string source) {
  Graph g;
  auto f = extract_tumor_feature(g.constant(activations), site_weights);
  const auto& v = f.value().data;
  return {std::vector<double>(v.begin(), v.end()), std::move(source)};
}

namespace {

void check_normalized(const TumorFeature& f) {
  double n2 = 0;
  for (double v : f.vector) {
    if (!std::isfinite(v)) throw ContractError("feature has non-finite entries");
    n2 += v * v;
  }
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw ContractError("feature is not L2-normalized");
}

double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("feature dimensions differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

ContrastiveLosses contrastive_losses(const TumorFeature& fa, const TumorFeature& fp, const TumorFeature& fn,
                                     double margin) {
  if (!(margin > 0)) throw ContractError("margin must be positive");
  check_normalized(fa);
  check_normalized(fp);
  check_normalized(fn);
  ContrastiveLosses l;
  l.same = dist2(fa.vector, fp.vector);
  l.different = std::min(dist2(fa.vector, fn.vector), margin);
  l.contrastive = l.same - l.different;
  return l;
}

ContrastiveVars contrastive_losses(Var fa, Var fp, Var fn, double margin) {
  if (!(margin > 0)) throw ContractError("margin must be positive");
  ContrastiveVars v;
  v.same = nn::sum_squares(nn::sub(fa, fp));
  v.different = nn::min_const(nn::sum_squares(nn::sub(fa, fn)), margin);
  v.contrastive = nn::sub(v.same, v.different);
  return v;
}

BranchModel denoiser_branch(Denoiser& d) {
  return [&d](Graph& g, Var z_t, const ConditionBundle& c) {
    auto out = d.forward(g, z_t, c);
    return BranchOutput{out.eps, extract_tumor_feature(out.bottleneck_text, out.bottleneck_weights)};
  };
}

TripletDraw draw_triplet(const Triplet& tr, const NoiseSchedule& sched, Rng& rng) {
  TripletDraw d;
  d.t = rng.uniform_int(1, sched.T);
  d.eps = standard_normal(tr.anchor.sample->z0.shape, rng);
  return d;
}

TotalLossTerms total_loss(Graph& g, const BranchModel& model, const std::vector<Triplet>& batch,
                          const std::vector<TripletDraw>& draws, const NoiseSchedule& sched, double lambda_c,
                          double margin, double tumor_weight) {
  if (batch.empty() || batch.size() != draws.size()) throw ContractError("total_loss needs one draw per triplet");
  if (!(lambda_c >= 0)) throw ContractError("lambda_c must be >= 0");
  Var ldm, con;
  double same = 0, diff = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& tr = batch[i];
    const auto& d = draws[i];
    const Tensor zt_a = forward_noise(tr.anchor.sample->z0, d.t, d.eps, sched);
    const Tensor zt_p = forward_noise(tr.positive.sample->z0, d.t, d.eps, sched);
    auto oa = model(g, g.constant(zt_a), make_condition(*tr.anchor.sample, tr.anchor.text, d.t));
    auto op = model(g, g.constant(zt_p), make_condition(*tr.positive.sample, tr.positive.text, d.t));
    auto on = model(g, g.constant(zt_a), make_condition(*tr.negative.sample, tr.negative.text, d.t));
    auto l = nn::scale(nn::add(noise_error(oa.eps, d.eps, *tr.anchor.sample, tumor_weight),
                               noise_error(op.eps, d.eps, *tr.positive.sample, tumor_weight)),
                       0.5);
    auto c = contrastive_losses(oa.feature, op.feature, on.feature, margin);
    same += c.same.value().data[0];
    diff += c.different.value().data[0];
    ldm = ldm.valid() ? nn::add(ldm, l) : l;
    con = con.valid() ? nn::add(con, c.contrastive) : c.contrastive;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  TotalLossTerms t;
  ldm = nn::scale(ldm, inv);
  t.ldm = ldm.value().data[0];
  t.same = same * inv;
  t.different = diff * inv;
  t.total = lambda_c == 0.0 ? ldm : nn::add(ldm, nn::scale(con, lambda_c * inv));
  return t;
}

// ---------------------------------------------------------------------------

DiffusionMetrics train_diffusion(Denoiser& d, const std::vector<LatentSample>& data, const NoiseSchedule& sched,
                                 const DiffusionTrainOptions& opt) {
  DiffusionMetrics m;
  if (opt.steps <= 0) return m;
  if (data.empty()) throw ContractError("diffusion training needs a nonempty dataset");
  if (opt.batch < 1) throw ValidationError("batch must be >= 1");
  d.require_schedule(sched);
  Rng rng(opt.seed);
  nn::Adam adam({opt.lr, 0.9, 0.999, 1e-8, opt.grad_clip});
  const bool contrastive = opt.lambda_c > 0.0;
  auto branch = denoiser_branch(d);
  auto predictor = denoiser_predictor(d);

  for (long step = 0; step < opt.steps; ++step) {
    d.params().zero_grad();
    Graph g;
    Var loss;
    double ldm = 0, con = 0;
    if (contrastive) {
      std::vector<Triplet> batch;
      std::vector<TripletDraw> draws;
      for (int b = 0; b < opt.batch; ++b) {
        batch.push_back(make_triplet(data, rng, opt.text_aug));
        draws.push_back(draw_triplet(batch.back(), sched, rng));
      }
      auto t = total_loss(g, branch, batch, draws, sched, opt.lambda_c, opt.margin, opt.tumor_weight);
      loss = t.total;
      ldm = t.ldm;
      con = t.same - t.different;
    } else {
      std::vector<const LatentSample*> batch;
      std::vector<LdmDraw> draws;
      for (int b = 0; b < opt.batch; ++b) {
        batch.push_back(&data[rng.below(data.size())]);
        draws.push_back(draw_ldm(*batch.back(), sched, rng, opt.text_aug));
      }
      loss = ldm_loss(g, predictor, batch, draws, sched, opt.tumor_weight);
      ldm = loss.value().data[0];
    }
    const double l = loss.value().data[0];
    if (!std::isfinite(l)) throw NumericError("diffusion loss became non-finite at step " + std::to_string(step));
    g.backward(loss);
    adam.step(d.params());
    m.loss.push_back(l);
    m.ldm.push_back(ldm);
    m.contrastive.push_back(con);
    if (opt.log_every > 0 && (step + 1) % opt.log_every == 0) {
      std::cerr << "diffusion step " << step + 1 << " loss " << l << " ldm " << ldm << " contrastive " << con << "\n";
    }
  }
  d.mark_trained();
  return m;
}

namespace {

std::vector<double> branch_feature(Denoiser& d, const LatentSample& s, const std::string& text, const Tensor& z_t,
                                   int t) {
  Graph g;
  auto out = d.forward(g, g.constant(z_t), make_condition(s, text, t));
  auto f = extract_tumor_feature(out.bottleneck_text, out.bottleneck_weights);
  return {f.value().data.begin(), f.value().data.end()};
}

std::vector<double> generated_feature(Denoiser& d, const LatentSample& s, const std::string& text,
                                      const NoiseSchedule& sched, std::uint64_t seed) {
  Rng rng(seed);
  auto cond = make_condition(s, text, 1);
  auto predict = [&](const Tensor& z, int t) {
    cond.t = t;
    return d.predict_noise(z, cond);
  };
  const Tensor z0 = sample_latent(predict, standard_normal(s.z0.shape, rng), sched, rng);
  return branch_feature(d, s, text, z0, 1);
}

}  // namespace

FeatureDistances evaluate_feature_distances(Denoiser& d, const std::vector<LatentSample>& pool,
                                            const NoiseSchedule& sched, int n, std::uint64_t seed, int t,
                                            bool full_generation) {
  if (n < 1) throw ContractError("need at least one triplet");
  d.require_schedule(sched);
  Rng rng(seed);
  const int tt = t > 0 ? t : std::max(1, sched.T / 2);
  FeatureDistances r;
  for (int i = 0; i < n; ++i) {
    const Triplet tr = make_triplet(pool, rng, true);
    std::vector<double> fa, fp, fn;
    if (full_generation) {
      const std::uint64_t s = rng.next_u64();
      fa = generated_feature(d, *tr.anchor.sample, tr.anchor.text, sched, s);
      fp = generated_feature(d, *tr.positive.sample, tr.positive.text, sched, s);
      fn = generated_feature(d, *tr.negative.sample, tr.negative.text, sched, s);
    } else {
      const Tensor eps = standard_normal(tr.anchor.sample->z0.shape, rng);
      const Tensor za = forward_noise(tr.anchor.sample->z0, tt, eps, sched);
      const Tensor zp = forward_noise(tr.positive.sample->z0, tt, eps, sched);
      fa = branch_feature(d, *tr.anchor.sample, tr.anchor.text, za, tt);
      fp = branch_feature(d, *tr.positive.sample, tr.positive.text, zp, tt);
      fn = branch_feature(d, *tr.negative.sample, tr.negative.text, za, tt);
    }
    r.intra += dist2(fa, fp);
    r.inter += dist2(fa, fn);
  }
  r.intra /= n;
  r.inter /= n;
  r.triplets = n;
  return r;
}

}  // namespace tumorsynth
