#include "tumorsynth/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"
#include "tumorsynth/nn/checkpoint.hpp"

namespace tumorsynth {

using nlohmann::json;
using nn::Graph;
using nn::Tensor;
using nn::Var;

std::uint64_t NoiseSchedule::hash() const {
  std::uint64_t h = fnv1a("schedule:" + std::to_string(T));
  return fnv1a_span(std::span<const double>(beta), h);
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta[i] = b;
    s.alpha[i] = 1.0 - b;
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(what) + ": " + nn::shape_string(a.shape) + " vs " + nn::shape_string(b.shape));
  }
}

}  // namespace

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  check_t(t, s);
  check_same(z0, eps, "noise shape");
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
  return out;
}

Tensor estimate_z0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_t(t, s);
  check_same(z_t, eps_hat, "noise estimate shape");
  const double ab = s.alpha_bar_at(t);
  if (!(ab > 0.0)) throw NumericError("alpha_bar is not positive at t=" + std::to_string(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (z_t.data[i] - b * eps_hat.data[i]) / a;
  return out;
}

double posterior_sigma(int t, const NoiseSchedule& s) {
  check_t(t, s);
  if (t == 1) return 0.0;
  const double var = s.beta_at(t) * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar_at(t));
  return std::sqrt(var);
}

Tensor posterior_step(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s, Rng* rng) {
  check_t(t, s);
  check_same(z_t, eps_hat, "noise estimate shape");
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  const double sigma = rng ? posterior_sigma(t, s) : 0.0;
  Tensor out(z_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = (z_t.data[i] - coef * eps_hat.data[i]) * inv_sqrt_alpha;
    if (sigma > 0.0) v += sigma * rng->normal();
    out.data[i] = v;
  }
  return out;
}

Tensor standard_normal(const std::vector<int>& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data) v = rng.normal();
  return t;
}

// ---------------------------------------------------------------------------

Tensor downsample_mask(const TumorMask& m, int f) {
  const auto& s = m.shape();
  if (f < 1 || s.d % f || s.h % f || s.w % f) throw ShapeError("mask extents must be divisible by f=" + std::to_string(f));
  Tensor out({1, s.d / f, s.h / f, s.w / f});
  std::size_t i = 0;
  for (int z = 0; z < s.d / f; ++z)
    for (int y = 0; y < s.h / f; ++y)
      for (int x = 0; x < s.w / f; ++x) out.data[i++] = m.at(f * z + f / 2, f * y + f / 2, f * x + f / 2) ? 1.0 : 0.0;
  return out;
}

Tensor tumor_cells(const TumorMask& m, int f) {
  const auto& s = m.shape();
  if (f < 1 || s.d % f || s.h % f || s.w % f) throw ShapeError("mask extents must be divisible by f=" + std::to_string(f));
  Tensor out({1, s.d / f, s.h / f, s.w / f});
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (m.at(z, y, x)) out.data[(static_cast<std::size_t>(z / f) * (s.h / f) + y / f) * (s.w / f) + x / f] = 1.0;
  return out;
}

Tensor LatentStats::standardize(const Tensor& z) const {
  if (z.rank() < 1 || static_cast<std::size_t>(z.dim(0)) != mean.size()) throw ShapeError("latent stats channel mismatch");
  Tensor out = z;
  const std::size_t S = z.channel_stride();
  for (std::size_t c = 0; c < mean.size(); ++c)
    for (std::size_t i = 0; i < S; ++i) out.data[c * S + i] = (z.data[c * S + i] - mean[c]) / sd[c];
  return out;
}

Tensor LatentStats::unstandardize(const Tensor& z) const {
  if (z.rank() < 1 || static_cast<std::size_t>(z.dim(0)) != mean.size()) throw ShapeError("latent stats channel mismatch");
  Tensor out = z;
  const std::size_t S = z.channel_stride();
  for (std::size_t c = 0; c < mean.size(); ++c)
    for (std::size_t i = 0; i < S; ++i) out.data[c * S + i] = z.data[c * S + i] * sd[c] + mean[c];
  return out;
}

json to_json(const LatentStats& s) { return {{"mean", s.mean}, {"sd", s.sd}}; }

LatentStats latent_stats_from_json(const json& j) {
  LatentStats s{j.at("mean").get<std::vector<double>>(), j.at("sd").get<std::vector<double>>()};
  if (s.mean.size() != s.sd.size() || s.mean.empty()) throw FormatError("latent stats need matching mean/sd arrays");
  for (double v : s.sd)
    if (!(v > 0)) throw FormatError("latent stats sd must be positive");
  return s;
}

LatentStats compute_latent_stats(const Autoencoder& ae, const std::vector<Volume>& xs) {
  if (xs.empty()) throw ContractError("latent stats need at least one volume");
  const auto C = static_cast<std::size_t>(ae.config().channels);
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  double n = 0;
  for (const auto& x : xs) {
    auto z = ae.encode(x);
    const std::size_t S = z.sites();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const double v = z.data.data[c * S + i];
        sum[c] += v;
        sq[c] += v * v;
      }
    n += static_cast<double>(S);
  }
  LatentStats s;
  for (std::size_t c = 0; c < C; ++c) {
    const double mu = sum[c] / n;
    s.mean.push_back(mu);
    s.sd.push_back(std::sqrt(std::max(sq[c] / n - mu * mu, 1e-12)));
  }
  return s;
}

// ---------------------------------------------------------------------------

void DenoiserConfig::validate() const {
  if (latent_channels < 1) throw ValidationError("denoiser latent_channels must be >= 1");
  if (widths.size() != 2) throw ValidationError("denoiser widths needs exactly two entries");
  for (int w : widths)
    if (w < 1) throw ValidationError("denoiser widths must be >= 1");
  if (time_dim < 2 || time_dim % 2) throw ValidationError("denoiser time_dim must be even and >= 2");
  if (text_dim < 1 || context_tokens < 1 || attn_dim < 1) throw ValidationError("denoiser attention sizes must be >= 1");
  schedule();
}

NoiseSchedule DenoiserConfig::schedule() const { return build_schedule(timesteps, beta_start, beta_end); }

std::uint64_t DenoiserConfig::architecture_hash() const {
  json j = to_json(*this);
  j.erase("seed");
  return fnv1a("denoiser-unet-v2:" + j.dump());
}

json to_json(const DenoiserConfig& c) {
  return {{"latent_channels", c.latent_channels}, {"widths", c.widths},       {"time_dim", c.time_dim},
          {"text_dim", c.text_dim},               {"context_tokens", c.context_tokens},
          {"attn_dim", c.attn_dim},               {"timesteps", c.timesteps},
          {"beta_start", c.beta_start},           {"beta_end", c.beta_end},
          {"input_skip", c.input_skip},           {"seed", c.seed}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.latent_channels = j.at("latent_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.time_dim = j.at("time_dim").get<int>();
  c.text_dim = j.at("text_dim").get<int>();
  c.context_tokens = j.at("context_tokens").get<int>();
  c.attn_dim = j.at("attn_dim").get<int>();
  c.timesteps = j.at("timesteps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  c.input_skip = j.at("input_skip").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Tensor timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Tensor e({dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e.data[i] = std::sin(t * freq);
    e.data[half + i] = std::cos(t * freq);
  }
  return e;
}

Denoiser::Denoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  schedule_ = cfg_.schedule();
  Rng rng(cfg_.seed);
  const int C = cfg_.latent_channels, w0 = cfg_.widths[0], w1 = cfg_.widths[1];
  const int td = cfg_.time_dim, a = cfg_.attn_dim, L = cfg_.context_tokens;
  auto conv = [&](const std::string& name, int cout, int cin, double gain) {
    params_.add_normal(name + ".w", {cout, cin, 3, 3, 3}, gain * std::sqrt(2.0 / (cin * 27.0)), rng);
    params_.add_zeros(name + ".b", {cout});
  };
  auto lin = [&](const std::string& name, int m, int n, double gain) {
    params_.add_normal(name + ".w", {m, n}, gain / std::sqrt(static_cast<double>(n)), rng);
    params_.add_zeros(name + ".b", {m});
  };
  auto res = [&](const std::string& name, int c) {
    conv(name + ".a", c, c, 1.0);
    lin(name + ".t", c, td, 1.0);
    conv(name + ".b", c, c, 0.1);
  };
  auto attn = [&](const std::string& name, int c, bool mask_bias) {
    params_.add_normal(name + ".q", {c, a}, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    params_.add_normal(name + ".k", {a, a}, 1.0 / std::sqrt(static_cast<double>(a)), rng);
    params_.add_normal(name + ".v", {a, a}, 1.0 / std::sqrt(static_cast<double>(a)), rng);
    params_.add_normal(name + ".o", {a, c}, 0.1 / std::sqrt(static_cast<double>(a)), rng);
    if (mask_bias) params_.add_normal(name + ".mbias", {1, L}, 0.1, rng);
  };

  lin("time.1", td, td, 1.0);
  lin("time.2", td, td, 1.0);
  lin("text", L * a, cfg_.text_dim, 2.0);

  conv("in", w0, 2 * C + 1, 1.0);
  res("r0", w0);
  conv("down1", w1, w0, 1.0);
  res("r1", w1);
  attn("attn1", w1, false);
  conv("down2", w1, w1, 1.0);
  res("rb", w1);
  attn("attnb", w1, true);
  conv("up1", w1, 2 * w1, 1.0);
  res("r2", w1);
  attn("attn2", w1, false);
  conv("up0", w0, w1 + w0, 1.0);
  res("r3", w0);
  conv("out", C, w0, 0.1);
}

Var Denoiser::res_block(Graph& g, Var h, Var temb, const std::string& name) {
  auto a = nn::conv3d(nn::silu(h), p(g, name + ".a.w"), p(g, name + ".a.b"), 1, 1);
  a = nn::add_channel_bias(a, nn::linear(temb, p(g, name + ".t.w"), p(g, name + ".t.b")));
  auto b = nn::conv3d(nn::silu(a), p(g, name + ".b.w"), p(g, name + ".b.b"), 1, 1);
  return nn::add(h, b);
}

Var Denoiser::cross_attention(Graph& g, Var h, Var context, const std::string& name,
                              const std::vector<double>* mask_sites, Var* increment) {
  const auto shape = h.shape();
  const int C = shape[0];
  const int N = static_cast<int>(h.value().channel_stride());
  auto x = nn::transpose(nn::reshape(h, {C, N}));  // [N, C]
  auto q = nn::matmul(x, p(g, name + ".q"));
  auto k = nn::matmul(context, p(g, name + ".k"));
  auto v = nn::matmul(context, p(g, name + ".v"));
  auto logits = nn::scale(nn::matmul(q, nn::transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg_.attn_dim)));
  if (mask_sites) {
    // tumor sites get a learned per-token offset
    Tensor m({N, 1}, *mask_sites);
    logits = nn::add(logits, nn::matmul(g.constant(std::move(m)), p(g, name + ".mbias")));
  }
  auto out = nn::reshape(nn::transpose(nn::matmul(nn::matmul(nn::softmax_rows(logits), v), p(g, name + ".o"))), shape);
  if (increment) *increment = out;
  return nn::add(h, out);
}

DenoiserOutput Denoiser::forward(Graph& g, Var z_t, const ConditionBundle& cond) {
  const std::vector<int> zs = z_t.shape();
  const int C = cfg_.latent_channels;
  if (zs.size() != 4 || zs[0] != C) {
    throw ShapeError("noisy latent " + nn::shape_string(zs) + " does not have " + std::to_string(C) + " channels");
  }
  if (zs[1] % 4 || zs[2] % 4 || zs[3] % 4) throw ShapeError("latent extents must be divisible by 4");
  if (cond.z_healthy.shape != zs) throw ShapeError("z_healthy shape " + nn::shape_string(cond.z_healthy.shape) + " != " + nn::shape_string(zs));
  if (cond.mask_latent.shape != std::vector<int>{1, zs[1], zs[2], zs[3]}) throw ShapeError("mask_latent shape mismatch");
  if (static_cast<int>(cond.text.size()) != cfg_.text_dim) throw ShapeError("text embedding has wrong dimension");
  if (cond.t < 1 || cond.t > schedule_.T) {
    throw ContractError("timestep " + std::to_string(cond.t) + " outside 1.." + std::to_string(schedule_.T));
  }

  auto t1 = nn::silu(nn::linear(g.constant(timestep_embedding(cond.t, cfg_.time_dim)), p(g, "time.1.w"), p(g, "time.1.b")));
  auto temb = nn::silu(nn::linear(t1, p(g, "time.2.w"), p(g, "time.2.b")));
  auto ctx = nn::reshape(nn::linear(g.constant(cond.text), p(g, "text.w"), p(g, "text.b")),
                         {cfg_.context_tokens, cfg_.attn_dim});

  // mask pooled to the bottleneck grid
  const int bd = zs[1] / 4, bh = zs[2] / 4, bw = zs[3] / 4;
  std::vector<double> pooled(static_cast<std::size_t>(bd) * bh * bw, 0.0);
  for (int z = 0; z < zs[1]; ++z)
    for (int y = 0; y < zs[2]; ++y)
      for (int x = 0; x < zs[3]; ++x) {
        const double m = cond.mask_latent.data[(static_cast<std::size_t>(z) * zs[2] + y) * zs[3] + x];
        pooled[(static_cast<std::size_t>(z / 4) * bh + y / 4) * bw + x / 4] += m / 64.0;
      }

  auto in = nn::concat_channels({z_t, g.constant(cond.z_healthy), g.constant(cond.mask_latent)});
  auto h0 = nn::conv3d(in, p(g, "in.w"), p(g, "in.b"), 1, 1);
  h0 = res_block(g, h0, temb, "r0");
  auto h1 = nn::conv3d(nn::silu(h0), p(g, "down1.w"), p(g, "down1.b"), 2, 1);
  h1 = res_block(g, h1, temb, "r1");
  h1 = cross_attention(g, h1, ctx, "attn1", nullptr);
  auto hb = nn::conv3d(nn::silu(h1), p(g, "down2.w"), p(g, "down2.b"), 2, 1);
  hb = res_block(g, hb, temb, "rb");
  Var text_inc;
  hb = cross_attention(g, hb, ctx, "attnb", &pooled, &text_inc);
  auto bottleneck = hb;

  auto u1 = nn::concat_channels({nn::upsample2(hb), h1});
  u1 = nn::conv3d(nn::silu(u1), p(g, "up1.w"), p(g, "up1.b"), 1, 1);
  u1 = res_block(g, u1, temb, "r2");
  u1 = cross_attention(g, u1, ctx, "attn2", nullptr);
  auto u0 = nn::concat_channels({nn::upsample2(u1), h0});
  u0 = nn::conv3d(nn::silu(u0), p(g, "up0.w"), p(g, "up0.b"), 1, 1);
  u0 = res_block(g, u0, temb, "r3");
  auto eps = nn::conv3d(nn::silu(u0), p(g, "out.w"), p(g, "out.b"), 1, 1);
  if (cfg_.input_skip) eps = nn::add(eps, nn::scale(z_t, std::sqrt(1.0 - schedule_.alpha_bar_at(cond.t))));
  return {eps, bottleneck, text_inc, std::move(pooled)};
}

Tensor Denoiser::predict_noise(const Tensor& z_t, const ConditionBundle& cond) const {
  auto& self = const_cast<Denoiser&>(*this);  // forward only reads the weights
  Graph g;
  return self.forward(g, g.constant(z_t), cond).eps.value();
}

void Denoiser::require_schedule(const NoiseSchedule& s) const {
  if (s.hash() != schedule_.hash()) {
    throw ContractError("noise schedule (T=" + std::to_string(s.T) + ") differs from the one the denoiser was built for (T=" +
                        std::to_string(schedule_.T) + ")");
  }
}

void Denoiser::zero_cross_attention() {
  for (const char* n : {"attn1.o", "attnb.o", "attn2.o"}) {
    auto& v = params_.get(n).value.data;
    std::fill(v.begin(), v.end(), 0.0);
  }
}

void Denoiser::save(const std::filesystem::path& path, const json& extra) const {
  json cfg = {{"denoiser", to_json(cfg_)}, {"architecture_hash", hex64(cfg_.architecture_hash())}, {"extra", extra}};
  nn::save_checkpoint(path, "denoiser", cfg, params_);
}

std::pair<Denoiser, json> Denoiser::load(const std::filesystem::path& path) {
  auto c = nn::load_checkpoint(path);
  if (c.kind != "denoiser") throw FormatError("checkpoint " + path.string() + " holds a " + c.kind);
  Denoiser d(denoiser_config_from_json(c.config.at("denoiser")));
  if (c.config.at("architecture_hash").get<std::string>() != hex64(d.cfg_.architecture_hash())) {
    throw FormatError("denoiser checkpoint architecture hash does not match its config");
  }
  nn::assign_parameters(d.params_, c.params);
  for (const auto& p : d.params_.all())
    for (double v : p.value.data)
      if (!std::isfinite(v)) throw CorruptionError("non-finite weight in " + p.name);
  d.trained_ = true;
  return {std::move(d), c.config.value("extra", json::object())};
}

NoisePredictor denoiser_predictor(Denoiser& d) {
  return [&d](Graph& g, Var z_t, const ConditionBundle& c) { return d.forward(g, z_t, c).eps; };
}

// ---------------------------------------------------------------------------

LdmDraw draw_ldm(const LatentSample& s, const NoiseSchedule& sched, Rng& rng, bool text_aug) {
  LdmDraw d;
  d.t = rng.uniform_int(1, sched.T);
  d.eps = standard_normal(s.z0.shape, rng);
  if (text_aug && !s.variants.variants.empty()) {
    d.text = s.variants.variants[rng.below(s.variants.variants.size())];
  } else {
    d.text = s.descriptors.cleaned_text;
  }
  return d;
}

ConditionBundle make_condition(const LatentSample& s, const std::string& text, int t) {
  auto e = embed_text(text);
  return {s.z_healthy, Tensor({static_cast<int>(e.vector.size())}, e.vector), s.mask_latent, t};
}

Var noise_error(Var eps_hat, const Tensor& eps, const LatentSample& s, double tumor_weight) {
  Graph& g = *eps_hat.g;
  if (!(tumor_weight >= 0)) throw ContractError("tumor_weight must be >= 0");
  if (tumor_weight == 0.0 || s.tumor_cells.data.empty()) return nn::mse(eps_hat, g.constant(eps));
  if (eps.shape.size() != 4 || s.tumor_cells.size() != eps.channel_stride()) {
    throw ShapeError("tumor_cells does not match the latent grid");
  }
  const std::size_t S = eps.channel_stride();
  double mean_w = 0;
  for (double c : s.tumor_cells.data) mean_w += 1.0 + tumor_weight * c;
  mean_w /= static_cast<double>(S);
  Tensor root(eps.shape);
  for (std::size_t c = 0; c < root.data.size() / S; ++c)
    for (std::size_t i = 0; i < S; ++i) root.data[c * S + i] = std::sqrt((1.0 + tumor_weight * s.tumor_cells.data[i]) / mean_w);
  auto r = nn::mul(nn::sub(eps_hat, g.constant(eps)), g.constant(std::move(root)));
  return nn::scale(nn::sum_squares(r), 1.0 / static_cast<double>(eps.size()));
}

Var ldm_loss(Graph& g, const NoisePredictor& predict, const std::vector<const LatentSample*>& batch,
             const std::vector<LdmDraw>& draws, const NoiseSchedule& sched, double tumor_weight) {
  if (batch.empty() || batch.size() != draws.size()) throw ContractError("ldm_loss needs one draw per batch item");
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& d = draws[i];
    auto zt = forward_noise(batch[i]->z0, d.t, d.eps, sched);
    auto eps_hat = predict(g, g.constant(std::move(zt)), make_condition(*batch[i], d.text, d.t));
    auto term = noise_error(eps_hat, d.eps, *batch[i], tumor_weight);
    total = total.valid() ? nn::add(total, term) : term;
  }
  return nn::scale(total, 1.0 / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------

Tensor sample_latent(const std::function<Tensor(const Tensor&, int)>& predict, const Tensor& z_T,
                     const NoiseSchedule& sched, Rng& rng, const SamplingOptions& opt) {
  Tensor z = z_T;
  for (int t = sched.T; t >= 1; --t) z = posterior_step(z, predict(z, t), t, sched, opt.deterministic ? nullptr : &rng);
  return z;
}

Volume synthesize_tumor(const Volume& x_healthy, const TumorMask& m, const std::string& report_text,
                        const SynthesisModel& model, Rng& rng, const SamplingOptions& opt) {
  if (!model.ae || !model.denoiser) throw ContractError("synthesis needs autoencoder and denoiser weights");
  if (!model.denoiser->trained() || !model.ae->codebook_initialized()) throw ContractError("synthesis needs trained weights");
  if (model.schedule.T < 1) throw ContractError("synthesis needs a noise schedule");
  model.denoiser->require_schedule(model.schedule);
  if (m.shape() != x_healthy.shape()) throw ShapeError("mask and volume shapes differ");
  if (m.empty()) return x_healthy;

  const auto& ae = *model.ae;
  const auto& den = *model.denoiser;
  const Volume x_norm = x_healthy.normalized() ? x_healthy : preprocess(x_healthy);
  const Tensor z_h = model.stats.standardize(ae.encode(apply_inverse_mask(x_norm, m)).data);
  const auto emb = embed_text(report_text, den.config().text_dim);
  ConditionBundle cond{z_h, Tensor({static_cast<int>(emb.vector.size())}, emb.vector),
                       downsample_mask(m, ae.config().f), 1};

  auto predict = [&](const Tensor& z, int t) {
    cond.t = t;
    return den.predict_noise(z, cond);
  };
  const Tensor z0 = sample_latent(predict, standard_normal(z_h.shape, rng), model.schedule, rng, opt);

  LatentTensor lt{model.stats.unstandardize(z0), ae.config().f, x_healthy.shape()};
  const Volume decoded = ae.decode(ae.quantize(lt).z_q);

  Volume out = x_healthy;
  auto dst = out.data();
  const auto src = decoded.data();
  const auto mk = m.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!mk[i]) continue;
    dst[i] = x_healthy.normalized() ? src[i] : static_cast<float>(denormalize_hu(src[i]));
  }
  return out;
}

json synthesis_provenance(std::uint64_t seed, const std::string& text, const TumorMask& m, const NoiseSchedule& s,
                          const SamplingOptions& opt) {
  const auto& sh = m.shape();
  std::uint64_t mh = fnv1a(std::to_string(sh.d) + "x" + std::to_string(sh.h) + "x" + std::to_string(sh.w));
  mh = fnv1a_span(m.data(), mh);
  return {{"seed", seed},
          {"text", text},
          {"mask_hash", hex64(mh)},
          {"schedule_hash", hex64(s.hash())},
          {"timesteps", s.T},
          {"deterministic", opt.deterministic}};
}

}  // namespace tumorsynth
