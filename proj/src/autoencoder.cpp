#include "tumorsynth/autoencoder.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/nn/checkpoint.hpp"

namespace tumorsynth {

using nlohmann::json;
using nn::Graph;
using nn::Tensor;
using nn::Var;

int AEConfig::levels() const {
  int l = 0;
  for (int v = f; v > 1; v >>= 1) ++l;
  return l;
}

void AEConfig::validate() const {
  if (f < 1 || (f & (f - 1)) != 0) throw ValidationError("autoencoder f must be a power of two");
  if (channels < 1 || codebook_size < 2 || res_blocks < 0) throw ValidationError("autoencoder counts out of range");
  if (static_cast<int>(widths.size()) != std::max(levels(), 1)) {
    throw ValidationError("autoencoder widths need one entry per downsampling level (" + std::to_string(levels()) + ")");
  }
  for (int w : widths)
    if (w < 1) throw ValidationError("autoencoder widths must be >= 1");
  if (!(beta >= 0)) throw ValidationError("commitment weight must be >= 0");
}

json to_json(const AEConfig& c) {
  return {{"f", c.f},           {"channels", c.channels}, {"codebook_size", c.codebook_size},
          {"widths", c.widths}, {"res_blocks", c.res_blocks}, {"beta", c.beta},
          {"seed", c.seed}};
}

AEConfig ae_config_from_json(const json& j) {
  AEConfig c;
  c.f = j.at("f").get<int>();
  c.channels = j.at("channels").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.res_blocks = j.at("res_blocks").get<int>();
  c.beta = j.at("beta").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Tensor volume_to_tensor(const Volume& v) {
  const auto& s = v.shape();
  Tensor t({1, s.d, s.h, s.w});
  std::copy(v.data().begin(), v.data().end(), t.data.begin());
  return t;
}

Volume tensor_to_volume(const Tensor& t, Spacing3 spacing, bool normalized) {
  if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError("expected a single-channel [1,D,H,W] tensor");
  std::vector<float> d(t.data.begin(), t.data.end());
  return Volume({t.dim(1), t.dim(2), t.dim(3)}, std::move(d), spacing, normalized);
}

QuantizeResult quantize(const LatentTensor& z, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(1) != z.channels()) {
    throw ShapeError("codebook " + nn::shape_string(codebook.shape) + " does not match latent channels " +
                     std::to_string(z.channels()));
  }
  const int K = codebook.dim(0), C = z.channels();
  const std::size_t S = z.sites();
  QuantizeResult r;
  r.z_q = z;
  r.indices.resize(S);
  double loss = 0;
  for (std::size_t s = 0; s < S; ++s) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      double d = 0;
      for (int c = 0; c < C; ++c) {
        const double diff = z.data.data[c * S + s] - codebook.data[static_cast<std::size_t>(k) * C + c];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    r.indices[s] = best;
    for (int c = 0; c < C; ++c) r.z_q.data.data[c * S + s] = codebook.data[static_cast<std::size_t>(best) * C + c];
    loss += best_d;
  }
  // Both terms share a value; they differ only in where the gradient stops.
  r.codebook_loss = r.commitment_loss = loss / static_cast<double>(S);
  return r;
}

// ---------------------------------------------------------------------------

Autoencoder::Autoencoder(AEConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  auto conv = [&](const std::string& name, int cout, int cin, int k, double gain) {
    const double fan_in = static_cast<double>(cin) * k * k * k;
    params_.add_normal(name + ".w", {cout, cin, k, k, k}, gain * std::sqrt(2.0 / fan_in), rng);
    params_.add_zeros(name + ".b", {cout});
  };
  const int L = cfg_.levels();
  const int top = cfg_.widths.back();
  int cin = 1;
  for (int l = 0; l < L; ++l) {
    conv("enc.down" + std::to_string(l), cfg_.widths[l], cin, 3, 1.0);
    cin = cfg_.widths[l];
  }
  if (L == 0) {
    conv("enc.in", top, 1, 3, 1.0);
  }
  for (int r = 0; r < cfg_.res_blocks; ++r) {
    conv("enc.res" + std::to_string(r) + ".a", top, top, 3, 1.0);
    conv("enc.res" + std::to_string(r) + ".b", top, top, 3, 0.1);
  }
  conv("enc.out", cfg_.channels, top, 3, 0.5);

  conv("dec.in", top, cfg_.channels, 3, 1.0);
  for (int r = 0; r < cfg_.res_blocks; ++r) {
    conv("dec.res" + std::to_string(r) + ".a", top, top, 3, 1.0);
    conv("dec.res" + std::to_string(r) + ".b", top, top, 3, 0.1);
  }
  for (int l = L - 1; l >= 0; --l) {
    const int cout = l == 0 ? 1 : cfg_.widths[l - 1];
    conv("dec.up" + std::to_string(l), 8 * cout, cfg_.widths[l], 3, l == 0 ? 0.3 : 1.0);
  }
  if (L == 0) conv("dec.out", 1, top, 3, 0.3);
  for (auto& b : params_.get(L == 0 ? "dec.out.b" : "dec.up0.b").value.data) b = 0.5;

  // Placeholder rows until init_codebook sees data; distinct by construction.
  params_.add_normal("codebook", {cfg_.codebook_size, cfg_.channels}, 1.0, rng);
}

void Autoencoder::check_input(const Volume& x) const {
  if (!x.normalized()) throw ContractError("autoencoder input must be normalized to [0,1]");
  const auto& s = x.shape();
  if (s.d % cfg_.f || s.h % cfg_.f || s.w % cfg_.f) {
    throw ShapeError("input extents must be divisible by f=" + std::to_string(cfg_.f));
  }
}

Var Autoencoder::encode_graph(Graph& g, Var x) {
  const int L = cfg_.levels();
  Var h = x;
  for (int l = 0; l < L; ++l) {
    const std::string n = "enc.down" + std::to_string(l);
    h = nn::silu(nn::conv3d(h, p(g, n + ".w"), p(g, n + ".b"), 2, 1));
  }
  if (L == 0) h = nn::silu(nn::conv3d(h, p(g, "enc.in.w"), p(g, "enc.in.b"), 1, 1));
  for (int r = 0; r < cfg_.res_blocks; ++r) {
    const std::string n = "enc.res" + std::to_string(r);
    auto a = nn::silu(nn::conv3d(h, p(g, n + ".a.w"), p(g, n + ".a.b"), 1, 1));
    h = nn::add(h, nn::conv3d(a, p(g, n + ".b.w"), p(g, n + ".b.b"), 1, 1));
  }
  return nn::conv3d(nn::silu(h), p(g, "enc.out.w"), p(g, "enc.out.b"), 1, 1);
}

Var Autoencoder::decode_graph(Graph& g, Var z) {
  const int L = cfg_.levels();
  Var h = nn::conv3d(z, p(g, "dec.in.w"), p(g, "dec.in.b"), 1, 1);
  for (int r = 0; r < cfg_.res_blocks; ++r) {
    const std::string n = "dec.res" + std::to_string(r);
    auto a = nn::silu(nn::conv3d(nn::silu(h), p(g, n + ".a.w"), p(g, n + ".a.b"), 1, 1));
    h = nn::add(h, nn::conv3d(a, p(g, n + ".b.w"), p(g, n + ".b.b"), 1, 1));
  }
  for (int l = L - 1; l >= 0; --l) {
    const std::string n = "dec.up" + std::to_string(l);
    h = nn::shuffle_up2(nn::conv3d(nn::silu(h), p(g, n + ".w"), p(g, n + ".b"), 1, 1));
  }
  if (L == 0) h = nn::conv3d(nn::silu(h), p(g, "dec.out.w"), p(g, "dec.out.b"), 1, 1);
  return nn::clamp(h, 0.0, 1.0);
}

LatentTensor Autoencoder::encode(const Volume& x) const {
  check_input(x);
  auto& self = const_cast<Autoencoder&>(*this);  // forward pass only reads the weights
  Graph g;
  LatentTensor z;
  z.data = self.encode_graph(g, g.constant(volume_to_tensor(x))).value();
  z.f = cfg_.f;
  z.source_shape = x.shape();
  return z;
}

Volume Autoencoder::decode(const LatentTensor& z_q) const {
  if (z_q.data.rank() != 4 || z_q.channels() != cfg_.channels) {
    throw ShapeError("latent " + nn::shape_string(z_q.data.shape) + " does not match " +
                     std::to_string(cfg_.channels) + " channels");
  }
  auto& self = const_cast<Autoencoder&>(*this);
  Graph g;
  const auto out = self.decode_graph(g, g.constant(z_q.data)).value();
  return tensor_to_volume(out, {}, true);
}

Volume Autoencoder::reconstruct(const Volume& x) const {
  auto v = decode(quantize(encode(x)).z_q);
  return Volume(v.shape(), std::vector<float>(v.data().begin(), v.data().end()), x.spacing(), true);
}

FrozenQuantization Autoencoder::freeze(const Volume& x) const {
  auto z = encode(x);
  auto q = quantize(z);
  return {q.indices, z.data, q.z_q.data};
}

AELossTerms Autoencoder::loss(Graph& g, const Volume& x, const FrozenQuantization* frozen) {
  check_input(x);
  auto xt = g.constant(volume_to_tensor(x));
  auto z = encode_graph(g, xt);
  const auto& zv = z.value();
  const std::vector<int> spatial{zv.dim(1), zv.dim(2), zv.dim(3)};
  const double S = static_cast<double>(zv.channel_stride());

  std::vector<int> idx;
  Tensor z_fixed, e_fixed;
  if (frozen) {
    idx = frozen->indices;
    z_fixed = frozen->z;
    e_fixed = frozen->e;
  } else {
    LatentTensor lt{zv, cfg_.f, x.shape()};
    auto q = tumorsynth::quantize(lt, codebook());
    idx = q.indices;
    z_fixed = zv;
    e_fixed = q.z_q.data;
  }
  auto e = nn::gather_rows(p(g, "codebook"), idx, spatial);
  auto codebook_term = nn::scale(nn::sum_squares(nn::sub(e, g.constant(z_fixed))), 1.0 / S);
  auto commit_term = nn::scale(nn::sum_squares(nn::sub(z, g.constant(e_fixed))), 1.0 / S);
  Tensor delta = e_fixed;
  for (std::size_t i = 0; i < delta.size(); ++i) delta.data[i] -= z_fixed.data[i];
  auto z_st = nn::add_const(z, delta);  // forward value e, gradient of identity
  auto recon = nn::mse(decode_graph(g, z_st), xt);

  AELossTerms t;
  t.total = nn::add(recon, nn::add(codebook_term, nn::scale(commit_term, cfg_.beta)));
  t.reconstruction = recon.value().data[0];
  t.codebook = codebook_term.value().data[0];
  t.commitment = commit_term.value().data[0];
  return t;
}

void Autoencoder::init_codebook(const std::vector<Volume>& samples, Rng& rng) {
  if (samples.empty()) throw ContractError("codebook init needs samples");
  std::vector<std::vector<double>> sites;
  for (const auto& x : samples) {
    auto z = encode(x);
    const std::size_t S = z.sites();
    for (std::size_t s = 0; s < S; ++s) {
      std::vector<double> v(static_cast<std::size_t>(z.channels()));
      for (int c = 0; c < z.channels(); ++c) v[c] = z.data.data[c * S + s];
      sites.push_back(std::move(v));
    }
  }
  auto& cb = params_.get("codebook").value;
  const int K = cb.dim(0), C = cb.dim(1);
  double sd = 0, mu = 0;
  for (const auto& v : sites)
    for (double x : v) mu += x;
  mu /= static_cast<double>(sites.size() * C);
  for (const auto& v : sites)
    for (double x : v) sd += (x - mu) * (x - mu);
  sd = std::sqrt(sd / static_cast<double>(sites.size() * C));
  const double jitter = 0.01 * std::max(sd, 1e-3);
  for (int k = 0; k < K; ++k) {
    const auto& v = sites[rng.below(sites.size())];
    for (int c = 0; c < C; ++c) cb.data[static_cast<std::size_t>(k) * C + c] = v[c] + jitter * rng.normal();
  }
  codebook_initialized_ = true;
}

void Autoencoder::save(const std::filesystem::path& path) const {
  nn::save_checkpoint(path, "autoencoder", to_json(cfg_), params_);
}

Autoencoder Autoencoder::load(const std::filesystem::path& path) {
  auto c = nn::load_checkpoint(path);
  if (c.kind != "autoencoder") throw FormatError("checkpoint " + path.string() + " holds a " + c.kind);
  Autoencoder ae(ae_config_from_json(c.config));
  nn::assign_parameters(ae.params_, c.params);
  ae.codebook_initialized_ = true;
  return ae;
}

// ---------------------------------------------------------------------------

AEMetrics train_autoencoder(Autoencoder& ae, const std::vector<Volume>& dataset, const AETrainOptions& opt) {
  AEMetrics m;
  if (opt.steps <= 0) return m;
  if (dataset.empty()) throw ContractError("autoencoder training needs a nonempty dataset");
  Rng rng(opt.seed);
  if (!ae.codebook_initialized()) {
    std::vector<Volume> init;
    for (std::size_t i = 0; i < std::min<std::size_t>(dataset.size(), 8); ++i) init.push_back(dataset[i]);
    auto init_rng = rng.fork(1);
    ae.init_codebook(init, init_rng);
  }
  nn::Adam adam({opt.lr, 0.9, 0.999, 1e-8, opt.grad_clip});
  for (long step = 0; step < opt.steps; ++step) {
    const auto& x = dataset[rng.below(dataset.size())];
    ae.params().zero_grad();
    Graph g;
    auto terms = ae.loss(g, x);
    const double l = terms.total.value().data[0];
    if (!std::isfinite(l)) {
      throw NumericError("autoencoder loss became non-finite at step " + std::to_string(step) +
                         " (recon " + std::to_string(terms.reconstruction) + ", codebook " +
                         std::to_string(terms.codebook) + ")");
    }
    g.backward(terms.total);
    adam.step(ae.params());
    m.loss.push_back(l);
    m.reconstruction.push_back(terms.reconstruction);
    if (opt.log_every > 0 && (step + 1) % opt.log_every == 0) {
      std::cerr << "ae step " << step + 1 << " loss " << l << " recon " << terms.reconstruction << "\n";
    }
  }
  return m;
}

double reconstruction_mse(const Autoencoder& ae, const std::vector<Volume>& xs) {
  if (xs.empty()) throw ContractError("no volumes to evaluate");
  double total = 0;
  for (const auto& x : xs) {
    auto r = ae.reconstruct(x);
    double s = 0;
    for (std::size_t i = 0; i < x.data().size(); ++i) {
      const double d = static_cast<double>(r.data()[i]) - x.data()[i];
      s += d * d;
    }
    total += s / static_cast<double>(x.data().size());
  }
  return total / static_cast<double>(xs.size());
}

}  // namespace tumorsynth
