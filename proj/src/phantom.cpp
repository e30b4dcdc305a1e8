#include "tumorsynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tumorsynth/errors.hpp"
#include "tumorsynth/rng.hpp"
#include "tumorsynth/text.hpp"

namespace tumorsynth {

namespace {

constexpr double kOutsideTissue = 0.40;
constexpr double kTextureAmplitude = 0.04;
constexpr double kFeatherWidth = 5.0;
constexpr int kShellInner = 6;
constexpr int kShellOuter = 9;

double organ_mean(Organ o) {
  switch (o) {
    case Organ::liver: return 0.55;
    case Organ::pancreas: return 0.50;
    case Organ::kidney: return 0.60;
  }
  return 0.5;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

std::vector<float> value_noise(Shape3 shape, double base_cell, int octaves, double persistence, std::uint64_t seed) {
  std::vector<float> out(shape.voxels(), 0.0f);
  double amplitude = 1.0;
  double total = 0.0;
  double cell = base_cell;
  Rng rng(seed);
  for (int o = 0; o < octaves; ++o) {
    const int gd = static_cast<int>(std::ceil(shape.d / cell)) + 2;
    const int gh = static_cast<int>(std::ceil(shape.h / cell)) + 2;
    const int gw = static_cast<int>(std::ceil(shape.w / cell)) + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gd) * gh * gw);
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    auto L = [&](int z, int y, int x) { return lattice[(static_cast<std::size_t>(z) * gh + y) * gw + x]; };
    for (int z = 0; z < shape.d; ++z) {
      const double fz = z / cell;
      const int iz = static_cast<int>(fz);
      const double tz = smoothstep(fz - iz);
      for (int y = 0; y < shape.h; ++y) {
        const double fy = y / cell;
        const int iy = static_cast<int>(fy);
        const double ty = smoothstep(fy - iy);
        for (int x = 0; x < shape.w; ++x) {
          const double fx = x / cell;
          const int ix = static_cast<int>(fx);
          const double tx = smoothstep(fx - ix);
          auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
          const double c00 = lerp(L(iz, iy, ix), L(iz, iy, ix + 1), tx);
          const double c01 = lerp(L(iz, iy + 1, ix), L(iz, iy + 1, ix + 1), tx);
          const double c10 = lerp(L(iz + 1, iy, ix), L(iz + 1, iy, ix + 1), tx);
          const double c11 = lerp(L(iz + 1, iy + 1, ix), L(iz + 1, iy + 1, ix + 1), tx);
          const std::size_t i = (static_cast<std::size_t>(z) * shape.h + y) * shape.w + x;
          out[i] += static_cast<float>(amplitude * lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
        }
      }
    }
    total += amplitude;
    amplitude *= persistence;
    cell = std::max(1.0, cell / 2.0);
  }
  for (auto& v : out) v = static_cast<float>(v / total);
  return out;
}

Appearance resolve_appearance(const std::vector<std::string>& profile, Organ organ, const Vocabulary& vocab) {
  Appearance a;
  for (const auto& term : profile) {
    const auto* e = vocab.find(organ, term);
    if (!e) {
      throw ValidationError("descriptor '" + term + "' is not in the " + std::string(to_string(organ)) +
                            " vocabulary");
    }
    switch (e->effect) {
      case TermEffect::hypo: a.hypo = true; break;
      case TermEffect::hyper: a.hyper = true; break;
      case TermEffect::cystic: a.cystic = true; break;
      case TermEffect::heterogeneous: a.heterogeneous = true; break;
      case TermEffect::ill_defined: a.ill_defined = true; break;
      case TermEffect::well_defined: a.well_defined = true; break;
      case TermEffect::none: break;
    }
  }
  auto conflict = [](const char* what) { throw ValidationError(std::string("contradictory profile: ") + what); };
  if (a.hypo && a.hyper) conflict("hypo- and hyper-attenuating");
  if (a.cystic && a.hyper) conflict("cystic and hyperenhancing");
  if (a.cystic && a.heterogeneous) conflict("cystic and heterogeneous");
  if (a.cystic && a.ill_defined) conflict("cystic and ill-defined");
  if (a.ill_defined && a.well_defined) conflict("ill-defined and well-defined");
  return a;
}

namespace {

struct TumorGeometry {
  double cz, cy, cx;
  double rz, ry, rx;  // voxels

  double normalized_radius(int z, int y, int x) const {
    const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }
  // Approximate Euclidean distance (voxels) outside the ellipsoid surface.
  double outside_distance(int z, int y, int x) const {
    const double rn = normalized_radius(z, y, x);
    if (rn <= 1.0) return 0.0;
    const double dz = z - cz, dy = y - cy, dx = x - cx;
    return std::sqrt(dz * dz + dy * dy + dx * dx) * (1.0 - 1.0 / rn);
  }
};

TumorGeometry geometry_of(const PhantomSpec& s) {
  return {static_cast<double>(s.tumor_center.z), static_cast<double>(s.tumor_center.y),
          static_cast<double>(s.tumor_center.x), s.tumor_radii_mm[0] / s.spacing.d,
          s.tumor_radii_mm[1] / s.spacing.h, s.tumor_radii_mm[2] / s.spacing.w};
}

TumorMask organ_region(Shape3 shape) {
  TumorMask organ(shape);
  const double cz = (shape.d - 1) / 2.0, cy = (shape.h - 1) / 2.0, cx = (shape.w - 1) / 2.0;
  const double az = std::max(1.0, shape.d / 2.0 - 0.5), ay = std::max(1.0, shape.h / 2.0 - 0.5),
               ax = std::max(1.0, shape.w / 2.0 - 0.5);
  for (int z = 0; z < shape.d; ++z)
    for (int y = 0; y < shape.h; ++y)
      for (int x = 0; x < shape.w; ++x) {
        const double dz = (z - cz) / az, dy = (y - cy) / ay, dx = (x - cx) / ax;
        if (dz * dz + dy * dy + dx * dx <= 1.0) organ.at(z, y, x) = 1;
      }
  return organ;
}

}  // namespace

void validate_phantom_spec(const PhantomSpec& spec, const Vocabulary& vocab) {
  const auto a = resolve_appearance(spec.descriptor_profile, spec.organ, vocab);
  if (spec.shape.d <= 0 || spec.shape.h <= 0 || spec.shape.w <= 0) throw ValidationError("phantom shape must be positive");
  if (!(spec.spacing.d > 0 && spec.spacing.h > 0 && spec.spacing.w > 0)) throw ValidationError("spacing must be positive");
  for (double r : spec.tumor_radii_mm) {
    if (!(r > 0)) throw ValidationError("tumor radii must be positive");
  }
  const auto g = geometry_of(spec);
  const auto organ = organ_region(spec.shape);
  const double reach = a.ill_defined ? kFeatherWidth : 0.0;
  const auto& s = spec.shape;
  if (!organ.contains(spec.tumor_center.z, spec.tumor_center.y, spec.tumor_center.x)) {
    throw ValidationError("tumor center outside the volume");
  }
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (organ.at(z, y, x)) continue;
        if (g.normalized_radius(z, y, x) <= 1.0 || g.outside_distance(z, y, x) < reach) {
          throw ValidationError("tumor ellipsoid does not fit inside the organ region");
        }
      }
  // The ellipsoid must not be clipped by the grid either.
  if (g.cz - g.rz < 0 || g.cy - g.ry < 0 || g.cx - g.rx < 0 || g.cz + g.rz > s.d - 1 || g.cy + g.ry > s.h - 1 ||
      g.cx + g.rx > s.w - 1) {
    throw ValidationError("tumor ellipsoid extends past the volume");
  }
}

Phantom make_phantom(const PhantomSpec& spec, const Vocabulary& vocab) {
  validate_phantom_spec(spec, vocab);
  const Appearance a = resolve_appearance(spec.descriptor_profile, spec.organ, vocab);
  const auto& s = spec.shape;
  Rng rng(spec.seed);
  const auto organ_tex = value_noise(s, 8.0, 3, 0.5, rng.next_u64());
  const auto fine_tex = value_noise(s, 3.0, 2, 0.5, rng.next_u64());
  const auto mixed_tex = value_noise(s, 2.0, 2, 0.5, rng.next_u64());
  const auto outside_tex = value_noise(s, 6.0, 3, 0.5, rng.next_u64());

  Phantom p;
  p.organ = organ_region(s);
  p.mask = TumorMask(s);
  std::vector<float> healthy(s.voxels()), tumor(s.voxels());

  const double base = organ_mean(spec.organ);
  double shift = -0.10;
  if (a.hypo) shift = -0.28;
  if (a.hyper) shift = 0.28;
  if (a.cystic) shift = -0.32;
  const auto g = geometry_of(spec);

  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * s.h + y) * s.w + x;
        const bool in_organ = p.organ.at(z, y, x) != 0;
        const double bg = in_organ ? base + kTextureAmplitude * organ_tex[i]
                                   : kOutsideTissue + kTextureAmplitude * outside_tex[i];
        healthy[i] = static_cast<float>(bg);

        const double rn = g.normalized_radius(z, y, x);
        double weight = 0.0;
        if (rn <= 1.0) {
          weight = 1.0;
          p.mask.at(z, y, x) = 1;
        } else if (a.ill_defined) {
          weight = std::max(0.0, 1.0 - g.outside_distance(z, y, x) / kFeatherWidth);
        }
        if (weight == 0.0) {
          tumor[i] = static_cast<float>(bg);
          continue;
        }
        double content;
        if (a.cystic) {
          content = base + shift + 0.004 * fine_tex[i];
        } else if (a.heterogeneous) {
          content = base + shift + 0.28 * mixed_tex[i] + kTextureAmplitude * organ_tex[i];
        } else {
          content = base + shift + kTextureAmplitude * organ_tex[i] + 0.09 * fine_tex[i];
        }
        tumor[i] = static_cast<float>(bg + weight * (content - bg));
      }

  auto to_hu = [](std::vector<float>& v) {
    for (auto& x : v) x = static_cast<float>(denormalize_hu(std::clamp(static_cast<double>(x), 0.0, 1.0)));
  };
  to_hu(healthy);
  to_hu(tumor);
  p.volume = Volume(s, std::move(tumor), spec.spacing, false);
  p.healthy = Volume(s, std::move(healthy), spec.spacing, false);
  p.reference_text = render_description(spec.descriptor_profile, spec.organ);
  return p;
}

// ---------------------------------------------------------------------------

RegionStats measure_region(const Volume& v, const TumorMask& mask, const TumorMask* background) {
  if (!v.normalized()) throw ContractError("measure_region expects a normalized volume");
  if (mask.shape() != v.shape()) throw ShapeError("mask and volume shapes differ");
  if (background && background->shape() != v.shape()) throw ShapeError("background mask shape differs");
  const auto bb = bounding_box(mask);
  const auto& s = v.shape();

  RegionStats st;
  double sum = 0, sum2 = 0;
  std::vector<Index3> surface;
  double surface_sum = 0;
  for (int z = bb.min.z; z <= bb.max.z; ++z)
    for (int y = bb.min.y; y <= bb.max.y; ++y)
      for (int x = bb.min.x; x <= bb.max.x; ++x) {
        if (!mask.at(z, y, x)) continue;
        const double val = v.at(z, y, x);
        sum += val;
        sum2 += val * val;
        ++st.tumor_voxels;
        const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
        bool edge = false;
        for (const auto& d : nb) {
          const int zz = z + d[0], yy = y + d[1], xx = x + d[2];
          if (!mask.contains(zz, yy, xx) || !mask.at(zz, yy, xx)) edge = true;
        }
        if (edge) {
          surface.push_back({z, y, x});
          surface_sum += val;
        }
      }
  const double n = static_cast<double>(st.tumor_voxels);
  st.tumor_mean = sum / n;
  st.tumor_sd = std::sqrt(std::max(0.0, sum2 / n - st.tumor_mean * st.tumor_mean));
  const double inner = surface_sum / static_cast<double>(surface.size());

  constexpr int kBins = kShellOuter + 1;
  std::array<double, kBins> bin_sum{};
  std::array<std::size_t, kBins> bin_n{};
  double bg_sum = 0;
  const int pad = kShellOuter + 1;
  for (int z = std::max(0, bb.min.z - pad); z <= std::min(s.d - 1, bb.max.z + pad); ++z)
    for (int y = std::max(0, bb.min.y - pad); y <= std::min(s.h - 1, bb.max.y + pad); ++y)
      for (int x = std::max(0, bb.min.x - pad); x <= std::min(s.w - 1, bb.max.x + pad); ++x) {
        if (mask.at(z, y, x)) continue;
        if (background && !background->at(z, y, x)) continue;
        double best = std::numeric_limits<double>::max();
        for (const auto& q : surface) {
          const double dz = z - q.z, dy = y - q.y, dx = x - q.x;
          best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        const double dist = std::sqrt(best);
        const int bin = static_cast<int>(std::lround(dist));
        if (bin >= 1 && bin < kBins) {
          bin_sum[bin] += v.at(z, y, x);
          ++bin_n[bin];
        }
        if (bin >= kShellInner && bin <= kShellOuter) {
          bg_sum += v.at(z, y, x);
          ++st.background_voxels;
        }
      }
  if (st.background_voxels == 0) {
    st.background_mean = st.tumor_mean;
    return st;
  }
  st.background_mean = bg_sum / static_cast<double>(st.background_voxels);

  const double contrast = inner - st.background_mean;
  if (std::abs(contrast) < 0.05) return st;
  // Normalized radial profile: 1 at the mask surface, 0 in the background shell.
  std::vector<std::pair<double, double>> profile{{0.0, 1.0}};
  for (int b = 1; b < kBins; ++b) {
    if (bin_n[b] == 0) continue;
    profile.emplace_back(b, (bin_sum[b] / bin_n[b] - st.background_mean) / contrast);
  }
  auto crossing = [&](double level) {
    for (std::size_t k = 1; k < profile.size(); ++k) {
      const auto [d0, f0] = profile[k - 1];
      const auto [d1, f1] = profile[k];
      if (f1 < level) return d0 + (f0 - level) / (f0 - f1) * (d1 - d0);
    }
    return profile.back().first;
  };
  st.boundary_width = crossing(0.1) - crossing(0.9);
  return st;
}

std::vector<std::string> appearance_terms(const RegionStats& s) {
  std::vector<std::string> terms;
  const double contrast = s.tumor_mean - s.background_mean;
  if (contrast < -kAttenuationDelta && s.tumor_sd < kCysticMaxSd) {
    terms.push_back("cystic");
  } else {
    if (contrast < -kAttenuationDelta) terms.push_back("hypoattenuating");
    if (contrast > kAttenuationDelta) terms.push_back("hyperenhancing");
    if (s.tumor_sd > kHeterogeneousMinSd) terms.push_back("heterogeneous");
  }
  if (s.boundary_width >= kIllDefinedMinWidth) terms.push_back("ill-defined");
  return terms;
}

}  // namespace tumorsynth
