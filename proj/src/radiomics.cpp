#include "tumorsynth/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "embedded_data.hpp"
#include "tumorsynth/errors.hpp"

namespace tumorsynth {

using nlohmann::json;

namespace {

const std::set<std::string>& known_formulas() {
  static const std::set<std::string> f{"mean",        "median",        "min",           "max",
                                       "range",       "variance",      "sd",            "skewness",
                                       "kurtosis",    "energy",        "rms",           "entropy",
                                       "uniformity",  "mad",           "iqr",           "p10",
                                       "p25",         "p90",           "contrast",      "correlation",
                                       "dissimilarity", "homogeneity", "asm",           "glcm_entropy",
                                       "cluster_shade", "cluster_prominence"};
  return f;
}

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pop_sd(const std::vector<double>& v) {
  const double mu = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

void require_pairs(const std::vector<RadiomicsVector>& vs) {
  if (vs.size() < 2) throw ContractError("need at least 2 radiomics vectors");
  for (const auto& v : vs) {
    if (v.features.size() != vs[0].features.size()) throw ShapeError("radiomics vectors differ in length");
  }
}

}  // namespace

FeatureRegistry FeatureRegistry::from_json(const json& j) {
  FeatureRegistry r;
  try {
    for (const auto& f : j.at("features")) {
      FeatureSpec s{f.at("name").get<std::string>(), f.at("category").get<std::string>(),
                    f.at("formula").get<std::string>()};
      if (!known_formulas().count(s.formula)) throw FormatError("unknown radiomics formula '" + s.formula + "'");
      if (s.category != "first_order" && s.category != "glcm") {
        throw FormatError("unknown radiomics category '" + s.category + "'");
      }
      r.features_.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("radiomics registry: ") + e.what());
  }
  if (r.features_.empty()) throw FormatError("radiomics registry has no features");
  return r;
}

std::vector<std::string> FeatureRegistry::names() const {
  std::vector<std::string> n;
  for (const auto& f : features_) n.push_back(f.name);
  return n;
}

const FeatureRegistry& default_feature_registry() {
  static const FeatureRegistry r = FeatureRegistry::from_json(json::parse(embedded::kRadiomicsRegistryJson));
  return r;
}

void RadiomicsVector::validate(const FeatureRegistry& reg) const {
  if (features.size() != feature_names.size()) throw ShapeError("feature/name count mismatch");
  if (feature_names != reg.names()) throw ValidationError("feature names do not follow the registry order");
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) throw NumericError("feature " + feature_names[i] + " is not finite");
  }
}

int gray_level(double x) {
  const double c = std::clamp(x, 0.0, 1.0);
  return std::min(kGrayLevels, static_cast<int>(std::floor(c * kGrayLevels)) + 1);
}

const std::array<std::array<int, 3>, 13>& glcm_offsets() {
  static const auto offs = [] {
    std::array<std::array<int, 3>, 13> o{};
    int k = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int first = dz != 0 ? dz : (dy != 0 ? dy : dx);
          if (first > 0) o[k++] = {dz, dy, dx};
        }
    return o;
  }();
  return offs;
}

std::vector<double> glcm_counts(const Volume& v, const TumorMask& m, const std::array<int, 3>& off) {
  std::vector<double> c(kGrayLevels * kGrayLevels, 0.0);
  const auto& s = v.shape();
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!m.at(z, y, x)) continue;
        const int nz = z + off[0], ny = y + off[1], nx = x + off[2];
        if (!m.contains(nz, ny, nx) || !m.at(nz, ny, nx)) continue;
        const int a = gray_level(v.at(z, y, x)) - 1, b = gray_level(v.at(nz, ny, nx)) - 1;
        c[a * kGrayLevels + b] += 1;
        c[b * kGrayLevels + a] += 1;
      }
  return c;
}

GlcmFeatures glcm_features(const std::vector<double>& counts) {
  if (counts.size() != static_cast<std::size_t>(kGrayLevels * kGrayLevels)) throw ShapeError("GLCM must be 32x32");
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  GlcmFeatures f;
  if (total <= 0) return f;
  std::vector<double> px(kGrayLevels, 0.0);
  for (int i = 0; i < kGrayLevels; ++i)
    for (int j = 0; j < kGrayLevels; ++j) px[i] += counts[i * kGrayLevels + j] / total;
  double mu = 0, var = 0;
  for (int i = 0; i < kGrayLevels; ++i) mu += (i + 1) * px[i];
  for (int i = 0; i < kGrayLevels; ++i) var += (i + 1 - mu) * (i + 1 - mu) * px[i];
  double cov = 0;
  for (int i = 0; i < kGrayLevels; ++i)
    for (int j = 0; j < kGrayLevels; ++j) {
      const double p = counts[i * kGrayLevels + j] / total;
      if (p == 0) continue;
      const double a = i + 1, b = j + 1, d = a - b, s = a + b - 2 * mu;
      f.contrast += d * d * p;
      f.dissimilarity += std::abs(d) * p;
      f.homogeneity += p / (1 + d * d);
      f.asm_ += p * p;
      f.entropy -= p * std::log2(p);
      f.cluster_shade += s * s * s * p;
      f.cluster_prominence += s * s * s * s * p;
      cov += (a - mu) * (b - mu) * p;
    }
  // flat region: perfectly correlated by convention
  f.correlation = var > 0 ? cov / var : 1.0;
  return f;
}

RadiomicsVector extract_features(const Volume& v, const TumorMask& m, const std::string& source_id,
                                 const FeatureRegistry& reg) {
  if (v.shape() != m.shape()) throw ShapeError("volume and mask shapes differ");
  if (!v.normalized()) throw ContractError("radiomics needs a normalized volume");
  std::vector<double> xs;
  for (std::size_t i = 0; i < m.data().size(); ++i)
    if (m.data()[i]) xs.push_back(v.data()[i]);
  if (xs.empty()) throw ContractError("radiomics needs a nonempty mask");

  const double n = static_cast<double>(xs.size());
  std::map<std::string, double> val;
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  const double mu = mean_of(xs);
  double m2 = 0, m3 = 0, m4 = 0, energy = 0, mad = 0;
  for (double x : xs) {
    const double d = x - mu;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
    energy += x * x;
    mad += std::abs(d);
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  val["mean"] = mu;
  val["median"] = percentile(sorted, 0.5);
  val["min"] = sorted.front();
  val["max"] = sorted.back();
  val["range"] = sorted.back() - sorted.front();
  val["variance"] = m2;
  val["sd"] = std::sqrt(m2);
  val["skewness"] = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
  val["kurtosis"] = m2 > 0 ? m4 / (m2 * m2) : 0.0;
  val["energy"] = energy;
  val["rms"] = std::sqrt(energy / n);
  val["mad"] = mad / n;
  val["iqr"] = percentile(sorted, 0.75) - percentile(sorted, 0.25);
  val["p10"] = percentile(sorted, 0.10);
  val["p25"] = percentile(sorted, 0.25);
  val["p90"] = percentile(sorted, 0.90);
  std::vector<double> hist(kGrayLevels, 0.0);
  for (double x : xs) hist[gray_level(x) - 1] += 1;
  double ent = 0, uni = 0;
  for (double h : hist) {
    if (h == 0) continue;
    const double p = h / n;
    ent -= p * std::log2(p);
    uni += p * p;
  }
  val["entropy"] = ent;
  val["uniformity"] = uni;

  GlcmFeatures avg;
  int used = 0;
  for (const auto& off : glcm_offsets()) {
    const auto c = glcm_counts(v, m, off);
    if (std::accumulate(c.begin(), c.end(), 0.0) == 0) continue;
    const auto f = glcm_features(c);
    avg.contrast += f.contrast;
    avg.correlation += f.correlation;
    avg.dissimilarity += f.dissimilarity;
    avg.homogeneity += f.homogeneity;
    avg.asm_ += f.asm_;
    avg.entropy += f.entropy;
    avg.cluster_shade += f.cluster_shade;
    avg.cluster_prominence += f.cluster_prominence;
    ++used;
  }
  RadiomicsVector r;
  r.source_id = source_id;
  r.degenerate = used == 0;
  const double k = used > 0 ? 1.0 / used : 0.0;
  val["contrast"] = avg.contrast * k;
  val["correlation"] = avg.correlation * k;
  val["dissimilarity"] = avg.dissimilarity * k;
  val["homogeneity"] = avg.homogeneity * k;
  val["asm"] = avg.asm_ * k;
  val["glcm_entropy"] = avg.entropy * k;
  val["cluster_shade"] = avg.cluster_shade * k;
  val["cluster_prominence"] = avg.cluster_prominence * k;

  for (const auto& f : reg.features()) {
    r.features.push_back(val.at(f.formula));
    r.feature_names.push_back(f.name);
  }
  return r;
}

FeatureScaler fit_scaler(const std::vector<RadiomicsVector>& vs) {
  require_pairs(vs);
  const std::size_t k = vs[0].features.size();
  FeatureScaler s;
  s.mean.assign(k, 0.0);
  s.sd.assign(k, 0.0);
  s.keep.assign(k, false);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> col;
    for (const auto& v : vs) col.push_back(v.features[j]);
    s.mean[j] = mean_of(col);
    s.sd[j] = pop_sd(col);
    s.keep[j] = s.sd[j] > 0;
    if (!s.keep[j]) {
      s.dropped.push_back(j < vs[0].feature_names.size() ? vs[0].feature_names[j] : "feature_" + std::to_string(j));
    }
  }
  return s;
}

std::size_t FeatureScaler::kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }

std::vector<std::vector<double>> FeatureScaler::apply(const std::vector<RadiomicsVector>& vs) const {
  std::vector<std::vector<double>> rows;
  for (const auto& v : vs) {
    if (v.features.size() != keep.size()) throw ShapeError("scaler and vector lengths differ");
    std::vector<double> r;
    for (std::size_t j = 0; j < keep.size(); ++j)
      if (keep[j]) r.push_back((v.features[j] - mean[j]) / sd[j]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<double> cosine_pairs(const std::vector<std::vector<double>>& rows) {
  std::vector<double> norms;
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0;
    for (double x : rows[i]) s += x * x;
    norms.push_back(std::sqrt(s));
    if (!(norms.back() > 0)) bad.push_back(i);
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "zero-norm radiomics vector(s) at index";
    for (auto i : bad) msg << " " << i;
    throw NumericError(msg.str());
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < rows[i].size(); ++k) dot += rows[i][k] * rows[j][k];
      out.push_back(std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0));
    }
  return out;
}

CosineResult pairwise_cosine(const std::vector<RadiomicsVector>& vs, bool standardize) {
  require_pairs(vs);
  CosineResult r;
  if (standardize) {
    const auto s = fit_scaler(vs);
    r.dropped = s.dropped;
    r.scores = cosine_pairs(s.apply(vs));
  } else {
    std::vector<std::vector<double>> rows;
    for (const auto& v : vs) rows.push_back(v.features);
    r.scores = cosine_pairs(rows);
  }
  return r;
}

std::string_view to_string(DiversityMode m) {
  return m == DiversityMode::similarity_stats ? "similarity_stats" : "feature_variance";
}

DiversityMode diversity_mode_from_string(std::string_view s) {
  if (s == "similarity_stats") return DiversityMode::similarity_stats;
  if (s == "feature_variance") return DiversityMode::feature_variance;
  throw ValidationError("unknown diversity mode '" + std::string(s) + "'");
}

json to_json(const DiversityReport& r) {
  return {{"method", r.method_name}, {"organ", r.organ}, {"n_samples", r.n_samples}, {"mv", r.mv},
          {"sd", r.sd},              {"mode", to_string(r.mode)}, {"dropped", r.dropped}};
}

DiversityReport diversity_stats(const std::vector<RadiomicsVector>& vs, DiversityMode mode, const FeatureScaler* scaler) {
  require_pairs(vs);
  DiversityReport r;
  r.mode = mode;
  r.n_samples = vs.size();
  const FeatureScaler own = scaler ? FeatureScaler{} : fit_scaler(vs);
  const FeatureScaler& s = scaler ? *scaler : own;
  r.dropped = s.dropped;
  if (s.kept() == 0) return r;  // nothing varies: zero diversity
  const auto rows = s.apply(vs);
  std::vector<double> stat;
  if (mode == DiversityMode::similarity_stats) {
    for (double c : cosine_pairs(rows)) stat.push_back(1.0 - c);
  } else {
    for (std::size_t k = 0; k < rows[0].size(); ++k) {
      std::vector<double> col;
      for (const auto& row : rows) col.push_back(row[k]);
      const double sd = pop_sd(col);
      stat.push_back(sd * sd);
    }
  }
  r.mv = mean_of(stat);
  r.sd = pop_sd(stat);
  return r;
}

std::vector<DiversityReport> compare_methods(const std::map<std::string, std::vector<RadiomicsSample>>& sets,
                                             DiversityMode mode) {
  std::map<Organ, std::map<std::string, std::vector<RadiomicsVector>>> by_organ;
  for (const auto& [method, samples] : sets) {
    if (samples.size() < 2) throw ContractError("method '" + method + "' needs at least 2 samples");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      const Volume v = s.volume.normalized() ? s.volume : preprocess(s.volume);
      by_organ[s.organ][method].push_back(extract_features(v, s.mask, method + "/" + std::to_string(i)));
    }
  }
  std::vector<DiversityReport> out;
  for (const auto& [organ, methods] : by_organ) {
    std::vector<RadiomicsVector> pooled;
    for (const auto& [_, vs] : methods) pooled.insert(pooled.end(), vs.begin(), vs.end());
    const FeatureScaler scaler = fit_scaler(pooled);
    for (const auto& [method, vs] : methods) {
      if (vs.size() < 2) {
        throw ContractError("method '" + method + "' has fewer than 2 samples for " + std::string(to_string(organ)));
      }
      auto r = diversity_stats(vs, mode, &scaler);
      r.method_name = method;
      r.organ = std::string(to_string(organ));
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_diversity_table(const std::filesystem::path& stem, const std::vector<DiversityReport>& reports) {
  std::vector<std::string> methods, organs;
  for (const auto& r : reports) {
    if (std::find(methods.begin(), methods.end(), r.method_name) == methods.end()) methods.push_back(r.method_name);
    if (std::find(organs.begin(), organs.end(), r.organ) == organs.end()) organs.push_back(r.organ);
  }
  std::ofstream csv(stem.string() + ".csv");
  csv << "method";
  for (const auto& o : organs) csv << "," << o;
  csv << "\n";
  for (const auto& m : methods) {
    csv << m;
    for (const auto& o : organs) {
      csv << ",";
      for (const auto& r : reports)
        if (r.method_name == m && r.organ == o) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%.4f±%.4f", r.mv, r.sd);
          csv << buf;
        }
    }
    csv << "\n";
  }
  json j = json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  std::ofstream js(stem.string() + ".json");
  js << j.dump(2) << "\n";
  if (!csv || !js) throw Error("could not write diversity table " + stem.string());
}

}  // namespace tumorsynth
