#include "tumorsynth/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "json.hpp"

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"

namespace tumorsynth {

using nlohmann::json;

namespace {

constexpr std::string_view kExtractPrompt =
    "List the texture, margin and attenuation descriptors of the lesion in this radiology report, "
    "one descriptor per line, using standard radiology terms.";
constexpr std::string_view kGeneratePrompt =
    "Rewrite the lesion description as a new report sentence with a different structure. "
    "Keep every descriptor term exactly as given.";
constexpr std::string_view kDescribePrompt =
    "Describe the lesion in one sentence using only the supplied high-frequency descriptor terms.";

// Sentence structures; {A} = article + terms, {O} = organ, {V} = participle.
constexpr std::string_view kStructures[] = {
    "{A} lesion is {V} in the {O}",
    "in the {O}, {A} lesion is {V}",
    "{A} lesion is {V} within the {O}",
    "the {O} contains {A} lesion, {V} on this study",
    "there is {A} lesion {V} in the {O}",
    "{A} lesion of the {O} is {V}",
    "imaging of the {O} shows {A} lesion, {V}",
    "{V} in the {O} is {A} lesion",
    "the {O} demonstrates {A} lesion that is {V}",
    "findings: {A} lesion {V} in the {O}",
};
constexpr std::string_view kParticiples[] = {"seen",    "noted",    "present",      "identified", "observed",
                                             "visible", "evident",  "depicted",     "demonstrated",
                                             "appreciated"};
constexpr int kStructureCount = static_cast<int>(std::size(kStructures));
constexpr int kParticipleCount = static_cast<int>(std::size(kParticiples));

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

std::string article_phrase(const std::vector<std::string>& terms) {
  std::string joined;
  if (terms.size() <= 2) {
    for (std::size_t i = 0; i < terms.size(); ++i) joined += (i ? " " : "") + terms[i];
  } else {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (i) joined += (i + 1 == terms.size()) ? " and " : ", ";
      joined += terms[i];
    }
  }
  const char first = joined.empty() ? 'l' : static_cast<char>(std::tolower(static_cast<unsigned char>(joined[0])));
  const bool vowel = std::string_view("aeiou").find(first) != std::string_view::npos;
  if (joined.empty()) return "a";
  return std::string(vowel ? "an " : "a ") + joined;
}

bool contains_phrase(std::string_view text, std::string_view phrase) {
  return text.find(phrase) != std::string_view::npos;
}

}  // namespace

// ---------------------------------------------------------------------------
// Wire format

std::string encode_request_line(const LMRequest& r) {
  return json{{"role", r.role}, {"prompt", r.prompt}, {"payload", r.payload}}.dump();
}

LMRequest decode_request_line(std::string_view line) {
  try {
    const auto j = json::parse(line);
    return {j.at("role").get<std::string>(), j.at("prompt").get<std::string>(), j.at("payload").get<std::string>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed request line: ") + e.what());
  }
}

std::string encode_response_line(const LMResponse& r) { return json{{"text", r.text}}.dump(); }

LMResponse decode_response_line(std::string_view line) {
  try {
    const auto j = json::parse(line);
    return {j.at("text").get<std::string>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed response line: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Mock client

LMResponse MockLMClient::complete(const LMRequest& request) {
  {
    std::lock_guard lock(mu_);
    ++calls_;
    if (fail_remaining_ > 0) {
      --fail_remaining_;
      throw TransportError("mock transport failure (injected)");
    }
  }
  return decode_response_line(handle_line(encode_request_line(request)));
}

std::string MockLMClient::handle_line(std::string_view request_line) const {
  const LMRequest req = decode_request_line(request_line);
  json payload;
  try {
    payload = json::parse(req.payload);
  } catch (const json::exception& e) {
    throw FormatError(std::string("mock client expects a JSON payload: ") + e.what());
  }
  const Organ organ = organ_from_string(payload.at("organ").get<std::string>());
  std::string text;
  if (req.role == "extract") {
    const auto terms = scan_vocabulary(payload.at("report").get<std::string>(), organ, *vocab_);
    for (std::size_t i = 0; i < terms.size(); ++i) text += (i ? "\n" : "") + terms[i];
  } else if (req.role == "generate") {
    const auto terms = payload.at("terms").get<std::vector<std::string>>();
    text = render_variant(terms, organ, payload.at("frame").get<int>());
  } else if (req.role == "describe") {
    const auto terms = payload.at("terms").get<std::vector<std::string>>();
    text = render_variant(terms, organ, kStructureCount);  // "... lesion is seen in the <organ>"
  } else {
    throw FormatError("unknown request role '" + req.role + "'");
  }
  return encode_response_line({text});
}

LMResponse complete_with_retry(LMClient& client, const LMRequest& request, int attempts) {
  for (int i = 1;; ++i) {
    try {
      return client.complete(request);
    } catch (const TransportError&) {
      if (i >= attempts) throw;
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<std::string> scan_vocabulary(std::string_view text, Organ organ, const Vocabulary& vocab) {
  struct Candidate {
    std::string normalized;
    const std::string* phrase;
  };
  std::vector<Candidate> cands;
  for (const auto* e : vocab.for_organ(organ)) cands.push_back({normalize_phrase(e->phrase), &e->phrase});
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.normalized.size() > b.normalized.size(); });

  const std::string norm = normalize_phrase(text);
  std::vector<std::string> terms;
  std::size_t pos = 0;
  while (pos < norm.size()) {
    bool matched = false;
    for (const auto& c : cands) {
      if (norm.compare(pos, c.normalized.size(), c.normalized) != 0) continue;
      const std::size_t end = pos + c.normalized.size();
      if (end != norm.size() && norm[end] != ' ') continue;
      if (std::find(terms.begin(), terms.end(), *c.phrase) == terms.end()) terms.push_back(*c.phrase);
      pos = end;
      matched = true;
      break;
    }
    if (!matched) {
      const auto next = norm.find(' ', pos);
      if (next == std::string::npos) break;
      pos = next;
    }
    while (pos < norm.size() && norm[pos] == ' ') ++pos;
  }
  return terms;
}

std::string render_description(const std::vector<std::string>& terms, Organ organ) {
  return article_phrase(terms) + " lesion in the " + std::string(to_string(organ));
}

int variant_frame_count() { return kStructureCount * kParticipleCount; }

std::string render_variant(const std::vector<std::string>& terms, Organ organ, int frame) {
  frame = ((frame % variant_frame_count()) + variant_frame_count()) % variant_frame_count();
  const int structure = frame % kStructureCount;
  const int participle = frame / kStructureCount;
  if (frame == 0) return render_description(terms, organ);
  std::string s(kStructures[structure]);
  // The base structure with the first participle is reserved for the plain description.
  const int v = structure == 0 ? participle - 1 : participle;
  s = replace_all(s, "{A}", article_phrase(terms));
  s = replace_all(s, "{O}", to_string(organ));
  s = replace_all(s, "{V}", kParticiples[(v + kParticipleCount) % kParticipleCount]);
  return s;
}

DescriptorSet extract_descriptors(const RadiologyReport& report, LMClient& client, const Vocabulary& vocab) {
  if (report.text.empty()) throw ContractError("report text is empty");
  const json payload{{"organ", to_string(report.organ)}, {"report", report.text}};
  const LMResponse resp = client.complete({"extract", std::string(kExtractPrompt), payload.dump()});

  DescriptorSet d;
  d.report_id = report.id;
  d.organ = report.organ;
  d.terms = scan_vocabulary(resp.text, report.organ, vocab);
  if (d.terms.empty()) {
    d.warning = true;
    return d;
  }
  d.cleaned_text = render_description(d.terms, report.organ);
  d.similarity = validate_similarity(d.cleaned_text, report.text, -1.0).score;
  return d;
}

ReportVariantSet generate_variants(const DescriptorSet& d, int n, LMClient& client, double threshold) {
  if (d.terms.empty()) throw ContractError("descriptor set has no terms");
  if (n < 1) throw ContractError("variant count must be >= 1");
  if (threshold < -1.0 || threshold > 1.0) throw ContractError("threshold must lie in [-1, 1]");

  ReportVariantSet out;
  out.report_id = d.report_id;
  const std::string reference = d.cleaned_text.empty() ? render_description(d.terms, d.organ) : d.cleaned_text;
  const long budget = 10L * n;
  long attempts = 0;
  for (int i = 0; i < n; ++i) {
    for (int retry = 0;; ++retry) {
      if (attempts >= budget) {
        throw GenerationExhaustedError("could not produce " + std::to_string(n) + " passing variants in " +
                                       std::to_string(budget) + " attempts");
      }
      ++attempts;
      const json payload{{"organ", to_string(d.organ)}, {"terms", d.terms}, {"frame", i + retry * 7}};
      const LMResponse resp = client.complete({"generate", std::string(kGeneratePrompt), payload.dump()});
      const bool has_terms = std::all_of(d.terms.begin(), d.terms.end(),
                                         [&](const std::string& t) { return contains_phrase(resp.text, t); });
      if (!has_terms || resp.text.empty()) continue;
      const auto sim = validate_similarity(resp.text, reference, threshold);
      if (!sim.pass) continue;
      out.variants.push_back(resp.text);
      out.similarity_scores.push_back(sim.score);
      break;
    }
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

TextEmbedding embed_text(std::string_view text, int dim) {
  if (text.empty()) throw ContractError("cannot embed empty text");
  if (dim < 1) throw ContractError("embedding dimension must be positive");
  TextEmbedding e;
  e.source_text = std::string(text);
  e.vector.assign(static_cast<std::size_t>(dim), 0.0);
  for (const auto& tok : tokenize(text)) {
    const std::uint64_t h = fnv1a(tok);
    const double sign = ((h >> 32) & 1U) ? 1.0 : -1.0;
    e.vector[h % static_cast<std::uint64_t>(dim)] += sign;
  }
  double norm = 0.0;
  for (double v : e.vector) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    // Text without alphanumeric tokens (or fully cancelling collisions): fixed unit vector.
    e.vector[0] = 1.0;
    return e;
  }
  for (double& v : e.vector) v /= norm;
  return e;
}

TextEmbedding embed_mean(const std::vector<std::string>& texts, int dim) {
  if (texts.empty()) throw ContractError("no texts to average");
  TextEmbedding out;
  out.vector.assign(static_cast<std::size_t>(dim), 0.0);
  for (const auto& t : texts) {
    const auto e = embed_text(t, dim);
    for (int i = 0; i < dim; ++i) out.vector[i] += e.vector[i];
  }
  double norm = 0.0;
  for (double v : out.vector) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw NumericError("variant embeddings cancel to zero");
  for (double& v : out.vector) v /= norm;
  out.source_text = texts.front();
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) throw NumericError("cosine of a zero vector");
  return ab / std::sqrt(aa * bb);
}

SimilarityResult validate_similarity(std::string_view candidate, std::string_view reference, double threshold) {
  if (candidate.empty() || reference.empty()) throw ContractError("similarity needs two nonempty strings");
  if (threshold < -1.0 || threshold > 1.0) throw ContractError("threshold must lie in [-1, 1]");
  double s = cosine(embed_text(candidate).vector, embed_text(reference).vector);
  s = std::clamp(s, -1.0, 1.0);
  return {s, s >= threshold};
}

}  // namespace tumorsynth
