#include "tumorsynth/vocabulary.hpp"

#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "embedded_data.hpp"
#include "tumorsynth/errors.hpp"

namespace tumorsynth {

std::string_view to_string(Organ o) {
  switch (o) {
    case Organ::liver: return "liver";
    case Organ::pancreas: return "pancreas";
    case Organ::kidney: return "kidney";
  }
  return "?";
}

Organ organ_from_string(std::string_view s) {
  if (s == "liver") return Organ::liver;
  if (s == "pancreas") return Organ::pancreas;
  if (s == "kidney") return Organ::kidney;
  throw ValidationError("unknown organ '" + std::string(s) + "'");
}

std::string_view to_string(TermCategory c) {
  switch (c) {
    case TermCategory::texture: return "texture";
    case TermCategory::margin: return "margin";
    case TermCategory::attenuation: return "attenuation";
    case TermCategory::pathology: return "pathology";
  }
  return "?";
}

std::string_view to_string(TermEffect e) {
  switch (e) {
    case TermEffect::none: return "none";
    case TermEffect::hypo: return "hypo";
    case TermEffect::hyper: return "hyper";
    case TermEffect::cystic: return "cystic";
    case TermEffect::heterogeneous: return "heterogeneous";
    case TermEffect::ill_defined: return "ill_defined";
    case TermEffect::well_defined: return "well_defined";
  }
  return "?";
}

namespace {

TermCategory category_from_string(const std::string& s) {
  if (s == "texture") return TermCategory::texture;
  if (s == "margin") return TermCategory::margin;
  if (s == "attenuation") return TermCategory::attenuation;
  if (s == "pathology") return TermCategory::pathology;
  throw FormatError("unknown vocabulary category '" + s + "'");
}

TermEffect effect_from_string(const std::string& s) {
  for (auto e : {TermEffect::none, TermEffect::hypo, TermEffect::hyper, TermEffect::cystic,
                 TermEffect::heterogeneous, TermEffect::ill_defined, TermEffect::well_defined}) {
    if (to_string(e) == s) return e;
  }
  throw FormatError("unknown vocabulary effect '" + s + "'");
}

}  // namespace

Vocabulary::Vocabulary(std::vector<VocabularyEntry> entries) : entries_(std::move(entries)) {
  std::set<std::pair<Organ, std::string>> seen;
  for (const auto& e : entries_) {
    if (e.phrase.empty()) throw ValidationError("empty vocabulary phrase");
    if (!seen.emplace(e.organ, e.phrase).second) {
      throw ValidationError("duplicate vocabulary phrase '" + e.phrase + "' for " + std::string(to_string(e.organ)));
    }
  }
  for (auto o : kAllOrgans) {
    if (for_organ(o).empty()) throw ValidationError("vocabulary has no phrases for " + std::string(to_string(o)));
  }
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("vocabulary is not valid JSON: ") + e.what());
  }
  std::vector<VocabularyEntry> entries;
  for (const auto& row : j.at("entries")) {
    entries.push_back({organ_from_string(row.at("organ").get<std::string>()), row.at("phrase").get<std::string>(),
                       category_from_string(row.at("category").get<std::string>()),
                       effect_from_string(row.at("effect").get<std::string>())});
  }
  return Vocabulary(std::move(entries));
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<const VocabularyEntry*> Vocabulary::for_organ(Organ o) const {
  std::vector<const VocabularyEntry*> out;
  for (const auto& e : entries_)
    if (e.organ == o) out.push_back(&e);
  return out;
}

const VocabularyEntry* Vocabulary::find(Organ o, std::string_view phrase) const {
  for (const auto& e : entries_)
    if (e.organ == o && e.phrase == phrase) return &e;
  return nullptr;
}

const Vocabulary& default_vocabulary() {
  static const Vocabulary v = Vocabulary::from_json(embedded::kVocabularyJson);
  return v;
}

std::string normalize_phrase(std::string_view s) {
  std::string out;
  bool gap = false;
  for (unsigned char c : s) {
    if (std::isalnum(c)) {
      if (gap && !out.empty()) out.push_back(' ');
      out.push_back(static_cast<char>(std::tolower(c)));
      gap = false;
    } else {
      gap = true;
    }
  }
  return out;
}

}  // namespace tumorsynth
