#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tumorsynth {

enum class Organ { liver, pancreas, kidney };

std::string_view to_string(Organ o);
Organ organ_from_string(std::string_view s);
inline constexpr Organ kAllOrgans[] = {Organ::liver, Organ::pancreas, Organ::kidney};

enum class TermCategory { texture, margin, attenuation, pathology };

/// Visual effect a descriptor has on a rendered phantom tumor.
enum class TermEffect { none, hypo, hyper, cystic, heterogeneous, ill_defined, well_defined };

std::string_view to_string(TermCategory c);
std::string_view to_string(TermEffect e);

struct VocabularyEntry {
  Organ organ;
  std::string phrase;
  TermCategory category;
  TermEffect effect;
};

/// Organ-specific descriptive phrases with category and rendering effect.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<VocabularyEntry> entries);

  /// Parses the JSON data file format (see data/vocabulary.json).
  static Vocabulary from_json(std::string_view text);
  static Vocabulary load(const std::string& path);

  const std::vector<VocabularyEntry>& entries() const { return entries_; }
  std::vector<const VocabularyEntry*> for_organ(Organ o) const;
  const VocabularyEntry* find(Organ o, std::string_view phrase) const;
  bool contains(Organ o, std::string_view phrase) const { return find(o, phrase) != nullptr; }

 private:
  std::vector<VocabularyEntry> entries_;
};

/// The vocabulary shipped with the library (data/vocabulary.json, embedded at build time).
const Vocabulary& default_vocabulary();

/// Lowercase and collapse every run of non-alphanumerics into one space.
std::string normalize_phrase(std::string_view s);

}  // namespace tumorsynth
