#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "tumorsynth/vocabulary.hpp"
#include "tumorsynth/volume.hpp"

namespace tumorsynth {

enum class SizeBucket { small, medium, large };
std::string_view to_string(SizeBucket b);
SizeBucket size_bucket_from_string(std::string_view s);
/// small: d < 20 mm, medium: 20 <= d < 50, large: d >= 50.
SizeBucket size_bucket(double diameter_mm);

enum class CaseSource { real, method_A, method_B };
inline constexpr std::array<CaseSource, 3> kAllSources{CaseSource::real, CaseSource::method_A, CaseSource::method_B};
std::string_view to_string(CaseSource s);
CaseSource case_source_from_string(std::string_view s);

enum class Verdict { real, synthetic };
std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);

/// A pool entry before assembly.
struct CandidateCase {
  std::string volume_path;
  std::string mask_path;
  Organ organ = Organ::liver;
  double diameter_mm = 0;
  std::string report;
};

/// Loads the mask to measure its equivalent diameter.
CandidateCase candidate_from_files(const std::string& volume_path, const std::string& mask_path, Organ organ,
                                   std::string report);

struct TuringCase {
  std::string case_id;
  Organ organ = Organ::liver;
  SizeBucket size_bucket = SizeBucket::small;
  CaseSource source = CaseSource::real;  // server side only
  std::string volume_path;
  std::string mask_path;
  std::string report;
};
nlohmann::json to_json(const TuringCase& c);  // full record, including source
TuringCase turing_case_from_json(const nlohmann::json& j);

void save_case_set(const std::filesystem::path& path, const std::vector<TuringCase>& cases);
std::vector<TuringCase> load_case_set(const std::filesystem::path& path);

/// per_cell draws for every (source, organ, bucket), then one seeded shuffle. Case ids are assigned after the
/// shuffle so they carry no source information. Throws ContractError naming the first short cell.
std::vector<TuringCase> assemble_case_set(const std::map<CaseSource, std::vector<CandidateCase>>& pools, int per_cell,
                                          const std::vector<Organ>& organs, std::uint64_t seed);

struct Judgment {
  std::string case_id;
  Verdict verdict = Verdict::real;
  std::int64_t timestamp_ms = 0;
};

struct TuringSession {
  std::string session_id;
  std::string reader_id;
  std::uint64_t seed = 0;
  std::vector<std::string> order;                  // case ids, fixed at creation
  std::map<std::string, Judgment> judgments;       // case id -> judgment
  std::int64_t created_ms = 0;

  bool complete() const { return judgments.size() == order.size(); }
};

/// A seeded permutation of the case ids.
std::vector<std::string> session_order(const std::vector<TuringCase>& cases, std::uint64_t seed);

struct ErrorCell {
  Organ organ = Organ::liver;
  SizeBucket bucket = SizeBucket::small;
  std::string method;
  long wrong = 0;
  long total = 0;
  double error_rate = 0;  // percent
};

inline constexpr std::string_view kErrorRule =
    "per method and cell: wrong = synthetic-from-method judged real + real judged synthetic, over the real and "
    "method cases; real-case errors count toward every method";

struct ErrorReport {
  std::vector<ErrorCell> cells;
  std::vector<std::string> excluded_sessions;  // incomplete, left out with a warning
  std::string rule{kErrorRule};
};
nlohmann::json to_json(const ErrorReport& r);

/// method_names label method_A and method_B. Needs at least one complete session.
ErrorReport error_report(const std::vector<TuringSession>& sessions, const std::vector<TuringCase>& cases,
                         const std::array<std::string, 2>& method_names);

/// Sessions rebuilt from an append-only log; repeated (session, case) rows keep the first verdict.
std::vector<TuringSession> read_session_log(const std::filesystem::path& log, const std::vector<TuringCase>& cases);

/// Readers answering real/synthetic with probability 1/2 each; returns the pooled error rate in percent.
double simulate_random_readers(const std::vector<TuringCase>& cases, int sessions, std::uint64_t seed);

/// Session store with an append-only JSON-lines log. Thread safe.
class TuringService {
 public:
  /// Replays `log` if it exists.
  TuringService(std::vector<TuringCase> cases, std::filesystem::path log, std::uint64_t seed,
                std::array<std::string, 2> method_names = {"method_A", "method_B"});

  std::string create_session(const std::string& reader_id);
  /// Reader payload of the next unjudged case, or {"complete": true}. Never includes the source.
  nlohmann::json next_case(const std::string& session_id) const;
  /// Persisted before returning. NotFoundError for unknown session/case, ConflictError for a second verdict.
  nlohmann::json submit_judgment(const std::string& session_id, const std::string& case_id, Verdict v);

  /// Maintained as judgments arrive.
  ErrorReport report() const;
  std::vector<TuringSession> sessions() const;
  const std::vector<TuringCase>& cases() const { return cases_; }
  const TuringCase& find_case(const std::string& case_id) const;
  const std::array<std::string, 2>& method_names() const { return method_names_; }

  /// Test hook, called after a row is written and before the in-memory state and ack.
  std::function<void()> after_persist;

 private:
  void append(const nlohmann::json& row);
  void count(const TuringSession& s, const std::string& case_id, Verdict v);

  std::vector<TuringCase> cases_;
  std::map<std::string, std::size_t> case_index_;
  std::filesystem::path log_;
  std::uint64_t seed_;
  std::array<std::string, 2> method_names_;
  mutable std::mutex mu_;
  std::map<std::string, TuringSession> sessions_;
  // session -> (organ, bucket, method) -> {wrong, total}
  std::map<std::string, std::map<std::array<int, 3>, std::array<long, 2>>> tallies_;
  long next_session_ = 1;
};

/// 8-bit axial slice k of a case (preprocess window) with the mask overlay.
nlohmann::json case_slice(const TuringCase& c, int k);

/// HTTP surface: POST /sessions, GET /sessions/{id}/next, POST /sessions/{id}/judgments, GET /reports/errors,
/// GET /cases/{id}/slices/{k}.
class TuringServer {
 public:
  explicit TuringServer(TuringService& service);
  ~TuringServer();
  TuringServer(const TuringServer&) = delete;
  TuringServer& operator=(const TuringServer&) = delete;

  /// Blocks until stop().
  bool listen(const std::string& host, int port);
  /// Binds an ephemeral port and serves on a background thread; returns the port.
  int start(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace tumorsynth
