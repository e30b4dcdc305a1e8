#include "tumorsynth/turing.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "httplib.h"

#include "tumorsynth/errors.hpp"
#include "tumorsynth/hash.hpp"
#include "tumorsynth/rng.hpp"

namespace tumorsynth {

using nlohmann::json;

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::uint64_t session_seed(std::uint64_t seed, const std::string& session_id) {
  return Rng::mix(seed ^ fnv1a(session_id));
}

// contribution of one judgment to method k's cell: {wrong, counted}
std::array<long, 2> judged(CaseSource src, Verdict v, int k) {
  const CaseSource method = k == 0 ? CaseSource::method_A : CaseSource::method_B;
  if (src == CaseSource::real) return {v == Verdict::synthetic ? 1L : 0L, 1L};
  if (src == method) return {v == Verdict::real ? 1L : 0L, 1L};
  return {0, 0};
}

ErrorReport report_from_tallies(const std::map<std::array<int, 3>, std::array<long, 2>>& t,
                                const std::array<std::string, 2>& names) {
  ErrorReport r;
  for (const auto& [key, c] : t) {
    if (c[1] == 0) continue;
    ErrorCell cell;
    cell.organ = static_cast<Organ>(key[0]);
    cell.bucket = static_cast<SizeBucket>(key[1]);
    cell.method = names[static_cast<std::size_t>(key[2])];
    cell.wrong = c[0];
    cell.total = c[1];
    cell.error_rate = 100.0 * static_cast<double>(c[0]) / static_cast<double>(c[1]);
    r.cells.push_back(std::move(cell));
  }
  return r;
}

}  // namespace

std::string_view to_string(SizeBucket b) {
  switch (b) {
    case SizeBucket::small: return "small";
    case SizeBucket::medium: return "medium";
    case SizeBucket::large: return "large";
  }
  return "?";
}

SizeBucket size_bucket_from_string(std::string_view s) {
  if (s == "small") return SizeBucket::small;
  if (s == "medium") return SizeBucket::medium;
  if (s == "large") return SizeBucket::large;
  throw ValidationError("unknown size bucket '" + std::string(s) + "'");
}

SizeBucket size_bucket(double d) {
  if (!std::isfinite(d) || d < 0) throw ValidationError("diameter must be finite and >= 0");
  if (d < 20.0) return SizeBucket::small;
  if (d < 50.0) return SizeBucket::medium;
  return SizeBucket::large;
}

std::string_view to_string(CaseSource s) {
  switch (s) {
    case CaseSource::real: return "real";
    case CaseSource::method_A: return "method_A";
    case CaseSource::method_B: return "method_B";
  }
  return "?";
}

CaseSource case_source_from_string(std::string_view s) {
  for (auto c : kAllSources)
    if (to_string(c) == s) return c;
  throw ValidationError("unknown case source '" + std::string(s) + "'");
}

std::string_view to_string(Verdict v) { return v == Verdict::real ? "real" : "synthetic"; }

Verdict verdict_from_string(std::string_view s) {
  if (s == "real") return Verdict::real;
  if (s == "synthetic") return Verdict::synthetic;
  throw ValidationError("verdict must be 'real' or 'synthetic'");
}

CandidateCase candidate_from_files(const std::string& volume_path, const std::string& mask_path, Organ organ,
                                   std::string report) {
  const Volume v = load_volume(volume_path);
  const TumorMask m = load_mask(mask_path);
  if (m.empty()) throw ContractError("candidate mask " + mask_path + " is empty");
  const auto& sp = v.spacing();
  const double mm3 = static_cast<double>(m.count()) * sp.d * sp.h * sp.w;
  return {volume_path, mask_path, organ, equivalent_diameter_mm(mm3), std::move(report)};
}

json to_json(const TuringCase& c) {
  return {{"case_id", c.case_id},         {"organ", to_string(c.organ)},   {"size_bucket", to_string(c.size_bucket)},
          {"source", to_string(c.source)}, {"volume_path", c.volume_path}, {"mask_path", c.mask_path},
          {"report", c.report}};
}

TuringCase turing_case_from_json(const json& j) {
  try {
    return {j.at("case_id").get<std::string>(),
            organ_from_string(j.at("organ").get<std::string>()),
            size_bucket_from_string(j.at("size_bucket").get<std::string>()),
            case_source_from_string(j.at("source").get<std::string>()),
            j.at("volume_path").get<std::string>(),
            j.at("mask_path").get<std::string>(),
            j.value("report", std::string())};
  } catch (const json::exception& e) {
    throw FormatError(std::string("turing case: ") + e.what());
  }
}

void save_case_set(const std::filesystem::path& path, const std::vector<TuringCase>& cases) {
  json arr = json::array();
  for (const auto& c : cases) arr.push_back(to_json(c));
  std::ofstream f(path);
  f << json{{"cases", arr}}.dump(2) << "\n";
  if (!f) throw Error("could not write " + path.string());
}

std::vector<TuringCase> load_case_set(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("case set " + path.string() + " not found");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  std::vector<TuringCase> out;
  for (const auto& c : j.at("cases")) out.push_back(turing_case_from_json(c));
  return out;
}

std::vector<TuringCase> assemble_case_set(const std::map<CaseSource, std::vector<CandidateCase>>& pools, int per_cell,
                                          const std::vector<Organ>& organs, std::uint64_t seed) {
  if (per_cell < 1) throw ValidationError("per_cell must be >= 1");
  if (organs.empty()) throw ValidationError("at least one organ is needed");
  Rng rng(seed);
  std::vector<TuringCase> out;
  for (auto src : kAllSources) {
    const auto it = pools.find(src);
    for (auto organ : organs)
      for (auto bucket : {SizeBucket::small, SizeBucket::medium, SizeBucket::large}) {
        std::vector<const CandidateCase*> cell;
        if (it != pools.end()) {
          for (const auto& c : it->second)
            if (c.organ == organ && size_bucket(c.diameter_mm) == bucket) cell.push_back(&c);
        }
        if (cell.size() < static_cast<std::size_t>(per_cell)) {
          throw ContractError("pool " + std::string(to_string(src)) + "/" + std::string(to_string(organ)) + "/" +
                              std::string(to_string(bucket)) + " has " + std::to_string(cell.size()) + " cases, needs " +
                              std::to_string(per_cell));
        }
        rng.shuffle(cell.begin(), cell.end());
        for (int i = 0; i < per_cell; ++i) {
          const auto& c = *cell[static_cast<std::size_t>(i)];
          out.push_back({"", organ, bucket, src, c.volume_path, c.mask_path, c.report});
        }
      }
  }
  rng.shuffle(out.begin(), out.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case-%04zu", i + 1);
    out[i].case_id = id;
  }
  return out;
}

std::vector<std::string> session_order(const std::vector<TuringCase>& cases, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  return ids;
}

json to_json(const ErrorReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"organ", to_string(c.organ)},
                     {"size_bucket", to_string(c.bucket)},
                     {"method", c.method},
                     {"wrong", c.wrong},
                     {"total", c.total},
                     {"error_rate", c.error_rate}});
  }
  return {{"rule", r.rule}, {"cells", cells}, {"excluded_sessions", r.excluded_sessions}};
}

ErrorReport error_report(const std::vector<TuringSession>& sessions, const std::vector<TuringCase>& cases,
                         const std::array<std::string, 2>& method_names) {
  std::map<std::string, const TuringCase*> by_id;
  for (const auto& c : cases) by_id[c.case_id] = &c;
  std::map<std::array<int, 3>, std::array<long, 2>> t;
  std::vector<std::string> excluded;
  int complete = 0;
  for (const auto& s : sessions) {
    if (!s.complete()) {
      excluded.push_back(s.session_id);
      continue;
    }
    ++complete;
    for (const auto& [id, j] : s.judgments) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw NotFoundError("session " + s.session_id + " judged unknown case " + id);
      const auto& c = *it->second;
      for (int k = 0; k < 2; ++k) {
        const auto add = judged(c.source, j.verdict, k);
        auto& cell = t[{static_cast<int>(c.organ), static_cast<int>(c.size_bucket), k}];
        cell[0] += add[0];
        cell[1] += add[1];
      }
    }
  }
  if (complete == 0) throw ContractError("error report needs at least one complete session");
  auto r = report_from_tallies(t, method_names);
  r.excluded_sessions = std::move(excluded);
  return r;
}

std::vector<TuringSession> read_session_log(const std::filesystem::path& log, const std::vector<TuringCase>& cases) {
  std::ifstream f(log);
  if (!f) throw NotFoundError("session log " + log.string() + " not found");
  std::set<std::string> known;
  for (const auto& c : cases) known.insert(c.case_id);
  std::vector<TuringSession> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
      const auto type = row.at("type").get<std::string>();
      const auto sid = row.at("session_id").get<std::string>();
      if (type == "session") {
        if (index.count(sid)) continue;
        TuringSession s;
        s.session_id = sid;
        s.reader_id = row.at("reader_id").get<std::string>();
        s.seed = row.at("seed").get<std::uint64_t>();
        s.created_ms = row.value("ts", std::int64_t{0});
        s.order = session_order(cases, s.seed);
        index[sid] = out.size();
        out.push_back(std::move(s));
      } else if (type == "judgment") {
        const auto it = index.find(sid);
        if (it == index.end()) throw FormatError("judgment for unknown session " + sid);
        const auto cid = row.at("case_id").get<std::string>();
        if (!known.count(cid)) throw FormatError("judgment for unknown case " + cid);
        auto& s = out[it->second];
        if (s.judgments.count(cid)) continue;  // first verdict wins
        s.judgments[cid] = {cid, verdict_from_string(row.at("verdict").get<std::string>()), row.value("ts", std::int64_t{0})};
      } else {
        throw FormatError("unknown row type " + type);
      }
    } catch (const json::exception& e) {
      throw FormatError(log.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(log.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

double simulate_random_readers(const std::vector<TuringCase>& cases, int sessions, std::uint64_t seed) {
  if (sessions < 1) throw ValidationError("need at least one simulated session");
  Rng rng(seed);
  std::vector<TuringSession> ss;
  for (int i = 0; i < sessions; ++i) {
    TuringSession s;
    s.session_id = "sim" + std::to_string(i);
    for (const auto& c : cases) {
      s.order.push_back(c.case_id);
      s.judgments[c.case_id] = {c.case_id, rng.uniform() < 0.5 ? Verdict::real : Verdict::synthetic, 0};
    }
    ss.push_back(std::move(s));
  }
  const auto r = error_report(ss, cases, {"method_A", "method_B"});
  long wrong = 0, total = 0;
  for (const auto& c : r.cells) {
    wrong += c.wrong;
    total += c.total;
  }
  return total > 0 ? 100.0 * static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------

TuringService::TuringService(std::vector<TuringCase> cases, std::filesystem::path log, std::uint64_t seed,
                             std::array<std::string, 2> method_names)
    : cases_(std::move(cases)), log_(std::move(log)), seed_(seed), method_names_(std::move(method_names)) {
  if (cases_.empty()) throw ContractError("the Turing service needs at least one case");
  for (std::size_t i = 0; i < cases_.size(); ++i) {
    if (!case_index_.emplace(cases_[i].case_id, i).second) throw ValidationError("duplicate case id " + cases_[i].case_id);
  }
  if (std::filesystem::exists(log_)) {
    for (auto& s : read_session_log(log_, cases_)) {
      for (const auto& [cid, j] : s.judgments) count(s, cid, j.verdict);
      if (s.session_id.size() > 1 && s.session_id[0] == 's') {
        try {
          next_session_ = std::max(next_session_, std::stol(s.session_id.substr(1)) + 1);
        } catch (const std::exception&) {
        }
      }
      sessions_[s.session_id] = std::move(s);
    }
  }
}

void TuringService::append(const json& row) {
  std::ofstream f(log_, std::ios::app);
  f << row.dump() << "\n";
  f.flush();
  if (!f) throw Error("could not append to " + log_.string());
}

void TuringService::count(const TuringSession& s, const std::string& case_id, Verdict v) {
  const auto& c = cases_[case_index_.at(case_id)];
  auto& t = tallies_[s.session_id];
  for (int k = 0; k < 2; ++k) {
    const auto add = judged(c.source, v, k);
    auto& cell = t[{static_cast<int>(c.organ), static_cast<int>(c.size_bucket), k}];
    cell[0] += add[0];
    cell[1] += add[1];
  }
}

std::string TuringService::create_session(const std::string& reader_id) {
  if (reader_id.empty()) throw ValidationError("reader_id must be nonempty");
  std::lock_guard lock(mu_);
  TuringSession s;
  s.session_id = "s" + std::to_string(next_session_++);
  s.reader_id = reader_id;
  s.seed = session_seed(seed_, s.session_id);
  s.order = session_order(cases_, s.seed);
  s.created_ms = now_ms();
  append({{"type", "session"}, {"session_id", s.session_id}, {"reader_id", reader_id}, {"seed", s.seed},
          {"ts", s.created_ms}});
  const auto id = s.session_id;
  sessions_[id] = std::move(s);
  return id;
}

json TuringService::next_case(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  const auto& s = it->second;
  for (std::size_t i = 0; i < s.order.size(); ++i) {
    if (s.judgments.count(s.order[i])) continue;
    const auto& c = cases_[case_index_.at(s.order[i])];
    const Volume v = load_volume(c.volume_path);
    return {{"session_id", session_id},
            {"case_id", c.case_id},
            {"position", i + 1},
            {"total", s.order.size()},
            {"organ", to_string(c.organ)},
            {"size_bucket", to_string(c.size_bucket)},
            {"report", c.report},
            {"slices", {{"count", v.shape().d}, {"url", "/cases/" + c.case_id + "/slices/{k}"}}}};
  }
  return {{"session_id", session_id}, {"complete", true}};
}

json TuringService::submit_judgment(const std::string& session_id, const std::string& case_id, Verdict v) {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  if (!case_index_.count(case_id)) throw NotFoundError("unknown case " + case_id);
  auto& s = it->second;
  if (s.judgments.count(case_id)) throw ConflictError("case " + case_id + " already judged in " + session_id);
  const auto ts = now_ms();
  append({{"type", "judgment"}, {"session_id", session_id}, {"case_id", case_id}, {"verdict", to_string(v)},
          {"ts", ts}});
  if (after_persist) after_persist();
  s.judgments[case_id] = {case_id, v, ts};
  count(s, case_id, v);
  return {{"session_id", session_id}, {"case_id", case_id}, {"recorded", true}, {"remaining",
          s.order.size() - s.judgments.size()}};
}

ErrorReport TuringService::report() const {
  std::lock_guard lock(mu_);
  std::map<std::array<int, 3>, std::array<long, 2>> t;
  std::vector<std::string> excluded;
  for (const auto& [id, s] : sessions_) {
    if (!s.complete()) {
      excluded.push_back(id);
      continue;
    }
    const auto tt = tallies_.find(id);
    if (tt == tallies_.end()) continue;
    for (const auto& [key, c] : tt->second) {
      t[key][0] += c[0];
      t[key][1] += c[1];
    }
  }
  auto r = report_from_tallies(t, method_names_);
  r.excluded_sessions = std::move(excluded);
  return r;
}

std::vector<TuringSession> TuringService::sessions() const {
  std::lock_guard lock(mu_);
  std::vector<TuringSession> out;
  for (const auto& [_, s] : sessions_) out.push_back(s);
  return out;
}

const TuringCase& TuringService::find_case(const std::string& case_id) const {
  const auto it = case_index_.find(case_id);
  if (it == case_index_.end()) throw NotFoundError("unknown case " + case_id);
  return cases_[it->second];
}

json case_slice(const TuringCase& c, int k) {
  const Volume raw = load_volume(c.volume_path);
  const Volume v = raw.normalized() ? raw : preprocess(raw);
  const TumorMask m = load_mask(c.mask_path);
  const auto& s = v.shape();
  if (m.shape() != s) throw ShapeError("case " + c.case_id + " mask does not match its volume");
  if (k < 0 || k >= s.d) throw NotFoundError("slice " + std::to_string(k) + " out of range for " + c.case_id);
  json pixels = json::array(), mask = json::array();
  for (int y = 0; y < s.h; ++y) {
    json prow = json::array(), mrow = json::array();
    for (int x = 0; x < s.w; ++x) {
      prow.push_back(static_cast<int>(std::lround(255.0 * std::clamp(static_cast<double>(v.at(k, y, x)), 0.0, 1.0))));
      mrow.push_back(static_cast<int>(m.at(k, y, x)));
    }
    pixels.push_back(std::move(prow));
    mask.push_back(std::move(mrow));
  }
  return {{"case_id", c.case_id}, {"k", k}, {"height", s.h}, {"width", s.w}, {"pixels", pixels}, {"mask", mask}};
}

// ---------------------------------------------------------------------------

struct TuringServer::Impl {
  TuringService& svc;
  httplib::Server http;
  std::thread worker;

  explicit Impl(TuringService& s) : svc(s) {}

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      reply(res, 200, f());
    } catch (const NotFoundError& e) {
      reply(res, 404, {{"error", e.what()}});
    } catch (const ConflictError& e) {
      reply(res, 409, {{"error", e.what()}});
    } catch (const ValidationError& e) {
      reply(res, 400, {{"error", e.what()}});
    } catch (const ContractError& e) {
      reply(res, 409, {{"error", e.what()}});
    } catch (const json::exception& e) {
      reply(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
    } catch (const std::exception& e) {
      reply(res, 500, {{"error", e.what()}});
    }
  }

  void routes() {
    http.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        return json{{"session_id", svc.create_session(body.at("reader_id").get<std::string>())}};
      });
    });
    http.Get(R"(/sessions/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return svc.next_case(req.matches[1]); });
    });
    http.Post(R"(/sessions/([^/]+)/judgments)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        return svc.submit_judgment(req.matches[1], body.at("case_id").get<std::string>(),
                                   verdict_from_string(body.at("verdict").get<std::string>()));
      });
    });
    http.Get("/reports/errors", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { return to_json(svc.report()); });
    });
    http.Get(R"(/cases/([^/]+)/slices/(-?\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        // the slice record is reader facing; the case's source stays on the server
        return case_slice(svc.find_case(req.matches[1]), std::stoi(req.matches[2]));
      });
    });
  }
};

TuringServer::TuringServer(TuringService& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

TuringServer::~TuringServer() { stop(); }

bool TuringServer::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }

int TuringServer::start(const std::string& host) {
  const int port = impl_->http.bind_to_any_port(host);
  if (port <= 0) throw Error("could not bind a port on " + host);
  impl_->worker = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return port;
}

void TuringServer::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

}  // namespace tumorsynth
