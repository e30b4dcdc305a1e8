#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "tumorsynth/vocabulary.hpp"

namespace tumorsynth {

inline constexpr int kDefaultEmbeddingDim = 128;
inline constexpr int kDefaultVariantCount = 100;
inline constexpr double kDefaultSimilarityThreshold = 0.6;

struct RadiologyReport {
  std::string id;
  Organ organ = Organ::liver;
  std::string text;
};

struct DescriptorSet {
  std::string report_id;
  Organ organ = Organ::liver;
  std::vector<std::string> terms;  // vocabulary phrases, first-occurrence order, no duplicates
  std::string cleaned_text;
  bool warning = false;            // set when nothing in the report matched the vocabulary
  double similarity = 0.0;         // cleaned_text vs original report
};

struct ReportVariantSet {
  std::string report_id;
  std::vector<std::string> variants;
  std::vector<double> similarity_scores;
};

struct TextEmbedding {
  std::vector<double> vector;
  std::string source_text;
};

// ---------------------------------------------------------------------------
// Language-model client

struct LMRequest {
  std::string role;  // "extract", "generate" or "describe"
  std::string prompt;
  std::string payload;
};

struct LMResponse {
  std::string text;
};

/// One request line and one response line, each a single JSON object.
std::string encode_request_line(const LMRequest& r);
LMRequest decode_request_line(std::string_view line);
std::string encode_response_line(const LMResponse& r);
LMResponse decode_response_line(std::string_view line);

class LMClient {
 public:
  virtual ~LMClient() = default;
  /// Throws TransportError on a failed exchange.
  virtual LMResponse complete(const LMRequest& request) = 0;
  virtual bool deterministic() const { return false; }
};

/// Deterministic in-process client. Requests are serialized to the wire
/// format and answered by a pure function of the request bytes.
class MockLMClient : public LMClient {
 public:
  explicit MockLMClient(const Vocabulary& vocab = default_vocabulary()) : vocab_(&vocab) {}

  LMResponse complete(const LMRequest& request) override;
  bool deterministic() const override { return true; }

  /// Line-level handler: request line in, response line out.
  std::string handle_line(std::string_view request_line) const;

  /// Make the next `n` calls fail with TransportError (fault injection for tests).
  void fail_next(int n) { fail_remaining_ = n; }
  int calls() const { return calls_; }

 private:
  const Vocabulary* vocab_;
  mutable std::mutex mu_;
  int fail_remaining_ = 0;
  int calls_ = 0;
};

/// Posts request lines to an external endpoint; the server answers with a response line.
class HttpLMClient : public LMClient {
 public:
  HttpLMClient(std::string host, int port, std::string path = "/v1/complete", int timeout_seconds = 60);
  LMResponse complete(const LMRequest& request) override;

 private:
  std::string host_;
  int port_;
  std::string path_;
  int timeout_seconds_;
};

/// Retries `fn` on TransportError up to `attempts` times.
LMResponse complete_with_retry(LMClient& client, const LMRequest& request, int attempts);

// ---------------------------------------------------------------------------
// Operations

/// Case-insensitive longest-match scan of `text` against the organ's vocabulary.
std::vector<std::string> scan_vocabulary(std::string_view text, Organ organ, const Vocabulary& vocab);

/// "a hypodense ill-defined lesion in the liver"
std::string render_description(const std::vector<std::string>& terms, Organ organ);

/// Sentence frame `frame` (cycled modulo the bank size) with the terms slotted verbatim.
std::string render_variant(const std::vector<std::string>& terms, Organ organ, int frame);
int variant_frame_count();

DescriptorSet extract_descriptors(const RadiologyReport& report, LMClient& client,
                                  const Vocabulary& vocab = default_vocabulary());

ReportVariantSet generate_variants(const DescriptorSet& d, int n, LMClient& client,
                                   double threshold = kDefaultSimilarityThreshold);

/// Signed-hash bag-of-words embedding, L2-normalized.
TextEmbedding embed_text(std::string_view text, int dim = kDefaultEmbeddingDim);

/// Normalized mean of the variant embeddings.
TextEmbedding embed_mean(const std::vector<std::string>& texts, int dim = kDefaultEmbeddingDim);

std::vector<std::string> tokenize(std::string_view text);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct SimilarityResult {
  double score = 0.0;
  bool pass = false;
};

SimilarityResult validate_similarity(std::string_view candidate, std::string_view reference,
                                     double threshold = kDefaultSimilarityThreshold);

}  // namespace tumorsynth
