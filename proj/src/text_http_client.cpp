#include "httplib.h"

#include "tumorsynth/errors.hpp"
#include "tumorsynth/text.hpp"

namespace tumorsynth {

HttpLMClient::HttpLMClient(std::string host, int port, std::string path, int timeout_seconds)
    : host_(std::move(host)), port_(port), path_(std::move(path)), timeout_seconds_(timeout_seconds) {}

LMResponse HttpLMClient::complete(const LMRequest& request) {
  httplib::Client cli(host_, port_);
  cli.set_read_timeout(timeout_seconds_, 0);
  cli.set_connection_timeout(timeout_seconds_, 0);
  auto res = cli.Post(path_, encode_request_line(request) + "\n", "application/x-ndjson");
  if (!res) throw TransportError("language-model endpoint unreachable: " + httplib::to_string(res.error()));
  if (res->status >= 500) throw TransportError("language-model endpoint returned " + std::to_string(res->status));
  if (res->status != 200) throw FormatError("language-model endpoint returned " + std::to_string(res->status));
  auto body = res->body;
  while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.pop_back();
  return decode_response_line(body);
}

}  // namespace tumorsynth
