#pragma once

#include <string>

#include <json.hpp>

namespace dygrasp {

struct HttpRetryPolicy {
  int timeout_ms = 30000;
  int max_retries = 3;
  int backoff_ms = 50;
};

// JSON-over-HTTP POST with bounded retries on transport errors and 5xx.
// 4xx responses are not retried. Each retry logs a `backend_retry` event.
class JsonHttpClient {
 public:
  JsonHttpClient(std::string endpoint, std::string api_key, HttpRetryPolicy policy);

  // Throws Error(kTransport) once retries are exhausted, Error(kCapability)
  // on 404 when `missing_is_capability` is set, Error(kBackend) otherwise.
  nlohmann::json post(const std::string& path, const nlohmann::json& body,
                      bool missing_is_capability = false) const;

  const std::string& endpoint() const { return endpoint_; }

 private:
  std::string endpoint_;
  std::string api_key_;
  HttpRetryPolicy policy_;
};

}  // namespace dygrasp
