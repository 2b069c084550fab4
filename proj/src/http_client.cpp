#include "dygrasp/http_client.hpp"

#include <chrono>
#include <thread>

#include <httplib.h>

#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"

namespace dygrasp {

JsonHttpClient::JsonHttpClient(std::string endpoint, std::string api_key,
                               HttpRetryPolicy policy)
    : endpoint_(std::move(endpoint)), api_key_(std::move(api_key)), policy_(policy) {}

nlohmann::json JsonHttpClient::post(const std::string& path,
                                    const nlohmann::json& body,
                                    bool missing_is_capability) const {
  httplib::Client client(endpoint_);
  const auto timeout = std::chrono::milliseconds(policy_.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  const std::string payload = body.dump();
  std::string last_error;
  for (int attempt = 0; attempt <= policy_.max_retries; ++attempt) {
    if (attempt > 0) {
      log::warn("backend_retry",
                {{"path", path}, {"attempt", attempt}, {"reason", last_error}});
      std::this_thread::sleep_for(
          std::chrono::milliseconds(policy_.backoff_ms * (1 << (attempt - 1))));
    }
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "http " + std::to_string(res->status);
      continue;
    }
    if (res->status == 404 && missing_is_capability) {
      fail(ErrorKind::kCapability, endpoint_ + path + " is not served");
    }
    if (res->status != 200) {
      fail(ErrorKind::kBackend,
           endpoint_ + path + " returned http " + std::to_string(res->status));
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kBackend, endpoint_ + path + " returned invalid JSON: " + e.what());
    }
  }
  fail(ErrorKind::kTransport, endpoint_ + path + " failed after " +
                                  std::to_string(policy_.max_retries) +
                                  " retries: " + last_error);
}

}  // namespace dygrasp
