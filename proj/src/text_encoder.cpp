#include "dygrasp/text_encoder.hpp"

#include <cstdlib>

#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"
#include "dygrasp/http_client.hpp"
#include "dygrasp/tokenizer.hpp"

namespace dygrasp {

void EncoderConfig::validate() const {
  if (d_bert < 8) fail(ErrorKind::kInvalidConfig, "d_bert must be >= 8");
  if (kind == EncoderKind::kRemote && endpoint.empty()) {
    fail(ErrorKind::kInvalidConfig, "remote encoder needs an endpoint");
  }
}

nlohmann::json to_json(const EncoderConfig& cfg) {
  return {{"kind", cfg.kind == EncoderKind::kMock ? "mock" : "remote"},
          {"d_bert", cfg.d_bert},
          {"endpoint", cfg.endpoint},
          {"seed", cfg.seed}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  if (j.contains("kind")) {
    auto k = j.at("kind").get<std::string>();
    if (k == "mock") {
      c.kind = EncoderKind::kMock;
    } else if (k == "remote") {
      c.kind = EncoderKind::kRemote;
    } else {
      fail(ErrorKind::kInvalidConfig, "unknown encoder `" + k + "`");
    }
  }
  c.d_bert = j.value("d_bert", c.d_bert);
  c.endpoint = j.value("endpoint", c.endpoint);
  c.seed = j.value("seed", c.seed);
  return c;
}

MockEncoder::MockEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

Eigen::VectorXd MockEncoder::encode(std::string_view text) const {
  const auto d = static_cast<Eigen::Index>(cfg_.d_bert);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  const std::uint64_t base = splitmix64(cfg_.seed ^ 0xe11c0de5ULL);
  bool any = false;
  for (auto tok : split_tokens(text)) {
    auto c = static_cast<unsigned char>(tok.front());
    bool word = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                (c >= '0' && c <= '9') || c == '_' || c >= 0x80;
    if (!word) continue;
    std::string lowered(tok);
    for (auto& ch : lowered) {
      if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    }
    HashStream stream(fnv1a64(lowered, base));
    Eigen::VectorXd w(d);
    for (Eigen::Index i = 0; i < d; ++i) w[i] = stream.next_signed();
    sum += w / w.norm();
    any = true;
  }
  double n = sum.norm();
  if (!any || n == 0.0) return Eigen::VectorXd::Zero(d);
  return sum / n;
}

std::string MockEncoder::fingerprint() const {
  return "mock-encoder:seed=" + std::to_string(cfg_.seed) +
         ":d=" + std::to_string(cfg_.d_bert);
}

RemoteEncoder::RemoteEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

Eigen::VectorXd RemoteEncoder::encode(std::string_view text) const {
  const auto d = static_cast<Eigen::Index>(cfg_.d_bert);
  if (text.empty()) return Eigen::VectorXd::Zero(d);
  std::string key;
  if (const char* k = std::getenv("DYGRASP_API_KEY")) key = k;
  JsonHttpClient client(cfg_.endpoint, key, {cfg_.timeout_ms, cfg_.max_retries, 50});
  auto res = client.post("/v1/encode", {{"text", std::string(text)}});
  const auto& vec = res.at("vector");
  if (!vec.is_array() || static_cast<Eigen::Index>(vec.size()) != d) {
    fail(ErrorKind::kBackend, "remote encoder returned a vector of width " +
                                  std::to_string(vec.size()) + ", expected " +
                                  std::to_string(cfg_.d_bert));
  }
  Eigen::VectorXd out(d);
  for (Eigen::Index i = 0; i < d; ++i) out[i] = vec[static_cast<std::size_t>(i)].get<double>();
  return out;
}

std::string RemoteEncoder::fingerprint() const {
  return "remote-encoder:" + cfg_.endpoint + ":d=" + std::to_string(cfg_.d_bert);
}

std::unique_ptr<TextEncoder> make_encoder(const EncoderConfig& cfg) {
  if (cfg.kind == EncoderKind::kMock) return std::make_unique<MockEncoder>(cfg);
  return std::make_unique<RemoteEncoder>(cfg);
}

}  // namespace dygrasp
