#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <json.hpp>

namespace dygrasp {

enum class EncoderKind { kMock, kRemote };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kMock;
  std::size_t d_bert = 768;
  std::string endpoint;
  std::uint64_t seed = 0;
  int timeout_ms = 30000;
  int max_retries = 3;

  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  // Deterministic; empty text maps to the zero vector.
  virtual Eigen::VectorXd encode(std::string_view text) const = 0;
  virtual std::string fingerprint() const = 0;
};

// Bag of hashed words: sum of one seeded unit vector per word occurrence,
// normalized to unit length.
class MockEncoder final : public TextEncoder {
 public:
  explicit MockEncoder(EncoderConfig cfg);
  std::size_t dim() const override { return cfg_.d_bert; }
  Eigen::VectorXd encode(std::string_view text) const override;
  std::string fingerprint() const override;

 private:
  EncoderConfig cfg_;
};

// POST /v1/encode {"text":".."} -> {"vector":[..]}
class RemoteEncoder final : public TextEncoder {
 public:
  explicit RemoteEncoder(EncoderConfig cfg);
  std::size_t dim() const override { return cfg_.d_bert; }
  Eigen::VectorXd encode(std::string_view text) const override;
  std::string fingerprint() const override;

 private:
  EncoderConfig cfg_;
};

std::unique_ptr<TextEncoder> make_encoder(const EncoderConfig& cfg);

}  // namespace dygrasp
