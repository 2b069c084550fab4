#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dygrasp/tokenizer.hpp"

namespace dygrasp {

struct PromptSpan {
  std::size_t span_id = 0;
  std::size_t first_token = 0;
  std::size_t last_token = 0;  // inclusive
};

struct TokenizedPrompt {
  std::vector<TokenId> tokens;
  std::vector<PromptSpan> spans;
  std::string text;  // rendered text, kept for diagnostics and generation

  // Spans must be ordered, non-overlapping, in bounds and uniquely numbered.
  void validate() const;
};

// Row j is the hidden state of token j; shape (num_tokens, d_llm).
struct HiddenStates {
  Eigen::MatrixXd vectors;
};

struct TokenCount {
  std::size_t count = 0;
  bool estimated = false;
};

enum class BackendKind { kMock, kOracle, kRemote };

std::string_view backend_kind_name(BackendKind kind);
BackendKind parse_backend_kind(std::string_view name);

struct BackendConfig {
  BackendKind kind = BackendKind::kMock;
  std::size_t d_llm = 64;
  std::string endpoint;
  std::string api_key;  // taken from DYGRASP_API_KEY when empty
  std::uint64_t seed = 0;
  std::size_t max_generation_tokens = 192;
  std::size_t context_limit = 8192;
  std::string layer = "last";
  bool remote_hidden_states = true;
  int timeout_ms = 30000;
  int max_retries = 3;
  int retry_backoff_ms = 50;

  void validate() const;
};

nlohmann::json to_json(const BackendConfig& cfg);
BackendConfig backend_config_from_json(const nlohmann::json& j);

class LlmBackend {
 public:
  virtual ~LlmBackend() = default;

  virtual BackendKind kind() const = 0;
  virtual std::size_t hidden_dim() const = 0;
  virtual std::size_t context_limit() const = 0;
  virtual bool supports_hidden_states() const = 0;

  // Causal: row j depends only on tokens[0..j].
  virtual HiddenStates hidden_states(const TokenizedPrompt& prompt) const = 0;
  virtual std::string generate(std::string_view prompt_text) const = 0;
  virtual TokenCount count_tokens(std::string_view text) const;

  // Identifies everything that determines the backend's outputs.
  virtual std::string fingerprint() const = 0;
};

// Deterministic causal mock. Rows are unit vectors derived from a rolling
// hash over the token prefix and the seed.
class MockBackend final : public LlmBackend {
 public:
  explicit MockBackend(BackendConfig cfg);

  BackendKind kind() const override { return BackendKind::kMock; }
  std::size_t hidden_dim() const override { return cfg_.d_llm; }
  std::size_t context_limit() const override { return cfg_.context_limit; }
  bool supports_hidden_states() const override { return true; }
  HiddenStates hidden_states(const TokenizedPrompt& prompt) const override;
  std::string generate(std::string_view prompt_text) const override;
  std::string fingerprint() const override;

  static constexpr std::size_t kTopTerms = 8;

 private:
  BackendConfig cfg_;
};

// Unit vector for one prefix-hash state; shared by the mock and oracle.
Eigen::VectorXd prefix_vector(std::uint64_t state, std::size_t dim);
std::uint64_t prefix_seed(std::uint64_t seed);
std::uint64_t prefix_step(std::uint64_t state, TokenId token);

// The k most frequent content words of a text (ties by first occurrence).
std::vector<std::string> top_terms(std::string_view text, std::size_t k);

// Cuts text down to at most max_tokens mock tokens.
std::string truncate_tokens(std::string_view text, std::size_t max_tokens);

// HTTP client for a self-hosted inference server:
//   POST /v1/hidden_states {"tokens":[..],"layer":"last"} -> {"vectors":[[..]]}
//   POST /v1/generate {"prompt":"..","max_tokens":N}
//        -> {"text":"..","usage":{"prompt_tokens":N,"completion_tokens":M}}
class RemoteBackend final : public LlmBackend {
 public:
  explicit RemoteBackend(BackendConfig cfg);
  ~RemoteBackend() override;

  BackendKind kind() const override { return BackendKind::kRemote; }
  std::size_t hidden_dim() const override { return cfg_.d_llm; }
  std::size_t context_limit() const override { return cfg_.context_limit; }
  bool supports_hidden_states() const override {
    return cfg_.remote_hidden_states;
  }
  HiddenStates hidden_states(const TokenizedPrompt& prompt) const override;
  std::string generate(std::string_view prompt_text) const override;
  TokenCount count_tokens(std::string_view text) const override;
  std::string fingerprint() const override;

 private:
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

  BackendConfig cfg_;
  mutable std::mutex usage_mutex_;
  // Server-reported prompt token counts keyed by prompt hash.
  mutable std::unordered_map<std::uint64_t, std::size_t> reported_usage_;
};

std::unique_ptr<LlmBackend> make_basic_backend(const BackendConfig& cfg);

}  // namespace dygrasp
