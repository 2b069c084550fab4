#include "dygrasp/llm_backend.hpp"

#include <algorithm>
#include <cstdlib>
#include <map>
#include <set>


#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"
#include "dygrasp/http_client.hpp"
#include "dygrasp/log.hpp"

namespace dygrasp {

void TokenizedPrompt::validate() const {
  std::set<std::size_t> ids;
  std::size_t next_free = 0;
  for (const auto& s : spans) {
    if (s.first_token > s.last_token || s.last_token >= tokens.size()) {
      fail(ErrorKind::kInvalidArgument,
           "span " + std::to_string(s.span_id) + " out of bounds");
    }
    if (s.first_token < next_free) {
      fail(ErrorKind::kInvalidArgument,
           "span " + std::to_string(s.span_id) + " overlaps its predecessor");
    }
    if (!ids.insert(s.span_id).second) {
      fail(ErrorKind::kInvalidArgument,
           "duplicate span id " + std::to_string(s.span_id));
    }
    next_free = s.last_token + 1;
  }
}

std::string_view backend_kind_name(BackendKind kind) {
  switch (kind) {
    case BackendKind::kMock: return "mock";
    case BackendKind::kOracle: return "oracle";
    case BackendKind::kRemote: return "remote";
  }
  return "mock";
}

BackendKind parse_backend_kind(std::string_view name) {
  if (name == "mock") return BackendKind::kMock;
  if (name == "oracle") return BackendKind::kOracle;
  if (name == "remote") return BackendKind::kRemote;
  fail(ErrorKind::kInvalidConfig, "unknown backend `" + std::string(name) + "`");
}

void BackendConfig::validate() const {
  if (d_llm < 8) fail(ErrorKind::kInvalidConfig, "d_llm must be >= 8");
  if (max_generation_tokens == 0) {
    fail(ErrorKind::kInvalidConfig, "max_generation_tokens must be positive");
  }
  if (context_limit == 0) {
    fail(ErrorKind::kInvalidConfig, "context_limit must be positive");
  }
  if (kind == BackendKind::kRemote && endpoint.empty()) {
    fail(ErrorKind::kInvalidConfig, "remote backend needs an endpoint");
  }
}

nlohmann::json to_json(const BackendConfig& cfg) {
  return {{"kind", backend_kind_name(cfg.kind)},
          {"d_llm", cfg.d_llm},
          {"endpoint", cfg.endpoint},
          {"seed", cfg.seed},
          {"max_generation_tokens", cfg.max_generation_tokens},
          {"context_limit", cfg.context_limit},
          {"layer", cfg.layer},
          {"remote_hidden_states", cfg.remote_hidden_states},
          {"timeout_ms", cfg.timeout_ms},
          {"max_retries", cfg.max_retries},
          {"retry_backoff_ms", cfg.retry_backoff_ms}};
}

BackendConfig backend_config_from_json(const nlohmann::json& j) {
  BackendConfig c;
  if (j.contains("kind")) c.kind = parse_backend_kind(j.at("kind").get<std::string>());
  c.d_llm = j.value("d_llm", c.d_llm);
  c.endpoint = j.value("endpoint", c.endpoint);
  c.seed = j.value("seed", c.seed);
  c.max_generation_tokens = j.value("max_generation_tokens", c.max_generation_tokens);
  c.context_limit = j.value("context_limit", c.context_limit);
  c.layer = j.value("layer", c.layer);
  c.remote_hidden_states = j.value("remote_hidden_states", c.remote_hidden_states);
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.retry_backoff_ms = j.value("retry_backoff_ms", c.retry_backoff_ms);
  return c;
}

TokenCount LlmBackend::count_tokens(std::string_view text) const {
  return {count_mock_tokens(text), false};
}

std::uint64_t prefix_seed(std::uint64_t seed) {
  return splitmix64(seed ^ 0x5eed5eed5eed5eedULL);
}

std::uint64_t prefix_step(std::uint64_t state, TokenId token) {
  return hash_combine(state, static_cast<std::uint64_t>(token));
}

Eigen::VectorXd prefix_vector(std::uint64_t state, std::size_t dim) {
  HashStream stream(state);
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) v[static_cast<Eigen::Index>(i)] = stream.next_signed();
  double n = v.norm();
  if (n == 0.0) {
    v.setZero();
    v[0] = 1.0;
    return v;
  }
  return v / n;
}

namespace {

const std::set<std::string, std::less<>>& stopwords() {
  static const std::set<std::string, std::less<>> words = {
      "the", "and", "for", "with", "that", "this", "from", "are", "was",
      "were", "has", "have", "had", "not", "but", "you", "your", "his",
      "her", "its", "our", "their", "they", "them", "she", "him", "who",
      "what", "which", "when", "where", "how", "all", "any", "can", "will",
      "would", "should", "could", "into", "about", "over", "than", "then",
      "there", "these", "those", "been", "being", "also", "only", "such",
      "each", "per", "via", "text"};
  return words;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

bool is_content_word(std::string_view w) {
  if (w.size() < 3) return false;
  bool has_alpha = false;
  for (unsigned char c : w) {
    if (c >= '0' && c <= '9') continue;
    if (c == '_') continue;
    has_alpha = true;
  }
  if (!has_alpha) return false;
  return !stopwords().contains(lower(w));
}

}  // namespace

std::vector<std::string> top_terms(std::string_view text, std::size_t k) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> stats;  // count, first
  std::size_t pos = 0;
  for (auto tok : split_tokens(text)) {
    if (is_content_word(tok)) {
      auto [it, inserted] = stats.emplace(lower(tok), std::make_pair(0, pos));
      ++it->second.first;
    }
    ++pos;
  }
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> ranked(
      stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

std::string truncate_tokens(std::string_view text, std::size_t max_tokens) {
  auto toks = split_tokens(text);
  if (toks.size() <= max_tokens) return std::string(text);
  auto last = toks[max_tokens - 1];
  auto end = static_cast<std::size_t>(last.data() - text.data()) + last.size();
  return std::string(text.substr(0, end));
}

MockBackend::MockBackend(BackendConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
}

HiddenStates MockBackend::hidden_states(const TokenizedPrompt& prompt) const {
  if (prompt.tokens.size() > cfg_.context_limit) {
    fail(ErrorKind::kContextOverflow,
         "prompt of " + std::to_string(prompt.tokens.size()) +
             " tokens exceeds context limit " + std::to_string(cfg_.context_limit));
  }
  HiddenStates hs;
  hs.vectors.resize(static_cast<Eigen::Index>(prompt.tokens.size()),
                    static_cast<Eigen::Index>(cfg_.d_llm));
  std::uint64_t state = prefix_seed(cfg_.seed);
  for (std::size_t j = 0; j < prompt.tokens.size(); ++j) {
    state = prefix_step(state, prompt.tokens[j]);
    hs.vectors.row(static_cast<Eigen::Index>(j)) =
        prefix_vector(state, cfg_.d_llm).transpose();
  }
  return hs;
}

std::string MockBackend::generate(std::string_view prompt_text) const {
  if (count_mock_tokens(prompt_text) > cfg_.context_limit) {
    fail(ErrorKind::kContextOverflow,
         "prompt exceeds context limit " + std::to_string(cfg_.context_limit));
  }
  std::uint64_t h = fnv1a64(prompt_text, prefix_seed(cfg_.seed));
  std::string out = "SUMMARY[" + hex64(h).substr(0, 8) + "]:";
  for (const auto& term : top_terms(prompt_text, kTopTerms)) out += " " + term;
  return truncate_tokens(out, cfg_.max_generation_tokens);
}

std::string MockBackend::fingerprint() const {
  return "mock:seed=" + std::to_string(cfg_.seed) + ":d=" + std::to_string(cfg_.d_llm);
}

RemoteBackend::RemoteBackend(BackendConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.api_key.empty()) {
    if (const char* key = std::getenv("DYGRASP_API_KEY")) cfg_.api_key = key;
  }
  cfg_.validate();
}

RemoteBackend::~RemoteBackend() = default;

nlohmann::json RemoteBackend::post(const std::string& path,
                                   const nlohmann::json& body) const {
  JsonHttpClient client(cfg_.endpoint, cfg_.api_key,
                        {cfg_.timeout_ms, cfg_.max_retries, cfg_.retry_backoff_ms});
  return client.post(path, body, path == "/v1/hidden_states");
}

HiddenStates RemoteBackend::hidden_states(const TokenizedPrompt& prompt) const {
  if (!cfg_.remote_hidden_states) {
    fail(ErrorKind::kCapability, "remote backend is configured without hidden states");
  }
  if (prompt.tokens.size() > cfg_.context_limit) {
    fail(ErrorKind::kContextOverflow,
         "prompt of " + std::to_string(prompt.tokens.size()) +
             " tokens exceeds context limit " + std::to_string(cfg_.context_limit));
  }
  auto res = post("/v1/hidden_states", {{"tokens", prompt.tokens}, {"layer", cfg_.layer}});
  const auto& rows = res.at("vectors");
  if (!rows.is_array() || rows.size() != prompt.tokens.size()) {
    fail(ErrorKind::kBackend, "remote hidden_states returned " +
                                  std::to_string(rows.size()) + " rows for " +
                                  std::to_string(prompt.tokens.size()) + " tokens");
  }
  HiddenStates hs;
  hs.vectors.resize(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(cfg_.d_llm));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != cfg_.d_llm) {
      fail(ErrorKind::kBackend, "remote hidden state width " +
                                    std::to_string(rows[i].size()) + " != d_llm " +
                                    std::to_string(cfg_.d_llm));
    }
    for (std::size_t j = 0; j < cfg_.d_llm; ++j) {
      hs.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rows[i][j].get<double>();
    }
  }
  return hs;
}

std::string RemoteBackend::generate(std::string_view prompt_text) const {
  auto res = post("/v1/generate", {{"prompt", std::string(prompt_text)},
                                   {"max_tokens", cfg_.max_generation_tokens}});
  std::string text = res.value("text", "");
  if (text.empty()) fail(ErrorKind::kBackend, "remote generate returned empty text");
  if (res.contains("usage") && res["usage"].contains("prompt_tokens")) {
    std::lock_guard lock(usage_mutex_);
    reported_usage_[fnv1a64(prompt_text)] = res["usage"]["prompt_tokens"].get<std::size_t>();
  }
  return truncate_tokens(text, cfg_.max_generation_tokens);
}

TokenCount RemoteBackend::count_tokens(std::string_view text) const {
  {
    std::lock_guard lock(usage_mutex_);
    auto it = reported_usage_.find(fnv1a64(text));
    if (it != reported_usage_.end()) return {it->second, false};
  }
  return {count_mock_tokens(text), true};
}

std::string RemoteBackend::fingerprint() const {
  return "remote:" + cfg_.endpoint + ":layer=" + cfg_.layer + ":d=" +
         std::to_string(cfg_.d_llm);
}

std::unique_ptr<LlmBackend> make_basic_backend(const BackendConfig& cfg) {
  switch (cfg.kind) {
    case BackendKind::kMock: return std::make_unique<MockBackend>(cfg);
    case BackendKind::kRemote: return std::make_unique<RemoteBackend>(cfg);
    case BackendKind::kOracle:
      fail(ErrorKind::kInvalidConfig, "oracle backend needs a synthetic trace");
  }
  fail(ErrorKind::kInvalidConfig, "unknown backend");
}

}  // namespace dygrasp
