#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/llm_backend.hpp"
#include "dygrasp/recent_reasoner.hpp"

namespace dygrasp {

// Planted generator. Users carry a latent interest that flips every
// `drift_period` of their own interactions (0 disables drift) and a sticky
// purchase category. With probability `ambiguity_rate` an interaction's edge
// text is the ambiguous phrase, whose category is that of the user's
// interaction `dependency_distance` steps earlier. Items belong to one
// (interest, category) pool and are drawn from the user's current pool.
struct SynthConfig {
  std::size_t num_users = 100;
  std::size_t num_items = 160;
  std::size_t num_edges = 2000;
  std::size_t num_interests = 4;
  std::size_t num_categories = 4;
  std::size_t drift_period = 0;
  double ambiguity_rate = 0.5;
  std::size_t dependency_distance = 1;
  // Probability that a non-ambiguous interaction repeats the previous category.
  double category_stickiness = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct SynthEvent {
  NodeId user = 0;
  NodeId item = 0;
  std::size_t interest = 0;  // user's interest at this interaction
  std::size_t category = 0;  // true category, resolved for ambiguous texts
  bool ambiguous = false;
  std::size_t user_position = 0;  // 0-based index in the user's history
};

struct SynthTrace {
  SynthConfig config;
  std::vector<std::string> category_words;
  std::vector<std::string> interest_labels;
  std::string ambiguous_word;
  std::vector<SynthEvent> events;  // indexed by interaction id == timestamp
  std::vector<std::size_t> item_interest;  // by item index (item id - num_users)
  std::vector<std::size_t> item_category;

  NodeId item_id(std::size_t k) const { return config.num_users + k; }
  bool is_user(NodeId v) const { return v < config.num_users; }

  nlohmann::json to_json() const;
  static SynthTrace from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static SynthTrace load(const std::filesystem::path& path);
};

struct SynthData {
  DyTAG graph;
  SynthTrace trace;
};

SynthData generate_synthetic(const SynthConfig& cfg);

// Writes the three CSV files plus trace.json.
void save_synthetic(const SynthData& data, const std::filesystem::path& dir);

// Causal oracle. Within an interaction span, the first category word sets
// the span's context to that category's embedding; the ambiguous word sets
// it to the category of the span `dependency_distance` spans earlier in the
// same prompt, or to the "ambiguous" embedding when that span is absent or
// unresolved or the span is seen from the item side (role "destination"). The token carrying the context and every later token of the
// span include it. Every row adds a shared filler vector and a small
// token-keyed offset. generate() reads the latest "[timestamp] (role)" line
// and answers with that node's interest.
class OracleBackend final : public LlmBackend {
 public:
  OracleBackend(BackendConfig cfg, SynthTrace trace);

  BackendKind kind() const override { return BackendKind::kOracle; }
  std::size_t hidden_dim() const override { return cfg_.d_llm; }
  std::size_t context_limit() const override { return cfg_.context_limit; }
  bool supports_hidden_states() const override { return true; }
  HiddenStates hidden_states(const TokenizedPrompt& prompt) const override;
  std::string generate(std::string_view prompt_text) const override;
  std::string fingerprint() const override;

  static constexpr int kUnresolved = -1;
  static constexpr int kNoCategory = -2;

  // Category of each span as the oracle reads it.
  std::vector<int> resolve_spans(const TokenizedPrompt& prompt) const;
  // Number of spans holding the ambiguous word that cannot be resolved.
  std::size_t unresolved_spans(const TokenizedPrompt& prompt,
                               const std::vector<std::size_t>& span_ids) const;

  const SynthTrace& trace() const { return trace_; }

 private:
  int token_category(TokenId token) const;  // -1 for non-category tokens

  BackendConfig cfg_;
  SynthTrace trace_;
  TokenId ambiguous_token_ = 0;
  TokenId destination_token_ = 0;
  std::vector<TokenId> category_tokens_;
  std::vector<Eigen::VectorXd> category_embeddings_;
  Eigen::VectorXd ambiguous_embedding_;
  Eigen::VectorXd filler_embedding_;
};

// Unresolved ambiguous target spans over a set of recent batches.
std::size_t count_unresolved_targets(std::span<const WindowBatch> batches, const DyTAG& g,
                                     const PromptTemplate& tmpl,
                                     const OracleBackend& oracle);

// d-regular graph on n nodes (n even, d < n) from d rounds of a round-robin
// schedule. Round r supplies timestamp r; every edge text is `edge_text`.
DyTAG regular_graph(std::size_t n, std::size_t d, const std::string& edge_text = "x");

}  // namespace dygrasp
