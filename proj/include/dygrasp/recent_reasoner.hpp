#pragma once

#include <atomic>
#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/feature_store.hpp"
#include "dygrasp/llm_backend.hpp"
#include "dygrasp/prompt_template.hpp"

namespace dygrasp {

// One sliding-window slice of a node's history. Batch i covers positions
// c/2*i+1 .. c/2*i+c (1-based, truncated at |N_v|). Batch 0 produces
// features for all of its members; later batches only for positions after
// their first c/2, so every such batch opens with exactly c/2 context
// members.
struct WindowBatch {
  NodeId node = 0;
  std::size_t index = 0;
  std::size_t first_position = 1;
  std::vector<NeighborItem> members;
  std::vector<std::size_t> target_positions;

  std::size_t offset_of(std::size_t position) const { return position - first_position; }
};

std::vector<WindowBatch> build_batches(const NeighborSequence& seq, std::size_t c);

// Renders one interaction line from the perspective of the sequence owner.
std::string render_interaction(const PromptTemplate& tmpl, const DyTAG& g,
                               NodeId owner, const NeighborItem& item);

struct PromptStats {
  std::size_t template_tokens = 0;
  std::size_t interaction_tokens = 0;
};

// Header, one span per member (span_id = its 1-based position in N_v) and
// footer, each tokenized separately and joined by newlines. A positive
// `context_limit` turns oversize prompts into Error(kContextOverflow).
TokenizedPrompt render_recent_prompt(const WindowBatch& batch, const PromptTemplate& tmpl,
                                     const DyTAG& g, std::size_t context_limit = 0,
                                     PromptStats* stats = nullptr);

struct RecentFeature {
  NodeId node = 0;
  InteractionId interaction = 0;
  std::vector<float> vector;
};

struct ExtractOptions {
  std::size_t workers = 1;
  int max_attempts = 3;
  // Features for batches whose targets are all in the store are not recomputed.
  bool skip_cached = true;
  // Flush the store after this many completed batches.
  std::size_t flush_every = 256;
  // Set asynchronously to stop before the next batch with Error(kInterrupted).
  const std::atomic<bool>* cancel = nullptr;
};

// Mean-pools the hidden states of each target's span. When `store` is
// given, features are written under (node, interaction id) and flushed.
std::vector<RecentFeature> extract_recent_features(std::span<const WindowBatch> batches,
                                                   const LlmBackend& backend,
                                                   const DyTAG& g,
                                                   const PromptTemplate& tmpl,
                                                   FeatureStore* store = nullptr,
                                                   const ExtractOptions& options = {});

// Batches for every node of the graph, node order then batch order.
std::vector<WindowBatch> build_all_batches(const DyTAG& g, std::size_t c);

nlohmann::json recent_fingerprint(const LlmBackend& backend, const PromptTemplate& tmpl,
                                  std::size_t c);

enum class TokenMode { kNodeCentric, kEdgeCentric };

struct TokenReport {
  TokenMode mode = TokenMode::kNodeCentric;
  std::size_t total_tokens = 0;
  std::size_t interaction_tokens = 0;
  std::size_t template_tokens = 0;
  std::size_t num_prompts = 0;
  // Sum over interactions of the larger of its two rendered token counts.
  std::size_t sum_interaction_tokens = 0;
  std::vector<std::pair<NodeId, std::size_t>> per_node;

  nlohmann::json to_json() const;
};

// Counts what the recent stage would send (node-centric) or what the
// edge-centric scheme would send, where interaction I_i of node u with
// counterpart v is prompted with every earlier interaction of u and v plus
// itself. No LLM calls.
TokenReport token_report(const DyTAG& g, std::size_t c, const PromptTemplate& tmpl,
                         TokenMode mode);

}  // namespace dygrasp
