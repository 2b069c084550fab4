#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/feature_store.hpp"
#include "dygrasp/llm_backend.hpp"
#include "dygrasp/prompt_template.hpp"
#include "dygrasp/text_encoder.hpp"

namespace dygrasp {

enum class Segmenting { kCount, kTime };

std::string_view segmenting_name(Segmenting mode);
Segmenting parse_segmenting(std::string_view name);

// Boundaries t̂_0 = -1 < t̂_1 <= ... <= t̂_s; S_i holds the items with
// timestamp in (t̂_{i-1}, t̂_i].
struct Partition {
  std::vector<double> boundaries;
  std::vector<std::vector<NeighborItem>> segments;
};

// Count mode: balanced sizes (larger first), with boundaries moved later
// past timestamp ties. Time mode: equal-width cut of `time_range`.
Partition partition_segments(const NeighborSequence& seq, std::size_t s,
                             Segmenting mode = Segmenting::kCount,
                             std::pair<double, double> time_range = {0.0, 0.0});

// î = max{i | t̂_i < t}; 0 whenever t >= 0.
std::size_t latest_segment_before(const std::vector<double>& boundaries, double t);

struct SegmentChain {
  NodeId node = 0;
  Partition partition;
  std::vector<std::string> descriptions;  // D_0..D_s once run
};

SegmentChain make_chain(const DyTAG& g, NodeId v, std::size_t s,
                        Segmenting mode = Segmenting::kCount);

// Prompt for D_i: node text, D_{i-1} and the rendered interactions of S_i.
std::string render_global_prompt(const PromptTemplate& tmpl, const DyTAG& g,
                                 const SegmentChain& chain, std::size_t i,
                                 const std::string& prev_description);

struct ChainOptions {
  int max_attempts = 3;
  // Descriptions already stored under (node, i) are reused, not regenerated.
  FeatureStore* descriptions = nullptr;
  // Called before every generate(); may throw to interrupt the run.
  std::function<void()> before_call;
};

// Fills chain.descriptions with D_0 = node text and D_i = generate(prompt)
// for non-empty S_i, D_i = D_{i-1} otherwise. Returns the number of LLM calls.
std::size_t run_chain(SegmentChain& chain, const PromptTemplate& tmpl, const DyTAG& g,
                      const LlmBackend& backend, const ChainOptions& options = {});

// F^gb_i = encoder(D_i) for i = 0..s.
std::vector<Eigen::VectorXd> embed_chain(const SegmentChain& chain,
                                         const TextEncoder& encoder);

struct GlobalStageOptions {
  std::size_t s = 8;
  Segmenting segmenting = Segmenting::kCount;
  std::size_t workers = 1;
  int max_attempts = 3;
  std::size_t flush_every = 64;  // nodes between flushes
  // Test hook: raise Error(kInterrupted) once this many LLM calls were made.
  std::optional<std::size_t> stop_after_calls;
  // Set asynchronously (e.g. by a signal handler) to stop at the next call.
  const std::atomic<bool>* cancel = nullptr;
};

struct GlobalStageResult {
  std::size_t nodes = 0;
  std::size_t llm_calls = 0;
  std::size_t reused_nodes = 0;
};

// Runs chain and embedding for every node, persisting descriptions and
// vectors. Safe to rerun on partially filled stores: completed prefixes are
// reused, so an interrupted run resumes where it stopped.
GlobalStageResult run_global_stage(const DyTAG& g, const LlmBackend& backend,
                                   const TextEncoder& encoder, const PromptTemplate& tmpl,
                                   FeatureStore& desc_store, FeatureStore& global_store,
                                   const GlobalStageOptions& options);

nlohmann::json global_fingerprint(const LlmBackend& backend, const TextEncoder& encoder,
                                  const PromptTemplate& tmpl, std::size_t s,
                                  Segmenting mode);
nlohmann::json description_fingerprint(const LlmBackend& backend,
                                       const PromptTemplate& tmpl, std::size_t s,
                                       Segmenting mode);

}  // namespace dygrasp
