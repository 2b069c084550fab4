#include "dygrasp/global_reasoner.hpp"

#include <algorithm>
#include <mutex>

#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/recent_reasoner.hpp"
#include "dygrasp/worker_pool.hpp"

namespace dygrasp {

std::string_view segmenting_name(Segmenting mode) {
  return mode == Segmenting::kCount ? "count" : "time";
}

Segmenting parse_segmenting(std::string_view name) {
  if (name == "count") return Segmenting::kCount;
  if (name == "time") return Segmenting::kTime;
  fail(ErrorKind::kInvalidArgument,
       "unknown segmenting `" + std::string(name) + "` (expected count or time)");
}

Partition partition_segments(const NeighborSequence& seq, std::size_t s, Segmenting mode,
                             std::pair<double, double> time_range) {
  if (s == 0) fail(ErrorKind::kInvalidArgument, "number of segments must be positive");
  Partition p;
  p.boundaries.assign(s + 1, -1.0);
  p.segments.resize(s);
  const auto& items = seq.items;
  const std::size_t n = items.size();
  if (n == 0) return p;

  if (mode == Segmenting::kTime) {
    const auto [lo, hi] = time_range;
    for (std::size_t i = 1; i <= s; ++i) {
      p.boundaries[i] = i == s ? hi : lo + static_cast<double>(i) * (hi - lo) / static_cast<double>(s);
    }
    std::size_t seg = 1;
    for (const auto& item : items) {
      while (seg < s && item.timestamp > p.boundaries[seg]) ++seg;
      if (item.timestamp > p.boundaries[seg]) {
        fail(ErrorKind::kData, "interaction timestamp outside the segmenting time range");
      }
      p.segments[seg - 1].push_back(item);
    }
    return p;
  }

  const std::size_t base = n / s;
  const std::size_t extra = n % s;
  std::size_t planned_end = 0;
  std::size_t prev_end = 0;
  for (std::size_t i = 1; i <= s; ++i) {
    planned_end += base + (i <= extra ? 1 : 0);
    std::size_t end = std::max(planned_end, prev_end);
    // A boundary may not separate equal timestamps.
    while (end > 0 && end < n && items[end].timestamp == items[end - 1].timestamp) ++end;
    p.segments[i - 1].assign(items.begin() + static_cast<std::ptrdiff_t>(prev_end),
                             items.begin() + static_cast<std::ptrdiff_t>(end));
    p.boundaries[i] = end > 0 ? items[end - 1].timestamp : -1.0;
    prev_end = end;
  }
  return p;
}

std::size_t latest_segment_before(const std::vector<double>& boundaries, double t) {
  // Boundaries are non-decreasing, so this is the last index with t̂_i < t.
  auto it = std::lower_bound(boundaries.begin(), boundaries.end(), t);
  if (it == boundaries.begin()) {
    fail(ErrorKind::kInvalidArgument, "query time precedes the first segment boundary");
  }
  return static_cast<std::size_t>(it - boundaries.begin()) - 1;
}

SegmentChain make_chain(const DyTAG& g, NodeId v, std::size_t s, Segmenting mode) {
  SegmentChain chain;
  chain.node = v;
  chain.partition = partition_segments(neighbor_sequence(g, v), s, mode, g.time_range());
  return chain;
}

std::string render_global_prompt(const PromptTemplate& tmpl, const DyTAG& g,
                                 const SegmentChain& chain, std::size_t i,
                                 const std::string& prev_description) {
  std::string lines;
  for (const auto& item : chain.partition.segments.at(i - 1)) {
    if (!lines.empty()) lines.push_back('\n');
    lines += render_interaction(tmpl, g, chain.node, item);
  }
  const auto& text = g.node_text(chain.node);
  const std::map<std::string, std::string, std::less<>> values = {
      {"node_text", text.empty() ? std::string(kNoText) : text},
      {"prev_description", prev_description.empty() ? std::string(kNoText) : prev_description},
      {"segment_interactions", lines}};
  std::string out = render_placeholders(tmpl.header, values);
  if (!tmpl.has_segment_slot()) {
    if (!out.empty()) out.push_back('\n');
    out += lines;
  }
  const std::string footer = render_placeholders(tmpl.footer, values);
  if (!footer.empty()) {
    if (!out.empty()) out.push_back('\n');
    out += footer;
  }
  return out;
}

std::size_t run_chain(SegmentChain& chain, const PromptTemplate& tmpl, const DyTAG& g,
                      const LlmBackend& backend, const ChainOptions& options) {
  const std::size_t s = chain.partition.segments.size();
  chain.descriptions.assign(1, g.node_text(chain.node));
  std::size_t calls = 0;
  for (std::size_t i = 1; i <= s; ++i) {
    const StoreKey key{chain.node, i};
    if (options.descriptions && options.descriptions->has(key)) {
      chain.descriptions.push_back(options.descriptions->get_text(key));
      continue;
    }
    std::string d;
    if (chain.partition.segments[i - 1].empty()) {
      d = chain.descriptions.back();
    } else {
      const std::string prompt =
          render_global_prompt(tmpl, g, chain, i, chain.descriptions.back());
      const auto count = backend.count_tokens(prompt).count;
      if (count > backend.context_limit()) {
        fail(ErrorKind::kContextOverflow,
             "global prompt for node " + std::to_string(chain.node) + " segment " +
                 std::to_string(i) + " has " + std::to_string(count) +
                 " tokens, context limit is " + std::to_string(backend.context_limit()) +
                 "; use more segments");
      }
      for (int attempt = 1;; ++attempt) {
        if (options.before_call) options.before_call();
        try {
          ++calls;
          d = backend.generate(prompt);
          break;
        } catch (const Error& e) {
          if (!e.retryable() && e.kind() != ErrorKind::kBackend) throw;
          if (attempt >= options.max_attempts) throw;
          log::warn("chain_retry", {{"node", chain.node}, {"segment", i},
                                    {"attempt", attempt}, {"error", e.what()}});
        }
      }
    }
    if (options.descriptions) options.descriptions->put_text(key, d);
    chain.descriptions.push_back(std::move(d));
  }
  return calls;
}

std::vector<Eigen::VectorXd> embed_chain(const SegmentChain& chain,
                                         const TextEncoder& encoder) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(chain.descriptions.size());
  for (std::size_t i = 0; i < chain.descriptions.size(); ++i) {
    if (i > 0 && chain.descriptions[i] == chain.descriptions[i - 1]) {
      out.push_back(out.back());
    } else {
      out.push_back(encoder.encode(chain.descriptions[i]));
    }
  }
  return out;
}

nlohmann::json description_fingerprint(const LlmBackend& backend,
                                       const PromptTemplate& tmpl, std::size_t s,
                                       Segmenting mode) {
  return {{"backend", backend.fingerprint()},
          {"template_hash", tmpl.hash_hex()},
          {"s", s},
          {"segmenting", segmenting_name(mode)}};
}

nlohmann::json global_fingerprint(const LlmBackend& backend, const TextEncoder& encoder,
                                  const PromptTemplate& tmpl, std::size_t s,
                                  Segmenting mode) {
  auto fp = description_fingerprint(backend, tmpl, s, mode);
  fp["encoder"] = encoder.fingerprint();
  fp["d"] = encoder.dim();
  return fp;
}

GlobalStageResult run_global_stage(const DyTAG& g, const LlmBackend& backend,
                                   const TextEncoder& encoder, const PromptTemplate& tmpl,
                                   FeatureStore& desc_store, FeatureStore& global_store,
                                   const GlobalStageOptions& options) {
  if (global_store.dim() != encoder.dim()) {
    fail(ErrorKind::kInvalidConfig, "global store dimension does not match the encoder");
  }
  const auto& nodes = g.nodes();
  std::atomic<std::size_t> calls{0};
  std::atomic<std::size_t> reused{0};
  std::mutex flush_mutex;
  std::size_t completed = 0;

  ChainOptions chain_options;
  chain_options.max_attempts = options.max_attempts;
  chain_options.descriptions = &desc_store;
  chain_options.before_call = [&] {
    if (options.cancel && options.cancel->load()) {
      fail(ErrorKind::kInterrupted, "global reasoning interrupted");
    }
    const std::size_t made = calls.fetch_add(1);
    if (options.stop_after_calls && made >= *options.stop_after_calls) {
      calls.fetch_sub(1);
      fail(ErrorKind::kInterrupted, "global reasoning stopped after " +
                                        std::to_string(made) + " LLM calls");
    }
  };

  auto flush_both = [&] {
    desc_store.flush();
    global_store.flush();
  };

  try {
    parallel_for(nodes.size(), options.workers, [&](std::size_t k) {
      const NodeId v = nodes[k];
      bool done = true;
      for (std::size_t i = 0; i <= options.s && done; ++i) done = global_store.has({v, i});
      if (done) {
        reused.fetch_add(1);
        return;
      }
      auto chain = make_chain(g, v, options.s, options.segmenting);
      run_chain(chain, tmpl, g, backend, chain_options);
      if (!desc_store.has({v, 0})) desc_store.put_text({v, 0}, chain.descriptions[0]);
      const auto vectors = embed_chain(chain, encoder);
      std::vector<float> row(encoder.dim());
      for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (global_store.has({v, i})) continue;
        for (std::size_t j = 0; j < row.size(); ++j) {
          row[j] = static_cast<float>(vectors[i][static_cast<Eigen::Index>(j)]);
        }
        global_store.put({v, i}, row);
      }
      std::lock_guard lock(flush_mutex);
      if (++completed % options.flush_every == 0) flush_both();
    });
  } catch (...) {
    flush_both();
    throw;
  }
  desc_store.finalize();
  global_store.finalize();
  GlobalStageResult result;
  result.nodes = nodes.size();
  result.llm_calls = calls.load();
  result.reused_nodes = reused.load();
  log::info("global_stage_done", {{"nodes", result.nodes},
                                  {"llm_calls", result.llm_calls},
                                  {"reused_nodes", result.reused_nodes}});
  return result;
}

}  // namespace dygrasp
