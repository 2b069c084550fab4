#include "dygrasp/recent_reasoner.hpp"

#include <algorithm>
#include <map>
#include <mutex>

#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/tokenizer.hpp"
#include "dygrasp/worker_pool.hpp"

namespace dygrasp {
namespace {

std::string or_placeholder(const std::string& s) {
  return s.empty() ? std::string(kNoText) : s;
}

void append_piece(TokenizedPrompt& p, const std::string& text) {
  if (!p.text.empty()) p.text.push_back('\n');
  p.text += text;
  auto ids = token_ids(text);
  p.tokens.insert(p.tokens.end(), ids.begin(), ids.end());
}

}  // namespace

std::vector<WindowBatch> build_batches(const NeighborSequence& seq, std::size_t c) {
  if (c == 0 || c % 2 != 0) {
    fail(ErrorKind::kInvalidArgument, "window length must be even");
  }
  const std::size_t half = c / 2;
  const std::size_t n = seq.size();
  std::vector<WindowBatch> out;
  for (std::size_t i = 0;; ++i) {
    const std::size_t first = half * i + 1;
    const std::size_t last = std::min(half * i + c, n);
    const std::size_t first_target = i == 0 ? 1 : half * i + half + 1;
    if (first_target > n || first > last) break;
    WindowBatch b;
    b.node = seq.node;
    b.index = i;
    b.first_position = first;
    b.members.assign(seq.items.begin() + static_cast<std::ptrdiff_t>(first - 1),
                     seq.items.begin() + static_cast<std::ptrdiff_t>(last));
    for (std::size_t p = first_target; p <= last; ++p) b.target_positions.push_back(p);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<WindowBatch> build_all_batches(const DyTAG& g, std::size_t c) {
  std::vector<WindowBatch> all;
  for (NodeId v : g.nodes()) {
    auto b = build_batches(neighbor_sequence(g, v), c);
    std::move(b.begin(), b.end(), std::back_inserter(all));
  }
  return all;
}

std::string render_interaction(const PromptTemplate& tmpl, const DyTAG& g,
                               NodeId owner, const NeighborItem& item) {
  const auto& e = g.log()[item.interaction];
  return render_placeholders(
      tmpl.interaction,
      {{"node_text", or_placeholder(g.node_text(owner))},
       {"role", role_name(item.role)},
       {"counterpart_text", or_placeholder(g.node_text(item.counterpart))},
       {"edge_text", or_placeholder(g.edge_text(e.edge_text_ref))},
       {"timestamp", format_timestamp(e.timestamp)}});
}

TokenizedPrompt render_recent_prompt(const WindowBatch& batch, const PromptTemplate& tmpl,
                                     const DyTAG& g, std::size_t context_limit,
                                     PromptStats* stats) {
  const std::map<std::string, std::string, std::less<>> node_values = {
      {"node_text", or_placeholder(g.node_text(batch.node))}};
  TokenizedPrompt p;
  PromptStats local;
  if (!tmpl.header.empty()) {
    append_piece(p, render_placeholders(tmpl.header, node_values));
  }
  local.template_tokens += p.tokens.size();
  for (std::size_t k = 0; k < batch.members.size(); ++k) {
    const std::size_t before = p.tokens.size();
    append_piece(p, render_interaction(tmpl, g, batch.node, batch.members[k]));
    if (p.tokens.size() == before) {
      fail(ErrorKind::kInvalidConfig, "interaction template renders to no tokens");
    }
    p.spans.push_back({batch.first_position + k, before, p.tokens.size() - 1});
    local.interaction_tokens += p.tokens.size() - before;
  }
  if (!tmpl.footer.empty()) {
    const std::size_t before = p.tokens.size();
    append_piece(p, render_placeholders(tmpl.footer, node_values));
    local.template_tokens += p.tokens.size() - before;
  }
  if (context_limit > 0 && p.tokens.size() > context_limit) {
    fail(ErrorKind::kContextOverflow,
         "recent prompt for node " + std::to_string(batch.node) + " has " +
             std::to_string(p.tokens.size()) + " tokens, context limit is " +
             std::to_string(context_limit) + "; use a smaller window length c");
  }
  if (stats) *stats = local;
  return p;
}

nlohmann::json recent_fingerprint(const LlmBackend& backend, const PromptTemplate& tmpl,
                                  std::size_t c) {
  return {{"backend", backend.fingerprint()},
          {"d", backend.hidden_dim()},
          {"template_hash", tmpl.hash_hex()},
          {"c", c}};
}

std::vector<RecentFeature> extract_recent_features(std::span<const WindowBatch> batches,
                                                   const LlmBackend& backend,
                                                   const DyTAG& g,
                                                   const PromptTemplate& tmpl,
                                                   FeatureStore* store,
                                                   const ExtractOptions& options) {
  if (!backend.supports_hidden_states()) {
    fail(ErrorKind::kCapability,
         "backend `" + backend.fingerprint() +
             "` has no hidden-state capability; recent reasoning needs one");
  }
  std::vector<std::vector<RecentFeature>> per_batch(batches.size());
  std::vector<std::pair<NodeId, std::size_t>> failed;
  std::mutex mutex;
  std::size_t completed = 0;

  auto run_batch = [&](std::size_t bi) {
    if (options.cancel && options.cancel->load()) {
      fail(ErrorKind::kInterrupted, "recent reasoning interrupted");
    }
    const auto& batch = batches[bi];
    if (store && options.skip_cached) {
      bool all = std::all_of(batch.target_positions.begin(), batch.target_positions.end(),
                             [&](std::size_t pos) {
                               return store->has({batch.node,
                                                  batch.members[batch.offset_of(pos)].interaction});
                             });
      if (all) {
        for (std::size_t pos : batch.target_positions) {
          auto id = batch.members[batch.offset_of(pos)].interaction;
          per_batch[bi].push_back({batch.node, id, store->get({batch.node, id})});
        }
        return;
      }
    }
    const auto prompt = render_recent_prompt(batch, tmpl, g, backend.context_limit());
    HiddenStates hs;
    bool ok = false;
    for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
      try {
        hs = backend.hidden_states(prompt);
        ok = true;
        break;
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kContextOverflow || e.kind() == ErrorKind::kCapability) {
          throw;
        }
        log::warn("batch_retry", {{"node", batch.node},
                                  {"batch", batch.index},
                                  {"attempt", attempt},
                                  {"error", e.what()}});
      }
    }
    if (!ok) {
      std::lock_guard lock(mutex);
      failed.emplace_back(batch.node, batch.index);
      return;
    }
    if (hs.vectors.rows() != static_cast<Eigen::Index>(prompt.tokens.size())) {
      fail(ErrorKind::kBackend, "hidden states row count does not match token count");
    }
    for (std::size_t pos : batch.target_positions) {
      const auto& span = prompt.spans[batch.offset_of(pos)];
      const auto first = static_cast<Eigen::Index>(span.first_token);
      const auto len = static_cast<Eigen::Index>(span.last_token - span.first_token + 1);
      Eigen::RowVectorXd mean = hs.vectors.middleRows(first, len).colwise().mean();
      RecentFeature f;
      f.node = batch.node;
      f.interaction = batch.members[batch.offset_of(pos)].interaction;
      f.vector.resize(static_cast<std::size_t>(mean.size()));
      for (Eigen::Index j = 0; j < mean.size(); ++j) {
        f.vector[static_cast<std::size_t>(j)] = static_cast<float>(mean[j]);
      }
      if (store) store->put({f.node, f.interaction}, f.vector);
      per_batch[bi].push_back(std::move(f));
    }
    if (store) {
      std::lock_guard lock(mutex);
      if (++completed % options.flush_every == 0) store->flush();
    }
  };
  try {
    parallel_for(batches.size(), options.workers, run_batch);
  } catch (...) {
    if (store) store->flush();
    throw;
  }
  if (store) store->flush();
  if (!failed.empty()) {
    std::sort(failed.begin(), failed.end());
    std::string list;
    for (auto& [node, b] : failed) {
      list += (list.empty() ? "" : " ") + std::string("(") + std::to_string(node) +
              "," + std::to_string(b) + ")";
    }
    fail(ErrorKind::kBackend, std::to_string(failed.size()) +
                                  " batches failed after retries; unprocessed (node,batch): " +
                                  list);
  }
  std::vector<RecentFeature> out;
  for (auto& v : per_batch) std::move(v.begin(), v.end(), std::back_inserter(out));
  std::sort(out.begin(), out.end(), [](const RecentFeature& a, const RecentFeature& b) {
    return std::tie(a.node, a.interaction) < std::tie(b.node, b.interaction);
  });
  return out;
}

nlohmann::json TokenReport::to_json() const {
  // Power-of-two buckets over per-node token totals.
  std::map<std::size_t, std::size_t> buckets;
  for (const auto& [node, n] : per_node) {
    std::size_t lo = 0;
    if (n > 0) {
      lo = 1;
      while (lo * 2 <= n) lo *= 2;
    }
    ++buckets[lo];
  }
  nlohmann::json hist = nlohmann::json::array();
  for (auto [lo, count] : buckets) {
    hist.push_back({{"min_tokens", lo}, {"max_tokens", lo == 0 ? 0 : 2 * lo - 1},
                    {"nodes", count}});
  }
  return {{"mode", mode == TokenMode::kNodeCentric ? "node-centric" : "edge-centric"},
          {"total_tokens", total_tokens},
          {"interaction_tokens", interaction_tokens},
          {"template_tokens", template_tokens},
          {"num_prompts", num_prompts},
          {"sum_interaction_tokens", sum_interaction_tokens},
          {"per_node_histogram", hist}};
}

TokenReport token_report(const DyTAG& g, std::size_t c, const PromptTemplate& tmpl,
                         TokenMode mode) {
  TokenReport r;
  r.mode = mode;
  // Per-node token counts of each rendered interaction, in sequence order.
  std::vector<std::vector<std::size_t>> item_tokens(g.num_nodes());
  std::vector<std::size_t> max_tokens(g.num_interactions(), 0);
  std::vector<std::size_t> overhead(g.num_nodes(), 0);
  for (NodeId v : g.nodes()) {
    const auto vi = g.node_index(v);
    for (const auto& item : g.incident(v)) {
      auto n = count_mock_tokens(render_interaction(tmpl, g, v, item));
      item_tokens[vi].push_back(n);
      max_tokens[item.interaction] = std::max(max_tokens[item.interaction], n);
    }
    const std::map<std::string, std::string, std::less<>> values = {
        {"node_text", or_placeholder(g.node_text(v))}};
    overhead[vi] = count_mock_tokens(render_placeholders(tmpl.header, values)) +
                   count_mock_tokens(render_placeholders(tmpl.footer, values));
  }
  for (auto n : max_tokens) r.sum_interaction_tokens += n;

  if (mode == TokenMode::kNodeCentric) {
    for (NodeId v : g.nodes()) {
      const auto vi = g.node_index(v);
      std::size_t node_total = 0;
      for (const auto& b : build_batches(neighbor_sequence(g, v), c)) {
        std::size_t inter = 0;
        for (std::size_t k = 0; k < b.members.size(); ++k) {
          inter += item_tokens[vi][b.first_position - 1 + k];
        }
        r.interaction_tokens += inter;
        r.template_tokens += overhead[vi];
        node_total += inter + overhead[vi];
        ++r.num_prompts;
      }
      r.per_node.emplace_back(v, node_total);
    }
  } else {
    // Prefix sums let each prompt be counted in O(log d).
    std::vector<std::vector<std::size_t>> prefix(g.num_nodes());
    for (std::size_t vi = 0; vi < g.num_nodes(); ++vi) {
      prefix[vi].assign(1, 0);
      for (auto n : item_tokens[vi]) prefix[vi].push_back(prefix[vi].back() + n);
    }
    for (NodeId u : g.nodes()) {
      const auto ui = g.node_index(u);
      const auto items = g.incident(u);
      std::size_t node_total = 0;
      for (std::size_t i = 0; i < items.size(); ++i) {
        const auto vi = g.node_index(items[i].counterpart);
        const auto v_items = g.incident(items[i].counterpart);
        // Counterpart interactions strictly earlier in the log.
        auto it = std::lower_bound(v_items.begin(), v_items.end(), items[i].interaction,
                                   [](const NeighborItem& x, InteractionId id) {
                                     return x.interaction < id;
                                   });
        const auto j = static_cast<std::size_t>(it - v_items.begin());
        std::size_t inter = prefix[ui][i] + item_tokens[ui][i];
        if (items[i].counterpart != u) inter += prefix[vi][j];
        r.interaction_tokens += inter;
        r.template_tokens += overhead[ui];
        node_total += inter + overhead[ui];
        ++r.num_prompts;
      }
      r.per_node.emplace_back(u, node_total);
    }
  }
  r.total_tokens = r.interaction_tokens + r.template_tokens;
  return r;
}

}  // namespace dygrasp
