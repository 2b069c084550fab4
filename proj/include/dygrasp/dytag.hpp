#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dygrasp {

using NodeId = std::uint64_t;
using TextId = std::uint64_t;
using InteractionId = std::size_t;

// One timestamped, text-attributed edge event (u, r, v, t).
struct Interaction {
  InteractionId id = 0;  // position in the chronological log
  NodeId src = 0;
  NodeId dst = 0;
  TextId edge_text_ref = 0;
  double timestamp = 0.0;
};

// Raw edge row before sorting; file order is the tie breaker.
struct EdgeRow {
  NodeId src = 0;
  NodeId dst = 0;
  TextId edge_text_ref = 0;
  double timestamp = 0.0;
};

enum class Role { kAsSource, kAsDestination };

const char* role_name(Role role);

struct NeighborItem {
  InteractionId interaction = 0;
  Role role = Role::kAsSource;
  double timestamp = 0.0;
  NodeId counterpart = 0;
};

struct NeighborSequence {
  NodeId node = 0;
  std::vector<NeighborItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct LoadOptions {
  bool allow_self_loops = false;
};

// Immutable after construction; safe for concurrent readers.
class DyTAG {
 public:
  DyTAG() = default;

  // Sorts rows by (timestamp, file order), assigns ids and validates every
  // text reference. Throws Error(kData) on dangling references.
  static DyTAG build(std::map<NodeId, std::string> node_texts,
                     std::map<TextId, std::string> edge_texts,
                     std::vector<EdgeRow> rows, LoadOptions options = {});

  const std::vector<Interaction>& log() const { return log_; }
  std::size_t num_interactions() const { return log_.size(); }

  const std::map<NodeId, std::string>& node_texts() const {
    return node_texts_;
  }
  const std::map<TextId, std::string>& edge_texts() const {
    return edge_texts_;
  }
  const std::string& node_text(NodeId v) const;
  const std::string& edge_text(TextId r) const;

  bool has_node(NodeId v) const { return node_texts_.contains(v); }
  const std::vector<NodeId>& nodes() const { return nodes_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  // Dense position of v in nodes(); throws for unknown ids.
  std::size_t node_index(NodeId v) const;

  // Chronological interactions incident to v (each interaction once).
  std::span<const NeighborItem> incident(NodeId v) const;

  bool is_bipartite() const { return is_bipartite_; }
  const std::vector<NodeId>& destinations() const { return destinations_; }
  std::pair<double, double> time_range() const { return time_range_; }

 private:
  std::map<NodeId, std::string> node_texts_;
  std::map<TextId, std::string> edge_texts_;
  std::vector<Interaction> log_;
  std::vector<NodeId> nodes_;
  std::unordered_map<NodeId, std::size_t> node_pos_;
  std::vector<std::vector<NeighborItem>> incident_;
  std::vector<NodeId> destinations_;
  bool is_bipartite_ = false;
  std::pair<double, double> time_range_{0.0, 0.0};
};

DyTAG load_dytag(const std::filesystem::path& edges_path,
                 const std::filesystem::path& node_text_path,
                 const std::filesystem::path& edge_text_path,
                 LoadOptions options = {});

// Loads edges.csv, node_text.csv and edge_text.csv from one directory.
DyTAG load_dytag_dir(const std::filesystem::path& dir, LoadOptions options = {});

void save_dytag(const DyTAG& g, const std::filesystem::path& dir);

// Interactions incident to v with timestamp < before (all when absent).
NeighborSequence neighbor_sequence(const DyTAG& g, NodeId v,
                                   std::optional<double> before = std::nullopt);

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct Split {
  IndexRange train;
  IndexRange val;
  IndexRange test;
  double t_train_end = 0.0;
  double t_val_end = 0.0;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

Split temporal_split(const DyTAG& g, SplitRatios ratios = {});

// Test interactions with at least one endpoint absent from every train
// interaction.
std::set<InteractionId> inductive_mask(const DyTAG& g, const Split& split);

}  // namespace dygrasp
