#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/feature_store.hpp"
#include "dygrasp/global_reasoner.hpp"
#include "dygrasp/nn/layers.hpp"
#include "dygrasp/text_encoder.hpp"

namespace dygrasp {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_t = 100;
  std::size_t d_sf = 256;
  std::size_t heads = 2;
  double dropout = 0.1;
  std::size_t n_neighbors = 20;
  std::size_t n_recent = 32;
  std::size_t ffn_ratio = 2;
  std::string tgnn_kind = "temporal_attention";
  bool use_recent = true;
  bool use_global = true;
  // Resolved from the caches and the training split; 0 means "not yet".
  std::size_t d_llm = 0;
  std::size_t d_bert = 0;
  double time_scale = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Everything the model reads at query time, loaded into memory once.
// Recent rows are aligned with DyTAG::incident(v).
class ModelInputs {
 public:
  // Either store may be null (the matching component must then be off).
  static ModelInputs build(const DyTAG& g, const FeatureStore* recent,
                           const FeatureStore* global, const TextEncoder& encoder,
                           std::size_t s, Segmenting segmenting);

  const DyTAG& graph() const { return *g_; }
  bool has_recent() const { return has_recent_; }
  bool has_global() const { return has_global_; }
  std::size_t d_llm() const { return d_llm_; }
  std::size_t d_bert() const { return d_bert_; }

  // Row k of v's recent features; Error(kMissingCache) when absent.
  Eigen::RowVectorXd recent(NodeId v, std::size_t k) const;
  // Rows 0..count-1 of v's global features.
  Eigen::MatrixXd global(NodeId v, std::size_t count) const;
  const std::vector<double>& boundaries(NodeId v) const;
  const Eigen::RowVectorXd& text(NodeId v) const;

 private:
  struct PerNode {
    Eigen::MatrixXd recent;
    std::vector<char> recent_present;
    Eigen::MatrixXd global;
    bool global_present = false;
    std::vector<double> boundaries;
    Eigen::RowVectorXd text;
  };

  const DyTAG* g_ = nullptr;
  bool has_recent_ = false;
  bool has_global_ = false;
  std::size_t d_llm_ = 0;
  std::size_t d_bert_ = 0;
  std::vector<PerNode> nodes_;
};

// A node state request: M_v at time t.
struct NodeQuery {
  NodeId node = 0;
  double time = 0.0;
  bool operator==(const NodeQuery&) const = default;
};

struct PairQuery {
  NodeId src = 0;
  NodeId dst = 0;
  double time = 0.0;
};

// Neighbors of a batch of query rows, stacked. ranges[i] selects the rows
// belonging to query row i (possibly none).
struct NeighborBlock {
  nn::Var states;           // N x d_sf, M_u at each interaction time
  Eigen::VectorXd delta_t;  // t - t_j per row
  nn::Var features;         // N x d_t, projected recent features (zeros when off)
  std::vector<nn::RowRange> ranges;
};

class DyGraspModel {
 public:
  explicit DyGraspModel(ModelConfig cfg);
  DyGraspModel(const DyGraspModel&) = delete;
  DyGraspModel& operator=(const DyGraspModel&) = delete;
  DyGraspModel(DyGraspModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  // M^(L) for each query, one row each in query order; repeated queries
  // are computed once. A non-null train_rng enables dropout.
  nn::Var embed_batch(nn::Tape& t, const ModelInputs& in, const std::vector<NodeQuery>& queries,
                      std::mt19937_64* train_rng = nullptr) const;
  nn::Var embed(nn::Tape& t, const ModelInputs& in, NodeId v, double time,
                std::mt19937_64* train_rng = nullptr) const;
  nn::Var logit(nn::Tape& t, nn::Var m_u, nn::Var m_v,
                std::mt19937_64* train_rng = nullptr) const;

  // Eval-mode probability that (u, v) interacts at time t.
  double score(const ModelInputs& in, NodeId u, NodeId v, double time) const;
  // Eval-mode probabilities for many pairs, embedded together.
  std::vector<double> score_pairs(const ModelInputs& in, const std::vector<PairQuery>& pairs) const;
  // Eval-mode scores of u against several candidates at one time.
  std::vector<double> score_candidates(const ModelInputs& in, NodeId u,
                                       const std::vector<NodeId>& candidates,
                                       double time) const;

  // Blocks, public for gradient checks.
  nn::Var time_encode(nn::Tape& t, const Eigen::VectorXd& delta_t) const;
  nn::Var project_recent(nn::Tape& t, nn::Var features) const;  // P
  nn::Var project_global(nn::Tape& t, nn::Var features) const;  // P'
  nn::Var project_node(nn::Tape& t, nn::Var text) const;        // P''
  // Sequence layers over stacked sequences; attention stays within each range.
  nn::Var rs_layer(nn::Tape& t, std::size_t l, nn::Var x, const std::vector<nn::RowRange>& seqs,
                   std::mt19937_64* rng) const;
  nn::Var gs_layer(nn::Tape& t, std::size_t l, nn::Var x, const std::vector<nn::RowRange>& seqs,
                   std::mt19937_64* rng) const;
  // Rows of m_v without neighbors take the self path.
  nn::Var structure(nn::Tape& t, std::size_t l, nn::Var m_v, const NeighborBlock& neighbors,
                    std::mt19937_64* rng) const;
  nn::Var merge(nn::Tape& t, std::size_t l, nn::Var r, nn::Var g, nn::Var s,
                std::mt19937_64* rng) const;

  // JSON header (config and shapes) plus float32 little-endian blobs.
  void save(const std::filesystem::path& path) const;
  static DyGraspModel load(const std::filesystem::path& path);

  std::vector<Eigen::MatrixXd> snapshot() const;
  void restore(const std::vector<Eigen::MatrixXd>& values);

 private:
  struct StructureLayer {
    nn::MultiHeadAttention attention;
    nn::Mlp ffn;
    nn::Linear self;
  };

  struct Streams {
    std::vector<nn::Var> recent;  // R^r readout per layer, one row per query
    std::vector<nn::Var> global;  // R^g readout per layer
  };
  Streams streams(nn::Tape& t, const ModelInputs& in, const std::vector<NodeQuery>& queries,
                  std::mt19937_64* rng) const;
  void check_inputs(const ModelInputs& in) const;

  ModelConfig cfg_;
  nn::ParamSet params_;
  nn::Param* omega_ = nullptr;
  nn::Param* phi_ = nullptr;
  nn::Linear p_recent_;
  nn::Linear p_global_;
  nn::Linear p_node_;
  std::vector<nn::TransformerBlock> rs_;
  std::vector<nn::TransformerBlock> gs_;
  std::vector<StructureLayer> structure_;
  std::vector<nn::Mlp> merge_;
  nn::Mlp head_;
};

}  // namespace dygrasp
