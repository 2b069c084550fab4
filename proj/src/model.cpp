#include "dygrasp/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <unordered_map>

#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"

namespace dygrasp {

using nn::Mat;
using nn::Tape;
using nn::Var;

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::kInvalidConfig, m); };
  if (layers == 0) bad("model layers must be positive");
  if (d_t == 0 || d_sf == 0 || heads == 0 || ffn_ratio == 0) bad("model widths must be positive");
  if ((2 * d_t) % heads != 0) bad("heads must divide 2*d_t");
  if (d_sf % heads != 0) bad("heads must divide d_sf");
  if (dropout < 0.0 || dropout >= 1.0) bad("dropout must be in [0,1)");
  if (n_recent == 0) bad("n_recent must be positive");
  if (tgnn_kind != "temporal_attention") bad("unknown tgnn_kind `" + tgnn_kind + "`");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},       {"d_t", c.d_t},
          {"d_sf", c.d_sf},           {"heads", c.heads},
          {"dropout", c.dropout},     {"n_neighbors", c.n_neighbors},
          {"n_recent", c.n_recent},   {"ffn_ratio", c.ffn_ratio},
          {"tgnn_kind", c.tgnn_kind}, {"use_recent", c.use_recent},
          {"use_global", c.use_global}, {"d_llm", c.d_llm},
          {"d_bert", c.d_bert},       {"time_scale", c.time_scale},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "layers",    "d_t",       "d_sf",       "heads",    "dropout", "n_neighbors",
      "n_recent",  "ffn_ratio", "tgnn_kind",  "use_recent", "use_global", "d_llm",
      "d_bert",    "time_scale", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) {
      fail(ErrorKind::kInvalidConfig, "unknown model config field `" + it.key() + "`");
    }
  }
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.d_t = j.value("d_t", c.d_t);
    c.d_sf = j.value("d_sf", c.d_sf);
    c.heads = j.value("heads", c.heads);
    c.dropout = j.value("dropout", c.dropout);
    c.n_neighbors = j.value("n_neighbors", c.n_neighbors);
    c.n_recent = j.value("n_recent", c.n_recent);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.tgnn_kind = j.value("tgnn_kind", c.tgnn_kind);
    c.use_recent = j.value("use_recent", c.use_recent);
    c.use_global = j.value("use_global", c.use_global);
    c.d_llm = j.value("d_llm", c.d_llm);
    c.d_bert = j.value("d_bert", c.d_bert);
    c.time_scale = j.value("time_scale", c.time_scale);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelInputs ModelInputs::build(const DyTAG& g, const FeatureStore* recent,
                               const FeatureStore* global, const TextEncoder& encoder,
                               std::size_t s, Segmenting segmenting) {
  ModelInputs in;
  in.g_ = &g;
  in.has_recent_ = recent != nullptr;
  in.has_global_ = global != nullptr;
  in.d_llm_ = recent ? recent->dim() : 0;
  in.d_bert_ = encoder.dim();
  if (global && global->dim() != encoder.dim()) {
    fail(ErrorKind::kInvalidConfig, "global cache dimension differs from the encoder");
  }
  in.nodes_.resize(g.num_nodes());
  for (NodeId v : g.nodes()) {
    auto& pn = in.nodes_[g.node_index(v)];
    pn.text = encoder.encode(g.node_text(v)).transpose();
    const auto items = g.incident(v);
    if (recent) {
      pn.recent.resize(static_cast<Eigen::Index>(items.size()),
                       static_cast<Eigen::Index>(in.d_llm_));
      pn.recent_present.assign(items.size(), 0);
      for (std::size_t k = 0; k < items.size(); ++k) {
        const StoreKey key{v, items[k].interaction};
        if (!recent->has(key)) continue;
        const auto row = recent->get(key);
        for (std::size_t j = 0; j < row.size(); ++j) {
          pn.recent(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = row[j];
        }
        pn.recent_present[k] = 1;
      }
    }
    if (global) {
      pn.boundaries =
          partition_segments(neighbor_sequence(g, v), s, segmenting, g.time_range()).boundaries;
      pn.global_present = true;
      pn.global.resize(static_cast<Eigen::Index>(s + 1), static_cast<Eigen::Index>(in.d_bert_));
      for (std::size_t i = 0; i <= s && pn.global_present; ++i) {
        if (!global->has({v, i})) {
          pn.global_present = false;
          break;
        }
        const auto row = global->get({v, i});
        for (std::size_t j = 0; j < row.size(); ++j) {
          pn.global(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
        }
      }
    }
  }
  return in;
}

Eigen::RowVectorXd ModelInputs::recent(NodeId v, std::size_t k) const {
  const auto& pn = nodes_[g_->node_index(v)];
  if (!has_recent_ || k >= pn.recent_present.size() || !pn.recent_present[k]) {
    const auto items = g_->incident(v);
    fail(ErrorKind::kMissingCache,
         "missing recent feature for (node " + std::to_string(v) + ", interaction " +
             (k < items.size() ? std::to_string(items[k].interaction) : std::string("?")) +
             "); run `dygrasp reason recent`");
  }
  return pn.recent.row(static_cast<Eigen::Index>(k));
}

Eigen::MatrixXd ModelInputs::global(NodeId v, std::size_t count) const {
  const auto& pn = nodes_[g_->node_index(v)];
  if (!has_global_ || !pn.global_present) {
    fail(ErrorKind::kMissingCache, "missing global features for node " + std::to_string(v) +
                                       "; run `dygrasp reason global`");
  }
  return pn.global.topRows(static_cast<Eigen::Index>(count));
}

const std::vector<double>& ModelInputs::boundaries(NodeId v) const {
  return nodes_[g_->node_index(v)].boundaries;
}

const Eigen::RowVectorXd& ModelInputs::text(NodeId v) const {
  return nodes_[g_->node_index(v)].text;
}

DyGraspModel::DyGraspModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.d_bert == 0) fail(ErrorKind::kInvalidConfig, "model d_bert is unresolved");
  if (cfg_.use_recent && cfg_.d_llm == 0) fail(ErrorKind::kInvalidConfig, "model d_llm is unresolved");
  if (!(cfg_.time_scale > 0.0)) fail(ErrorKind::kInvalidConfig, "model time_scale must be positive");
  std::mt19937_64 rng(hash_combine(cfg_.seed, 0x3a11ULL));
  const auto dt = static_cast<Eigen::Index>(cfg_.d_t);
  const auto dsf = static_cast<Eigen::Index>(cfg_.d_sf);
  const auto w = 2 * dt;
  const auto d_llm = static_cast<Eigen::Index>(std::max<std::size_t>(cfg_.d_llm, 1));

  Mat omega(1, dt);
  for (Eigen::Index j = 0; j < dt; ++j) {
    omega(0, j) = dt == 1 ? 1.0 : std::pow(10.0, -6.0 * static_cast<double>(j) / static_cast<double>(dt - 1));
  }
  omega_ = &params_.add("time.omega", omega);
  phi_ = &params_.add("time.phi", Mat::Zero(1, dt));
  p_recent_ = nn::Linear::make(params_, "proj.recent", d_llm, dt, rng);
  p_global_ = nn::Linear::make(params_, "proj.global", static_cast<Eigen::Index>(cfg_.d_bert), dt, rng);
  p_node_ = nn::Linear::make(params_, "proj.node", static_cast<Eigen::Index>(cfg_.d_bert), dsf, rng, false);
  for (std::size_t l = 1; l <= cfg_.layers; ++l) {
    const std::string n = std::to_string(l);
    rs_.push_back(nn::TransformerBlock::make(params_, "rs" + n, w, cfg_.heads, cfg_.ffn_ratio,
                                             cfg_.dropout, rng));
    gs_.push_back(nn::TransformerBlock::make(params_, "gs" + n, w, cfg_.heads, cfg_.ffn_ratio,
                                             cfg_.dropout, rng));
    StructureLayer sl;
    sl.attention = nn::MultiHeadAttention::make(params_, "tgnn" + n + ".attn", dsf + dt,
                                                dsf + 2 * dt, dsf, cfg_.heads, rng);
    sl.ffn = nn::Mlp::make(params_, "tgnn" + n + ".ffn", 2 * dsf, dsf, dsf, rng, cfg_.dropout);
    sl.self = nn::Linear::make(params_, "tgnn" + n + ".self", dsf, dsf, rng, false);
    structure_.push_back(sl);
    merge_.push_back(nn::Mlp::make(params_, "merge" + n, 2 * w + dsf, dsf, dsf, rng, cfg_.dropout));
  }
  head_ = nn::Mlp::make(params_, "head", 2 * dsf, dsf, 1, rng, cfg_.dropout);
  // A zero output layer starts every prediction at probability 1/2.
  head_.output.weight->value.setZero();
  head_.output.bias->value.setZero();
}

Var DyGraspModel::time_encode(Tape& t, const Eigen::VectorXd& delta_t) const {
  Mat scaled(delta_t.size(), 1);
  for (Eigen::Index i = 0; i < delta_t.size(); ++i) {
    if (delta_t[i] < 0.0) {
      fail(ErrorKind::kInvalidArgument, "negative time delta: query precedes an event");
    }
    scaled(i, 0) = delta_t[i] / cfg_.time_scale;
  }
  Var arg = t.add_row(t.matmul(t.constant(std::move(scaled)), t.param(*omega_)), t.param(*phi_));
  return t.cos(arg);
}

Var DyGraspModel::project_recent(Tape& t, Var f) const { return p_recent_(t, f); }
Var DyGraspModel::project_global(Tape& t, Var f) const { return p_global_(t, f); }
Var DyGraspModel::project_node(Tape& t, Var x) const { return p_node_(t, x); }

Var DyGraspModel::rs_layer(Tape& t, std::size_t l, Var x, const std::vector<nn::RowRange>& seqs,
                           std::mt19937_64* rng) const {
  return rs_.at(l - 1)(t, x, seqs, rng);
}

Var DyGraspModel::gs_layer(Tape& t, std::size_t l, Var x, const std::vector<nn::RowRange>& seqs,
                           std::mt19937_64* rng) const {
  return gs_.at(l - 1)(t, x, seqs, rng);
}

Var DyGraspModel::structure(Tape& t, std::size_t l, Var m_v, const NeighborBlock& neighbors,
                            std::mt19937_64* rng) const {
  const auto& sl = structure_.at(l - 1);
  const Eigen::Index n = m_v.rows();
  if (neighbors.ranges.size() != static_cast<std::size_t>(n)) {
    fail(ErrorKind::kTraining, "structure layer needs one neighbor range per row");
  }
  if (neighbors.delta_t.size() == 0) return sl.self(t, m_v);
  Var kv = t.concat_cols({neighbors.states, time_encode(t, neighbors.delta_t), neighbors.features});
  Var q = t.concat_cols({m_v, time_encode(t, Eigen::VectorXd::Zero(n))});
  std::vector<nn::RowRange> own(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) own[static_cast<std::size_t>(i)] = {i, 1};
  Var attended = sl.attention(t, q, kv, own, neighbors.ranges);
  Var with_neighbors = sl.ffn(t, t.concat_cols({attended, m_v}), rng);
  std::vector<Eigen::Index> pick(static_cast<std::size_t>(n));
  bool all = true;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool has = neighbors.ranges[static_cast<std::size_t>(i)].count > 0;
    all = all && has;
    pick[static_cast<std::size_t>(i)] = has ? i : n + i;
  }
  if (all) return with_neighbors;
  return t.gather_rows(t.concat_rows({with_neighbors, sl.self(t, m_v)}), std::move(pick));
}

Var DyGraspModel::merge(Tape& t, std::size_t l, Var r, Var g, Var s,
                        std::mt19937_64* rng) const {
  return merge_.at(l - 1)(t, t.concat_cols({r, g, s}), rng);
}

Var DyGraspModel::logit(Tape& t, Var m_u, Var m_v, std::mt19937_64* rng) const {
  return head_(t, t.concat_cols({m_u, m_v}), rng);
}

void DyGraspModel::check_inputs(const ModelInputs& in) const {
  if (cfg_.use_recent && !in.has_recent()) {
    fail(ErrorKind::kMissingCache, "model uses recent features but none are loaded");
  }
  if (cfg_.use_global && !in.has_global()) {
    fail(ErrorKind::kMissingCache, "model uses global features but none are loaded");
  }
  if (cfg_.use_recent && in.d_llm() != cfg_.d_llm) {
    fail(ErrorKind::kStaleCache, "recent cache dimension differs from the model's d_llm");
  }
  if (in.d_bert() != cfg_.d_bert) {
    fail(ErrorKind::kStaleCache, "encoder dimension differs from the model's d_bert");
  }
}

namespace {

struct QueryHash {
  std::size_t operator()(const NodeQuery& q) const {
    return static_cast<std::size_t>(hash_combine(q.node, std::bit_cast<std::uint64_t>(q.time)));
  }
};

// Distinct queries in first-seen order.
class QuerySet {
 public:
  std::size_t add(const NodeQuery& q) {
    auto [it, fresh] = pos_.emplace(q, list_.size());
    if (fresh) list_.push_back(q);
    return it->second;
  }
  Eigen::Index at(const NodeQuery& q) const { return static_cast<Eigen::Index>(pos_.at(q)); }
  const std::vector<NodeQuery>& list() const { return list_; }

 private:
  std::unordered_map<NodeQuery, std::size_t, QueryHash> pos_;
  std::vector<NodeQuery> list_;
};

// Number of v's interactions strictly before `time`.
std::size_t history_end(std::span<const NeighborItem> items, double time) {
  return static_cast<std::size_t>(
      std::lower_bound(items.begin(), items.end(), time,
                       [](const NeighborItem& a, double x) { return a.timestamp < x; }) -
      items.begin());
}

// Skips the copy when the selection is the identity.
Var select_rows(Tape& t, Var x, std::vector<Eigen::Index> index) {
  bool identity = static_cast<Eigen::Index>(index.size()) == x.rows();
  for (std::size_t i = 0; identity && i < index.size(); ++i) {
    identity = index[i] == static_cast<Eigen::Index>(i);
  }
  return identity ? x : t.gather_rows(x, std::move(index));
}

}  // namespace

DyGraspModel::Streams DyGraspModel::streams(Tape& t, const ModelInputs& in,
                                            const std::vector<NodeQuery>& queries,
                                            std::mt19937_64* rng) const {
  Streams st;
  const auto n = static_cast<Eigen::Index>(queries.size());
  const auto w = static_cast<Eigen::Index>(2 * cfg_.d_t);
  const auto& g = in.graph();
  Var zero = t.constant(Mat::Zero(n, w));

  std::vector<nn::RowRange> seqs(queries.size());
  if (cfg_.use_recent) {
    std::vector<std::pair<NodeId, std::size_t>> rows;
    std::vector<double> dts;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& q = queries[i];
      const auto items = g.incident(q.node);
      const std::size_t end = history_end(items, q.time);
      const std::size_t first = end > cfg_.n_recent ? end - cfg_.n_recent : 0;
      seqs[i] = {static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(end - first)};
      for (std::size_t k = first; k < end; ++k) {
        rows.emplace_back(q.node, k);
        dts.push_back(q.time - items[k].timestamp);
      }
    }
    if (rows.empty()) {
      st.recent.assign(cfg_.layers, zero);
    } else {
      Mat f(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cfg_.d_llm));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        f.row(static_cast<Eigen::Index>(r)) = in.recent(rows[r].first, rows[r].second);
      }
      Var x = t.concat_cols({project_recent(t, t.constant(std::move(f))),
                             time_encode(t, Eigen::Map<const Eigen::VectorXd>(
                                                dts.data(), static_cast<Eigen::Index>(dts.size())))});
      for (std::size_t l = 1; l <= cfg_.layers; ++l) {
        x = rs_layer(t, l, x, seqs, rng);
        st.recent.push_back(t.segment_mean(x, seqs));
      }
    }
  } else {
    st.recent.assign(cfg_.layers, zero);
  }

  if (cfg_.use_global) {
    std::vector<Mat> blocks;
    std::vector<double> dts;
    std::vector<Eigen::Index> readout(queries.size());
    Eigen::Index total = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& q = queries[i];
      const auto& b = in.boundaries(q.node);
      const std::size_t last = latest_segment_before(b, q.time);
      const auto count = static_cast<Eigen::Index>(last + 1);
      seqs[i] = {total, count};
      readout[i] = total + count - 1;
      blocks.push_back(in.global(q.node, last + 1));
      for (std::size_t j = 0; j <= last; ++j) dts.push_back(q.time - b[j]);
      total += count;
    }
    Mat gf(total, static_cast<Eigen::Index>(cfg_.d_bert));
    Eigen::Index at = 0;
    for (const auto& blk : blocks) {
      gf.middleRows(at, blk.rows()) = blk;
      at += blk.rows();
    }
    Var x = t.concat_cols({project_global(t, t.constant(std::move(gf))),
                           time_encode(t, Eigen::Map<const Eigen::VectorXd>(
                                              dts.data(), static_cast<Eigen::Index>(dts.size())))});
    for (std::size_t l = 1; l <= cfg_.layers; ++l) {
      x = gs_layer(t, l, x, seqs, rng);
      st.global.push_back(t.gather_rows(x, readout));
    }
  } else {
    st.global.assign(cfg_.layers, zero);
  }
  return st;
}

Var DyGraspModel::embed_batch(Tape& t, const ModelInputs& in, const std::vector<NodeQuery>& queries,
                              std::mt19937_64* rng) const {
  check_inputs(in);
  if (queries.empty()) fail(ErrorKind::kInvalidArgument, "no nodes to embed");
  for (const auto& q : queries) {
    if (q.time < 0.0) fail(ErrorKind::kInvalidArgument, "query time must be non-negative");
  }
  const std::size_t L = cfg_.layers;
  const auto& g = in.graph();
  // level[l]: queries whose layer-l state is needed. Each level also holds
  // the level above it, so level[1] covers every sequence-stream readout.
  std::vector<QuerySet> level(L + 1);
  for (const auto& q : queries) level[L].add(q);
  for (std::size_t l = L; l >= 1; --l) {
    for (const auto& q : level[l].list()) {
      level[l - 1].add(q);
      const auto items = g.incident(q.node);
      const std::size_t end = history_end(items, q.time);
      const std::size_t first = end > cfg_.n_neighbors ? end - cfg_.n_neighbors : 0;
      for (std::size_t k = first; k < end; ++k) {
        level[l - 1].add({items[k].counterpart, items[k].timestamp});
      }
    }
  }

  const auto& base = level[0].list();
  Mat texts(static_cast<Eigen::Index>(base.size()), static_cast<Eigen::Index>(cfg_.d_bert));
  for (std::size_t i = 0; i < base.size(); ++i) texts.row(static_cast<Eigen::Index>(i)) = in.text(base[i].node);
  Var state = project_node(t, t.constant(std::move(texts)));

  const Streams st = streams(t, in, level[1].list(), rng);
  for (std::size_t l = 1; l <= L; ++l) {
    const auto& qs = level[l].list();
    std::vector<Eigen::Index> self_rows;
    std::vector<Eigen::Index> stream_rows;
    std::vector<Eigen::Index> neighbor_rows;
    std::vector<std::pair<NodeId, std::size_t>> feature_rows;
    std::vector<double> dts;
    NeighborBlock nb;
    nb.ranges.resize(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) {
      const auto& q = qs[i];
      self_rows.push_back(level[l - 1].at(q));
      stream_rows.push_back(level[1].at(q));
      const auto items = g.incident(q.node);
      const std::size_t end = history_end(items, q.time);
      const std::size_t first = end > cfg_.n_neighbors ? end - cfg_.n_neighbors : 0;
      nb.ranges[i] = {static_cast<Eigen::Index>(neighbor_rows.size()),
                      static_cast<Eigen::Index>(end - first)};
      for (std::size_t k = first; k < end; ++k) {
        neighbor_rows.push_back(level[l - 1].at({items[k].counterpart, items[k].timestamp}));
        feature_rows.emplace_back(q.node, k);
        dts.push_back(q.time - items[k].timestamp);
      }
    }
    Var m_v = select_rows(t, state, self_rows);
    const auto nn_rows = static_cast<Eigen::Index>(neighbor_rows.size());
    nb.delta_t = Eigen::Map<const Eigen::VectorXd>(dts.data(), nn_rows);
    if (nn_rows > 0) {
      nb.states = t.gather_rows(state, std::move(neighbor_rows));
      if (cfg_.use_recent) {
        Mat f(nn_rows, static_cast<Eigen::Index>(cfg_.d_llm));
        for (Eigen::Index r = 0; r < nn_rows; ++r) {
          const auto& [v, k] = feature_rows[static_cast<std::size_t>(r)];
          f.row(r) = in.recent(v, k);
        }
        nb.features = project_recent(t, t.constant(std::move(f)));
      } else {
        nb.features = t.constant(Mat::Zero(nn_rows, static_cast<Eigen::Index>(cfg_.d_t)));
      }
    }
    Var s = structure(t, l, m_v, nb, rng);
    state = merge(t, l, select_rows(t, st.recent[l - 1], stream_rows),
                  select_rows(t, st.global[l - 1], stream_rows), s, rng);
  }

  std::vector<Eigen::Index> out_rows;
  out_rows.reserve(queries.size());
  for (const auto& q : queries) out_rows.push_back(level[L].at(q));
  return select_rows(t, state, std::move(out_rows));
}

Var DyGraspModel::embed(Tape& t, const ModelInputs& in, NodeId v, double time,
                        std::mt19937_64* rng) const {
  return embed_batch(t, in, {{v, time}}, rng);
}

double DyGraspModel::score(const ModelInputs& in, NodeId u, NodeId v, double time) const {
  return score_pairs(in, {{u, v, time}})[0];
}

std::vector<double> DyGraspModel::score_candidates(const ModelInputs& in, NodeId u,
                                                   const std::vector<NodeId>& candidates,
                                                   double time) const {
  std::vector<PairQuery> pairs;
  pairs.reserve(candidates.size());
  for (NodeId c : candidates) pairs.push_back({u, c, time});
  return score_pairs(in, pairs);
}

std::vector<double> DyGraspModel::score_pairs(const ModelInputs& in,
                                              const std::vector<PairQuery>& pairs) const {
  if (pairs.empty()) return {};
  Tape t(false);
  std::vector<NodeQuery> queries;
  queries.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    queries.push_back({p.src, p.time});
    queries.push_back({p.dst, p.time});
  }
  Var e = embed_batch(t, in, queries);
  std::vector<Eigen::Index> left;
  std::vector<Eigen::Index> right;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    left.push_back(static_cast<Eigen::Index>(2 * i));
    right.push_back(static_cast<Eigen::Index>(2 * i + 1));
  }
  const Mat& z = logit(t, t.gather_rows(e, left), t.gather_rows(e, right)).value();
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-z(static_cast<Eigen::Index>(i), 0)));
  }
  return out;
}

namespace {
constexpr char kCheckpointMagic[8] = {'D', 'Y', 'G', 'C', 'K', 'P', 'T', '1'};
}

void DyGraspModel::save(const std::filesystem::path& path) const {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : params_.params()) {
    shapes.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  }
  const std::string header =
      nlohmann::json{{"config", to_json(cfg_)}, {"seed", cfg_.seed}, {"params", shapes}}.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kData, "cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const auto len = static_cast<std::uint64_t>(header.size());
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& p : params_.params()) {
      // Column-major order, as Eigen stores it.
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p.value.data()[i]));
        unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16),
                              static_cast<unsigned char>(bits >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
      }
    }
    if (!out) fail(ErrorKind::kData, "failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

DyGraspModel DyGraspModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(ErrorKind::kMissingCache, "checkpoint " + path.string() + " not found; run `dygrasp train`");
  }
  char magic[8];
  unsigned char len_bytes[8];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    fail(ErrorKind::kCorruptCache, path.string() + " is not a checkpoint");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  if (len > (1u << 26)) fail(ErrorKind::kCorruptCache, "checkpoint header too large");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptCache, "checkpoint header: " + std::string(e.what()));
  }
  DyGraspModel model(model_config_from_json(h.at("config")));
  const auto& shapes = h.at("params");
  if (shapes.size() != model.params_.params().size()) {
    fail(ErrorKind::kCorruptCache, "checkpoint parameter count does not match its config");
  }
  std::size_t idx = 0;
  for (auto& p : model.params_.params()) {
    const auto& s = shapes[idx++];
    if (s.at("name") != p.name || s.at("rows") != p.value.rows() || s.at("cols") != p.value.cols()) {
      fail(ErrorKind::kCorruptCache, "checkpoint parameter " + p.name + " has a different shape");
    }
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                 (static_cast<std::uint32_t>(b[2]) << 16) |
                                 (static_cast<std::uint32_t>(b[3]) << 24);
      p.value.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  if (!in) fail(ErrorKind::kCorruptCache, "checkpoint " + path.string() + " is truncated");
  return model;
}

std::vector<Eigen::MatrixXd> DyGraspModel::snapshot() const {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& p : params_.params()) out.push_back(p.value);
  return out;
}

void DyGraspModel::restore(const std::vector<Eigen::MatrixXd>& values) {
  std::size_t i = 0;
  for (auto& p : params_.params()) p.value = values.at(i++);
}

}  // namespace dygrasp
