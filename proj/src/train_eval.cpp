#include "dygrasp/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/worker_pool.hpp"

namespace dygrasp {

using nn::Tape;
using nn::Var;

void TrainConfig::validate() const {
  if (batch_size == 0 || max_epochs == 0 || eval_every == 0 || early_stop_patience == 0 ||
      !(learning_rate > 0.0)) {
    fail(ErrorKind::kInvalidConfig, "train config values must be positive");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
          {"max_epochs", c.max_epochs},   {"eval_every", c.eval_every},
          {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},               {"max_val_samples", c.max_val_samples}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.seed = j.value("seed", c.seed);
    c.max_val_samples = j.value("max_val_samples", c.max_val_samples);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string_view setting_name(EvalSetting s) {
  return s == EvalSetting::kTransductive ? "transductive" : "inductive";
}

EvalSetting parse_setting(std::string_view name) {
  if (name == "transductive") return EvalSetting::kTransductive;
  if (name == "inductive") return EvalSetting::kInductive;
  fail(ErrorKind::kInvalidArgument, "unknown setting `" + std::string(name) + "`");
}

void EvalConfig::validate() const {
  if (ks.empty()) fail(ErrorKind::kInvalidConfig, "ks must not be empty");
  if (!std::is_sorted(ks.begin(), ks.end()) || ks.front() == 0) {
    fail(ErrorKind::kInvalidConfig, "ks must be positive and ascending");
  }
  if (!all_candidates && num_candidates < ks.back()) {
    fail(ErrorKind::kInvalidConfig, "num_candidates must be at least max(ks)");
  }
}

nlohmann::json to_json(const EvalConfig& c) {
  return {{"ks", c.ks},
          {"num_candidates", c.all_candidates ? nlohmann::json("all") : nlohmann::json(c.num_candidates)},
          {"setting", setting_name(c.setting)},
          {"seed", c.seed},
          {"max_queries", c.max_queries}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  try {
    c.ks = j.value("ks", c.ks);
    if (j.contains("num_candidates")) {
      const auto& n = j.at("num_candidates");
      if (n.is_string() && n.get<std::string>() == "all") {
        c.all_candidates = true;
      } else {
        c.num_candidates = n.get<std::size_t>();
      }
    }
    if (j.contains("setting")) c.setting = parse_setting(j.at("setting").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.max_queries = j.value("max_queries", c.max_queries);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("eval config: ") + e.what());
  }
  c.validate();
  return c;
}

NegativeSampler::NegativeSampler(const DyTAG& g) {
  pool_ = g.is_bipartite() ? g.destinations() : g.nodes();
  if (pool_.size() < 2) fail(ErrorKind::kData, "negative sampling needs at least two candidates");
}

NodeId NegativeSampler::sample(NodeId exclude, std::uint64_t key) const {
  HashStream hs(key);
  for (;;) {
    const NodeId c = pool_[hs.next_u64() % pool_.size()];
    if (c != exclude) return c;
  }
}

std::vector<NodeId> NegativeSampler::sample_distinct(NodeId exclude, std::size_t count,
                                                     std::uint64_t key) const {
  std::vector<NodeId> others;
  others.reserve(pool_.size());
  for (NodeId c : pool_) {
    if (c != exclude) others.push_back(c);
  }
  if (count >= others.size()) return others;
  // Partial Fisher-Yates.
  HashStream hs(key);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(hs.next_u64() % (others.size() - i));
    std::swap(others[i], others[j]);
  }
  others.resize(count);
  return others;
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::kInvalidArgument, "scores/labels size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto total_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (total_pos == 0) fail(ErrorKind::kInvalidArgument, "AP needs at least one positive");
  double ap = 0.0;
  std::size_t seen = 0;
  std::size_t seen_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]] == 1 ? 1 : 0;
      ++j;
    }
    seen += j - i;
    seen_pos += group_pos;
    ap += static_cast<double>(group_pos) * static_cast<double>(seen_pos) / static_cast<double>(seen);
    i = j;
  }
  return ap / total_pos;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::kInvalidArgument, "scores/labels size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum_pos += avg_rank;
        n_pos += 1.0;
      }
    }
    i = j;
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorKind::kInvalidArgument, "AUC needs both classes");
  return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

std::size_t pessimistic_rank(double true_score, const std::vector<double>& negative_scores) {
  std::size_t r = 1;
  for (double s : negative_scores) r += s >= true_score ? 1 : 0;
  return r;
}

nlohmann::json TrainResult::to_json() const {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& e : history) {
    h.push_back({{"epoch", e.epoch},
                 {"train_loss", e.train_loss},
                 {"val_ap", e.val_ap ? nlohmann::json(*e.val_ap) : nlohmann::json()}});
  }
  return {{"history", h}, {"best_epoch", best_epoch}, {"best_val_ap", best_val_ap},
          {"steps", steps}, {"initial_loss", initial_loss}};
}

std::string TrainResult::history_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss,val_AP\n";
  for (const auto& e : history) {
    out << e.epoch << ',' << e.train_loss << ',';
    if (e.val_ap) out << *e.val_ap;
    out << '\n';
  }
  return out.str();
}

namespace {

// Link-prediction instances scored per tape during evaluation.
constexpr std::size_t kEvalChunk = 64;

std::vector<std::size_t> select_range(IndexRange range, const std::set<InteractionId>* restrict_to,
                                      std::size_t max_count) {
  std::vector<std::size_t> ids;
  for (std::size_t i = range.begin; i < range.end; ++i) {
    if (!restrict_to || restrict_to->contains(i)) ids.push_back(i);
  }
  if (max_count > 0 && ids.size() > max_count) {
    // Evenly spaced subsample keeps the whole period represented.
    std::vector<std::size_t> sub;
    for (std::size_t k = 0; k < max_count; ++k) sub.push_back(ids[k * ids.size() / max_count]);
    ids = std::move(sub);
  }
  return ids;
}

double max_abs_param(const DyGraspModel& m) {
  double v = 0.0;
  for (const auto& p : m.params().params()) v = std::max(v, p.value.cwiseAbs().maxCoeff());
  return v;
}

}  // namespace

TrainResult train(DyGraspModel& model, const ModelInputs& inputs, const Split& split,
                  const TrainConfig& cfg) {
  cfg.validate();
  const DyTAG& g = inputs.graph();
  if (split.train.size() == 0) fail(ErrorKind::kTraining, "empty training range");
  NegativeSampler sampler(g);
  nn::Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  TrainResult result;
  std::vector<Eigen::MatrixXd> best = model.snapshot();
  bool have_best = false;
  std::size_t stale = 0;

  EvalConfig val_cfg;
  val_cfg.seed = cfg.seed;
  val_cfg.max_queries = cfg.max_val_samples;

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), split.train.begin);
    HashStream shuffle(hash_combine(cfg.seed, hash_combine(0x5a0ffeULL, epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.next_u64() % i]);
    }
    std::mt19937_64 dropout_rng(hash_combine(cfg.seed, hash_combine(0xd40ULL, epoch)));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      // Rows 3k, 3k+1, 3k+2: source, destination and negative of sample k.
      std::vector<NodeQuery> queries;
      std::vector<Eigen::Index> left;
      std::vector<Eigen::Index> right;
      Eigen::VectorXd labels(static_cast<Eigen::Index>(2 * (stop - start)));
      Eigen::Index li = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& e = g.log()[order[k]];
        const NodeId neg = sampler.sample(e.dst, hash_combine(cfg.seed, hash_combine(epoch, e.id)));
        const auto row = static_cast<Eigen::Index>(queries.size());
        queries.push_back({e.src, e.timestamp});
        queries.push_back({e.dst, e.timestamp});
        queries.push_back({neg, e.timestamp});
        left.push_back(row);
        right.push_back(row + 1);
        labels[li++] = 1.0;
        left.push_back(row);
        right.push_back(row + 2);
        labels[li++] = 0.0;
      }
      Var emb = model.embed_batch(tape, inputs, queries, &dropout_rng);
      Var logits = model.logit(tape, tape.gather_rows(emb, std::move(left)),
                               tape.gather_rows(emb, std::move(right)), &dropout_rng);
      Var loss = tape.bce_with_logits(logits, labels);
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) {
        fail(ErrorKind::kTraining, "non-finite loss at epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(result.steps) +
                                       "; max |param| = " + std::to_string(max_abs_param(model)) +
                                       "; try a lower learning rate");
      }
      if (result.steps == 0) result.initial_loss = lv;
      model.params().zero_grad();
      tape.backward(loss);
      adam.step(model.params());
      ++result.steps;
      loss_sum += lv * static_cast<double>(stop - start);
      loss_count += stop - start;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    const bool validate_now = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
    bool stop_now = false;
    if (validate_now && split.val.size() > 0) {
      const double ap = eval_linkpred(model, inputs, split.val, nullptr, val_cfg).ap;
      rec.val_ap = ap;
      if (!have_best || ap > result.best_val_ap) {
        result.best_val_ap = ap;
        result.best_epoch = epoch;
        best = model.snapshot();
        have_best = true;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        stop_now = true;
      }
    } else if (validate_now) {
      best = model.snapshot();
      result.best_epoch = epoch;
      have_best = true;
    }
    log::info("epoch", {{"epoch", epoch}, {"train_loss", rec.train_loss},
                        {"val_ap", rec.val_ap ? nlohmann::json(*rec.val_ap) : nlohmann::json()}});
    result.history.push_back(rec);
    if (stop_now) break;
  }
  if (have_best) model.restore(best);
  return result;
}

LinkPredResult eval_linkpred(const DyGraspModel& model, const ModelInputs& inputs,
                             IndexRange range, const std::set<InteractionId>* restrict_to,
                             const EvalConfig& cfg) {
  const DyTAG& g = inputs.graph();
  NegativeSampler sampler(g);
  const auto ids = select_range(range, restrict_to, cfg.max_queries);
  if (ids.empty()) fail(ErrorKind::kData, "no interactions to evaluate");
  std::vector<double> scores(2 * ids.size());
  // Fixed chunks keep the scores independent of the worker count.
  const std::size_t chunks = (ids.size() + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, cfg.workers, [&](std::size_t c) {
    const std::size_t begin = c * kEvalChunk;
    const std::size_t end = std::min(ids.size(), begin + kEvalChunk);
    std::vector<PairQuery> pairs;
    for (std::size_t q = begin; q < end; ++q) {
      const auto& e = g.log()[ids[q]];
      const NodeId neg = sampler.sample(e.dst, hash_combine(cfg.seed ^ 0x11e9ULL, e.id));
      pairs.push_back({e.src, e.dst, e.timestamp});
      pairs.push_back({e.src, neg, e.timestamp});
    }
    const auto s = model.score_pairs(inputs, pairs);
    std::copy(s.begin(), s.end(), scores.begin() + static_cast<std::ptrdiff_t>(2 * begin));
  });
  std::vector<int> labels(scores.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2 == 0 ? 1 : 0;
  LinkPredResult r;
  r.ap = average_precision(scores, labels);
  r.auc = roc_auc(scores, labels);
  r.num_positives = ids.size();
  return r;
}

RetrievalResult eval_retrieval(const DyGraspModel& model, const ModelInputs& inputs,
                               IndexRange range, const std::set<InteractionId>* restrict_to,
                               const EvalConfig& cfg) {
  cfg.validate();
  const DyTAG& g = inputs.graph();
  NegativeSampler sampler(g);
  const auto ids = select_range(range, restrict_to, cfg.max_queries);
  if (ids.empty()) fail(ErrorKind::kData, "no interactions to evaluate");
  std::vector<std::size_t> ranks(ids.size());
  parallel_for(ids.size(), cfg.workers, [&](std::size_t q) {
    const auto& e = g.log()[ids[q]];
    std::vector<NodeId> cands = cfg.all_candidates
        ? sampler.sample_distinct(e.dst, sampler.pool().size(), 0)
        : sampler.sample_distinct(e.dst, cfg.num_candidates, hash_combine(cfg.seed ^ 0x4e7ULL, e.id));
    cands.insert(cands.begin(), e.dst);
    auto s = model.score_candidates(inputs, e.src, cands, e.timestamp);
    const double truth = s[0];
    s.erase(s.begin());
    ranks[q] = pessimistic_rank(truth, s);
  });
  RetrievalResult r;
  r.num_queries = ids.size();
  for (std::size_t k : cfg.ks) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t x) { return x <= k; });
    r.hit[k] = static_cast<double>(hits) / static_cast<double>(ids.size());
  }
  return r;
}

std::optional<std::set<InteractionId>> setting_filter(const DyTAG& g, const Split& split,
                                                      EvalSetting setting) {
  if (setting == EvalSetting::kTransductive) return std::nullopt;
  auto mask = inductive_mask(g, split);
  if (mask.empty()) fail(ErrorKind::kData, "no inductive test instances");
  return mask;
}

std::vector<AblationVariant> ablation_variants() {
  return {{"full", true, true},
          {"-Recent", false, true},
          {"-Global", true, false},
          {"-Recent&-Global", false, false}};
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.per_seed = values;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  return s;
}

nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& r : rows) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, s] : r.metrics) {
      m[name] = {{"mean", s.mean}, {"std", s.std}, {"per_seed", s.per_seed}};
    }
    out[r.variant] = m;
  }
  return out;
}

double auto_time_scale(const DyTAG& g, const Split& split) {
  if (split.train.size() == 0) return 1.0;
  const double t0 = g.log()[split.train.begin].timestamp;
  const double t1 = g.log()[split.train.end - 1].timestamp;
  return t1 > t0 ? (t1 - t0) / 1e4 : 1.0;
}

std::vector<AblationRow> ablate(const AblationInputs& in, const Split& split,
                                const ModelConfig& base, const TrainConfig& train_cfg,
                                const EvalConfig& eval_cfg,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<AblationVariant>& variants,
                                bool with_retrieval) {
  std::vector<AblationRow> rows;
  for (const auto& var : variants) {
    if (var.use_recent && !in.recent) {
      fail(ErrorKind::kMissingCache, "variant " + var.name + " needs recent features; run `dygrasp reason recent`");
    }
    if (var.use_global && !in.global) {
      fail(ErrorKind::kMissingCache, "variant " + var.name + " needs global features; run `dygrasp reason global`");
    }
    const auto inputs = ModelInputs::build(*in.graph, var.use_recent ? in.recent : nullptr,
                                           var.use_global ? in.global : nullptr, *in.encoder,
                                           in.s, in.segmenting);
    std::map<std::string, std::vector<double>> values;
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = base;
      mc.use_recent = var.use_recent;
      mc.use_global = var.use_global;
      mc.seed = seed;
      if (in.recent) mc.d_llm = in.recent->dim();
      mc.d_bert = in.encoder->dim();
      if (!(mc.time_scale > 0.0)) mc.time_scale = auto_time_scale(*in.graph, split);
      TrainConfig tc = train_cfg;
      tc.seed = seed;
      EvalConfig ec = eval_cfg;
      ec.seed = seed;
      DyGraspModel model(mc);
      train(model, inputs, split, tc);
      const auto lp = eval_linkpred(model, inputs, split.test, nullptr, ec);
      values["AP"].push_back(lp.ap);
      values["AUC"].push_back(lp.auc);
      if (with_retrieval) {
        const auto rr = eval_retrieval(model, inputs, split.test, nullptr, ec);
        for (const auto& [k, h] : rr.hit) values["Hit@" + std::to_string(k)].push_back(h);
      }
      log::info("ablation_run", {{"variant", var.name}, {"seed", seed}, {"AP", lp.ap}});
    }
    AblationRow row;
    row.variant = var.name;
    for (const auto& [name, v] : values) row.metrics[name] = summarize(v);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dygrasp
