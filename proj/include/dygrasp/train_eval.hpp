#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/model.hpp"

namespace dygrasp {

struct TrainConfig {
  std::size_t batch_size = 256;
  double learning_rate = 1e-4;
  std::size_t max_epochs = 50;
  std::size_t eval_every = 5;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 0;
  // Validation AP uses at most this many val interactions (0 = all).
  std::size_t max_val_samples = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

enum class EvalSetting { kTransductive, kInductive };
std::string_view setting_name(EvalSetting s);
EvalSetting parse_setting(std::string_view name);

struct EvalConfig {
  std::vector<std::size_t> ks = {1, 3, 10};
  std::size_t num_candidates = 100;
  bool all_candidates = false;  // rank against every destination instead
  EvalSetting setting = EvalSetting::kTransductive;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t max_queries = 0;  // 0 = every test interaction

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& cfg);
EvalConfig eval_config_from_json(const nlohmann::json& j);

// Uniform negatives: destination nodes for bipartite graphs, else all nodes.
class NegativeSampler {
 public:
  explicit NegativeSampler(const DyTAG& g);
  NodeId sample(NodeId exclude, std::uint64_t key) const;
  // `count` distinct negatives (fewer if the pool is smaller), never `exclude`.
  std::vector<NodeId> sample_distinct(NodeId exclude, std::size_t count, std::uint64_t key) const;
  const std::vector<NodeId>& pool() const { return pool_; }

 private:
  std::vector<NodeId> pool_;
};

// Exact metrics. AP groups tied scores; AUC counts ties as one half.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);
// Pessimistic rank of the true candidate: 1 + number of negatives scoring >= it.
std::size_t pessimistic_rank(double true_score, const std::vector<double>& negative_scores);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_ap;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_ap = 0.0;
  std::size_t steps = 0;
  double initial_loss = 0.0;  // first batch, before any update

  nlohmann::json to_json() const;
  std::string history_csv() const;
};

// BCE with one sampled negative per positive; validation AP every
// eval_every epochs with early stopping. Leaves the best-on-val parameters
// in the model.
TrainResult train(DyGraspModel& model, const ModelInputs& inputs, const Split& split,
                  const TrainConfig& cfg);

struct LinkPredResult {
  double ap = 0.0;
  double auc = 0.0;
  std::size_t num_positives = 0;
};

LinkPredResult eval_linkpred(const DyGraspModel& model, const ModelInputs& inputs,
                             IndexRange range, const std::set<InteractionId>* restrict_to,
                             const EvalConfig& cfg);

struct RetrievalResult {
  std::map<std::size_t, double> hit;  // k -> Hit@k
  std::size_t num_queries = 0;
};

RetrievalResult eval_retrieval(const DyGraspModel& model, const ModelInputs& inputs,
                               IndexRange range, const std::set<InteractionId>* restrict_to,
                               const EvalConfig& cfg);

// Test-range instances for a setting; Error(kData) when the inductive mask is empty.
std::optional<std::set<InteractionId>> setting_filter(const DyTAG& g, const Split& split,
                                                      EvalSetting setting);

struct AblationVariant {
  std::string name;
  bool use_recent = true;
  bool use_global = true;
};

// full, -Recent, -Global, -Recent&-Global.
std::vector<AblationVariant> ablation_variants();

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_seed;
};

struct AblationRow {
  std::string variant;
  std::map<std::string, MetricSummary> metrics;  // "AP", "AUC", "Hit@k"
};

struct AblationInputs {
  const DyTAG* graph = nullptr;
  const FeatureStore* recent = nullptr;
  const FeatureStore* global = nullptr;
  const TextEncoder* encoder = nullptr;
  std::size_t s = 8;
  Segmenting segmenting = Segmenting::kCount;
};

// Trains and evaluates each variant with the same seeds and data order.
// Variants only load the caches they use.
std::vector<AblationRow> ablate(const AblationInputs& in, const Split& split,
                                const ModelConfig& base, const TrainConfig& train_cfg,
                                const EvalConfig& eval_cfg,
                                const std::vector<std::uint64_t>& seeds,
                                const std::vector<AblationVariant>& variants = ablation_variants(),
                                bool with_retrieval = true);

MetricSummary summarize(const std::vector<double>& values);
nlohmann::json to_json(const std::vector<AblationRow>& rows);

// Default time scale: a ten-thousandth of the training time span.
double auto_time_scale(const DyTAG& g, const Split& split);

}  // namespace dygrasp
