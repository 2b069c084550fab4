#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dygrasp/dytag.hpp"
#include "dygrasp/feature_store.hpp"
#include "dygrasp/global_reasoner.hpp"
#include "dygrasp/llm_backend.hpp"
#include "dygrasp/model.hpp"
#include "dygrasp/prompt_template.hpp"
#include "dygrasp/recent_reasoner.hpp"
#include "dygrasp/text_encoder.hpp"
#include "dygrasp/train_eval.hpp"

// Stage plumbing shared by the command-line tool and the end-to-end tests.
// Every stage reads and writes files only.
namespace dygrasp {

inline constexpr std::string_view kVersion = "0.1.0";

struct RunConfig {
  std::filesystem::path dataset;    // directory with the three CSV files
  std::filesystem::path trace;      // oracle backend only; default <dataset>/trace.json
  std::filesystem::path cache_dir = "cache";
  BackendConfig backend;
  EncoderConfig encoder;
  std::size_t c = 16;
  std::size_t s = 8;
  Segmenting segmenting = Segmenting::kCount;
  std::filesystem::path recent_template;  // empty: built-in
  std::filesystem::path global_template;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  // Copied into the backend, encoder, model, train and eval seeds.
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
  std::filesystem::path trace_path() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Relative paths resolve against `base`. Unknown fields are rejected.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Pushes the shared seed and worker count into the component configs.
RunConfig resolve(RunConfig cfg);

std::unique_ptr<LlmBackend> make_backend(const RunConfig& cfg);
DyTAG load_dataset(const RunConfig& cfg);
PromptTemplate recent_template(const RunConfig& cfg);
PromptTemplate global_template(const RunConfig& cfg);

// run.json: resolved config, versions, seeds and stage-specific extras.
nlohmann::json run_record(const RunConfig& cfg, std::string_view command,
                          nlohmann::json extra = nlohmann::json::object());
// Merges the record into <dir>/run.json under the command name.
void record_run(const std::filesystem::path& dir, const RunConfig& cfg, std::string_view command,
                nlohmann::json extra = nlohmann::json::object());
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

struct StageControl {
  bool resume = false;
  std::optional<std::size_t> stop_after_calls;
  const std::atomic<bool>* cancel = nullptr;
};

struct RecentStageSummary {
  std::size_t batches = 0;
  std::size_t features = 0;
};

// Writes the recent store under cfg.cache_dir. Without `resume` an existing
// store is replaced; with it, a store with the same fingerprint is extended.
RecentStageSummary reason_recent(const RunConfig& cfg, const StageControl& control = {});
GlobalStageResult reason_global(const RunConfig& cfg, const StageControl& control = {});

TokenReport count_tokens(const RunConfig& cfg, TokenMode mode);

// Opens the stores the model needs and checks them against the config.
struct LoadedInputs {
  DyTAG graph;
  Split split;
  std::unique_ptr<TextEncoder> encoder;
  std::optional<FeatureStore> recent;
  std::optional<FeatureStore> global;
};

LoadedInputs load_inputs(const RunConfig& cfg, bool need_recent, bool need_global);

// Fills d_llm, d_bert and time_scale from the inputs.
ModelConfig resolve_model_config(const RunConfig& cfg, const LoadedInputs& in);

struct TrainOutcome {
  TrainResult result;
  std::filesystem::path checkpoint;
};

// Writes the checkpoint plus history.csv, train.json and run.json beside it.
TrainOutcome train_stage(const RunConfig& cfg, const std::filesystem::path& checkpoint);

enum class EvalTask { kRetrieval, kLinkPred };
EvalTask parse_task(std::string_view name);
std::string_view task_name(EvalTask task);

nlohmann::json eval_stage(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                          EvalTask task);

// Four-variant table over `seeds`, written as ablation.json and ablation.csv.
std::vector<AblationRow> ablate_stage(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                      const std::filesystem::path& out_dir);

enum class SweepParam { kWindow, kSegments };
SweepParam parse_sweep_param(std::string_view name);

struct SweepPoint {
  std::size_t value = 0;
  nlohmann::json metrics;
  std::size_t unresolved = 0;  // oracle backend, window sweep only
};

// Per value: reruns the matching reasoning stage into its own cache
// subdirectory, then trains and evaluates. Writes sweep.json and sweep.csv.
std::vector<SweepPoint> sweep_stage(const RunConfig& cfg, SweepParam param,
                                    const std::vector<std::size_t>& values,
                                    const std::filesystem::path& out_dir);

}  // namespace dygrasp
