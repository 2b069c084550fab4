#include "dygrasp/pipeline.hpp"

#include <Eigen/Core>
#include <fstream>
#include <sstream>

#include "dygrasp/csv.hpp"
#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/synthgen.hpp"

namespace dygrasp {
namespace {

namespace fs = std::filesystem;

void check_fields(const nlohmann::json& j, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) fail(ErrorKind::kInvalidConfig, "run config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto k : known) ok = ok || it.key() == k;
    if (!ok) fail(ErrorKind::kInvalidConfig, "unknown run config field `" + it.key() + "`");
  }
}

fs::path resolve_path(const nlohmann::json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return {};
  fs::path p = j.at(key).get<std::string>();
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) fail(ErrorKind::kInvalidArgument, what + " not found: " + p.string());
}

// Writes to a sibling and renames, so readers never see a partial file.
void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kInvalidArgument, "cannot write " + tmp.string());
    out << text;
    if (!out) fail(ErrorKind::kInvalidArgument, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json metrics_json(const std::vector<AblationRow>& rows) { return to_json(rows); }

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::set<std::string> names;
  for (const auto& r : rows) {
    for (const auto& [name, _] : r.metrics) names.insert(name);
  }
  std::ostringstream out;
  out.precision(17);
  out << "variant";
  for (const auto& n : names) out << "," << n << "_mean," << n << "_std";
  out << "\n";
  for (const auto& r : rows) {
    out << csv::quote(r.variant);
    for (const auto& n : names) {
      auto it = r.metrics.find(n);
      if (it == r.metrics.end()) {
        out << ",,";
      } else {
        out << "," << it->second.mean << "," << it->second.std;
      }
    }
    out << "\n";
  }
  return out.str();
}

FeatureStore open_or_create(const fs::path& dir, StoreKind kind, std::size_t dim,
                            const nlohmann::json& fp, bool resume) {
  if (resume && FeatureStore::exists(dir, kind)) {
    auto store = FeatureStore::open(dir, kind, std::optional<nlohmann::json>(fp), /*repair=*/true);
    log::info("store_resumed", {{"kind", store_kind_name(kind)}, {"entries", store.size()}});
    return store;
  }
  return FeatureStore::create(dir, kind, dim, fp);
}

std::string missing_stage_hint(StoreKind kind) {
  return kind == StoreKind::kRecent ? "run `dygrasp reason recent` first"
                                    : "run `dygrasp reason global` first";
}

FeatureStore open_for_model(const RunConfig& cfg, StoreKind kind, const nlohmann::json& fp) {
  try {
    return FeatureStore::open(cfg.cache_dir, kind, std::optional<nlohmann::json>(fp));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kMissingCache || e.kind() == ErrorKind::kStaleCache) {
      throw Error(e.kind(), std::string(e.what()) + "; " + missing_stage_hint(kind));
    }
    throw;
  }
}

}  // namespace

void RunConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::kInvalidConfig, m); };
  if (c < 2 || c % 2 != 0) bad("c must be an even number >= 2");
  if (s < 1) bad("s must be >= 1");
  if (workers < 1) bad("workers must be >= 1");
  backend.validate();
  encoder.validate();
  model.validate();
  train.validate();
  eval.validate();
}

fs::path RunConfig::trace_path() const {
  return trace.empty() ? dataset / "trace.json" : trace;
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j = {
      {"dataset", cfg.dataset.string()},
      {"cache_dir", cfg.cache_dir.string()},
      {"backend", to_json(cfg.backend)},
      {"encoder", to_json(cfg.encoder)},
      {"c", cfg.c},
      {"s", cfg.s},
      {"segmenting", segmenting_name(cfg.segmenting)},
      {"model", to_json(cfg.model)},
      {"train", to_json(cfg.train)},
      {"eval", to_json(cfg.eval)},
      {"seed", cfg.seed},
      {"workers", cfg.workers},
  };
  if (!cfg.trace.empty()) j["trace"] = cfg.trace.string();
  if (!cfg.recent_template.empty()) j["recent_template"] = cfg.recent_template.string();
  if (!cfg.global_template.empty()) j["global_template"] = cfg.global_template.string();
  // The key is a credential and never leaves the process.
  j["backend"].erase("api_key");
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base) {
  check_fields(j, {"dataset", "trace", "cache_dir", "backend", "encoder", "c", "s",
                   "segmenting", "recent_template", "global_template", "model", "train",
                   "eval", "seed", "workers"});
  RunConfig cfg;
  try {
    cfg.dataset = resolve_path(j, "dataset", base);
    cfg.trace = resolve_path(j, "trace", base);
    if (j.contains("cache_dir")) cfg.cache_dir = resolve_path(j, "cache_dir", base);
    cfg.recent_template = resolve_path(j, "recent_template", base);
    cfg.global_template = resolve_path(j, "global_template", base);
    if (j.contains("backend")) cfg.backend = backend_config_from_json(j.at("backend"));
    if (j.contains("encoder")) cfg.encoder = encoder_config_from_json(j.at("encoder"));
    cfg.c = j.value("c", cfg.c);
    cfg.s = j.value("s", cfg.s);
    if (j.contains("segmenting")) {
      cfg.segmenting = parse_segmenting(j.at("segmenting").get<std::string>());
    }
    if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    if (j.contains("eval")) cfg.eval = eval_config_from_json(j.at("eval"));
    cfg.seed = j.value("seed", cfg.seed);
    cfg.workers = j.value("workers", cfg.workers);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("run config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  require_file(path, "config");
  return run_config_from_json(read_json_file(path), path.parent_path());
}

RunConfig resolve(RunConfig cfg) {
  cfg.backend.seed = cfg.seed;
  cfg.encoder.seed = cfg.seed;
  cfg.model.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.eval.seed = cfg.seed;
  cfg.eval.workers = cfg.workers;
  return cfg;
}

std::unique_ptr<LlmBackend> make_backend(const RunConfig& cfg) {
  if (cfg.backend.kind == BackendKind::kOracle) {
    const fs::path trace = cfg.trace_path();
    require_file(trace, "oracle trace");
    return std::make_unique<OracleBackend>(cfg.backend, SynthTrace::load(trace));
  }
  return make_basic_backend(cfg.backend);
}

DyTAG load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) fail(ErrorKind::kInvalidConfig, "no dataset directory configured");
  return load_dytag_dir(cfg.dataset);
}

PromptTemplate recent_template(const RunConfig& cfg) {
  return cfg.recent_template.empty() ? PromptTemplate::default_recent()
                                     : PromptTemplate::load(cfg.recent_template);
}

PromptTemplate global_template(const RunConfig& cfg) {
  return cfg.global_template.empty() ? PromptTemplate::default_global()
                                     : PromptTemplate::load(cfg.global_template);
}

nlohmann::json run_record(const RunConfig& cfg, std::string_view command, nlohmann::json extra) {
  nlohmann::json j = {
      {"command", command},
      {"config", to_json(cfg)},
      {"versions",
       {{"dygrasp", kVersion},
        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                      "." + std::to_string(EIGEN_MINOR_VERSION)},
        {"compiler", __VERSION__}}},
      {"seeds",
       {{"run", cfg.seed},
        {"backend", cfg.backend.seed},
        {"encoder", cfg.encoder.seed},
        {"model", cfg.model.seed},
        {"train", cfg.train.seed},
        {"eval", cfg.eval.seed}}},
  };
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

void record_run(const fs::path& dir, const RunConfig& cfg, std::string_view command,
                nlohmann::json extra) {
  const fs::path path = dir / "run.json";
  nlohmann::json rec = nlohmann::json::object();
  if (fs::exists(path)) {
    try {
      rec = read_json_file(path);
    } catch (const Error&) {
      rec = nlohmann::json::object();
    }
  }
  if (!rec.is_object()) rec = nlohmann::json::object();
  rec[std::string(command)] = run_record(cfg, command, std::move(extra));
  write_json_file(path, rec);
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kInvalidArgument, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
}

RecentStageSummary reason_recent(const RunConfig& cfg_in, const StageControl& control) {
  const RunConfig cfg = resolve(cfg_in);
  const DyTAG g = load_dataset(cfg);
  const auto backend = make_backend(cfg);
  const auto tmpl = recent_template(cfg);
  const auto batches = build_all_batches(g, cfg.c);
  auto store = open_or_create(cfg.cache_dir, StoreKind::kRecent, backend->hidden_dim(),
                              recent_fingerprint(*backend, tmpl, cfg.c), control.resume);
  ExtractOptions opt;
  opt.workers = cfg.workers;
  opt.cancel = control.cancel;
  const auto features = extract_recent_features(batches, *backend, g, tmpl, &store, opt);
  store.finalize();
  RecentStageSummary summary{batches.size(), store.size()};
  record_run(cfg.cache_dir, cfg, "reason recent",
             {{"batches", summary.batches}, {"features", summary.features}});
  log::info("recent_stage_done", {{"batches", summary.batches}, {"features", summary.features}});
  return summary;
}

GlobalStageResult reason_global(const RunConfig& cfg_in, const StageControl& control) {
  const RunConfig cfg = resolve(cfg_in);
  const DyTAG g = load_dataset(cfg);
  const auto backend = make_backend(cfg);
  const auto encoder = make_encoder(cfg.encoder);
  const auto tmpl = global_template(cfg);
  auto desc = open_or_create(cfg.cache_dir, StoreKind::kDescriptions, 0,
                             description_fingerprint(*backend, tmpl, cfg.s, cfg.segmenting),
                             control.resume);
  auto global = open_or_create(cfg.cache_dir, StoreKind::kGlobal, encoder->dim(),
                               global_fingerprint(*backend, *encoder, tmpl, cfg.s, cfg.segmenting),
                               control.resume);
  GlobalStageOptions opt;
  opt.s = cfg.s;
  opt.segmenting = cfg.segmenting;
  opt.workers = cfg.workers;
  opt.stop_after_calls = control.stop_after_calls;
  opt.cancel = control.cancel;
  const auto result = run_global_stage(g, *backend, *encoder, tmpl, desc, global, opt);
  record_run(cfg.cache_dir, cfg, "reason global",
             {{"nodes", result.nodes},
              {"llm_calls", result.llm_calls},
              {"reused_nodes", result.reused_nodes}});
  return result;
}

TokenReport count_tokens(const RunConfig& cfg, TokenMode mode) {
  const DyTAG g = load_dataset(cfg);
  return token_report(g, cfg.c, recent_template(cfg), mode);
}

LoadedInputs load_inputs(const RunConfig& cfg_in, bool need_recent, bool need_global) {
  const RunConfig cfg = resolve(cfg_in);
  LoadedInputs in;
  in.graph = load_dataset(cfg);
  in.split = temporal_split(in.graph);
  in.encoder = make_encoder(cfg.encoder);
  if (need_recent || need_global) {
    const auto backend = make_backend(cfg);
    if (need_recent) {
      in.recent = open_for_model(cfg, StoreKind::kRecent,
                                 recent_fingerprint(*backend, recent_template(cfg), cfg.c));
    }
    if (need_global) {
      in.global = open_for_model(
          cfg, StoreKind::kGlobal,
          global_fingerprint(*backend, *in.encoder, global_template(cfg), cfg.s, cfg.segmenting));
    }
  }
  return in;
}

ModelConfig resolve_model_config(const RunConfig& cfg, const LoadedInputs& in) {
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  mc.d_llm = in.recent ? in.recent->dim() : cfg.backend.d_llm;
  mc.d_bert = in.encoder->dim();
  if (!(mc.time_scale > 0.0)) mc.time_scale = auto_time_scale(in.graph, in.split);
  return mc;
}

TrainOutcome train_stage(const RunConfig& cfg_in, const fs::path& checkpoint) {
  const RunConfig cfg = resolve(cfg_in);
  auto in = load_inputs(cfg, cfg.model.use_recent, cfg.model.use_global);
  const auto mc = resolve_model_config(cfg, in);
  const auto inputs = ModelInputs::build(in.graph, in.recent ? &*in.recent : nullptr,
                                         in.global ? &*in.global : nullptr, *in.encoder, cfg.s,
                                         cfg.segmenting);
  DyGraspModel model(mc);
  TrainOutcome out;
  out.result = train(model, inputs, in.split, cfg.train);
  out.checkpoint = checkpoint;
  model.save(checkpoint);
  const fs::path dir = checkpoint.has_parent_path() ? checkpoint.parent_path() : fs::path(".");
  write_text_atomic(dir / "history.csv", out.result.history_csv());
  write_json_file(dir / "train.json", out.result.to_json());
  record_run(dir, cfg, "train",
             {{"model_resolved", to_json(mc)}, {"checkpoint", checkpoint.filename().string()}});
  return out;
}

EvalTask parse_task(std::string_view name) {
  if (name == "retrieval") return EvalTask::kRetrieval;
  if (name == "linkpred") return EvalTask::kLinkPred;
  fail(ErrorKind::kInvalidArgument, "unknown task `" + std::string(name) + "`");
}

std::string_view task_name(EvalTask task) {
  return task == EvalTask::kRetrieval ? "retrieval" : "linkpred";
}

nlohmann::json eval_stage(const RunConfig& cfg_in, const fs::path& checkpoint, EvalTask task) {
  const RunConfig cfg = resolve(cfg_in);
  require_file(checkpoint, "checkpoint");
  auto model = DyGraspModel::load(checkpoint);
  const auto& mc = model.config();
  auto in = load_inputs(cfg, mc.use_recent, mc.use_global);
  const auto inputs = ModelInputs::build(in.graph, in.recent ? &*in.recent : nullptr,
                                         in.global ? &*in.global : nullptr, *in.encoder, cfg.s,
                                         cfg.segmenting);
  const auto filter = setting_filter(in.graph, in.split, cfg.eval.setting);
  const std::set<InteractionId>* restrict_to = filter ? &*filter : nullptr;
  nlohmann::json metrics = {{"task", task_name(task)},
                            {"setting", setting_name(cfg.eval.setting)}};
  if (task == EvalTask::kLinkPred) {
    const auto r = eval_linkpred(model, inputs, in.split.test, restrict_to, cfg.eval);
    metrics["AP"] = r.ap;
    metrics["AUC"] = r.auc;
    metrics["num_positives"] = r.num_positives;
  } else {
    const auto r = eval_retrieval(model, inputs, in.split.test, restrict_to, cfg.eval);
    for (const auto& [k, h] : r.hit) metrics["Hit@" + std::to_string(k)] = h;
    metrics["num_queries"] = r.num_queries;
  }
  return metrics;
}

std::vector<AblationRow> ablate_stage(const RunConfig& cfg_in, const std::vector<std::uint64_t>& seeds,
                                      const fs::path& out_dir) {
  const RunConfig cfg = resolve(cfg_in);
  auto in = load_inputs(cfg, true, true);
  const auto mc = resolve_model_config(cfg, in);
  AblationInputs ai{&in.graph, &*in.recent, &*in.global, in.encoder.get(), cfg.s, cfg.segmenting};
  auto rows = ablate(ai, in.split, mc, cfg.train, cfg.eval, seeds);
  write_json_file(out_dir / "ablation.json", metrics_json(rows));
  write_text_atomic(out_dir / "ablation.csv", ablation_csv(rows));
  record_run(out_dir, cfg, "ablate", {{"seeds", seeds}});
  return rows;
}

SweepParam parse_sweep_param(std::string_view name) {
  if (name == "c") return SweepParam::kWindow;
  if (name == "s") return SweepParam::kSegments;
  fail(ErrorKind::kInvalidArgument, "sweep param must be c or s, got `" + std::string(name) + "`");
}

std::vector<SweepPoint> sweep_stage(const RunConfig& cfg_in, SweepParam param,
                                    const std::vector<std::size_t>& values,
                                    const fs::path& out_dir) {
  if (values.empty()) fail(ErrorKind::kInvalidArgument, "sweep needs at least one value");
  const RunConfig base = resolve(cfg_in);
  const char* name = param == SweepParam::kWindow ? "c" : "s";
  std::vector<SweepPoint> points;
  for (std::size_t value : values) {
    RunConfig cfg = base;
    cfg.cache_dir = out_dir / (std::string(name) + "=" + std::to_string(value));
    if (param == SweepParam::kWindow) {
      cfg.c = value;
    } else {
      cfg.s = value;
    }
    cfg.validate();
    SweepPoint point;
    point.value = value;
    if (cfg.model.use_recent) reason_recent(cfg);
    if (cfg.model.use_global) reason_global(cfg);
    if (param == SweepParam::kWindow && cfg.backend.kind == BackendKind::kOracle) {
      const auto backend = make_backend(cfg);
      const auto& oracle = dynamic_cast<const OracleBackend&>(*backend);
      const DyTAG g = load_dataset(cfg);
      point.unresolved =
          count_unresolved_targets(build_all_batches(g, cfg.c), g, recent_template(cfg), oracle);
    }
    const fs::path ckpt = cfg.cache_dir / "model.ckpt";
    train_stage(cfg, ckpt);
    point.metrics = eval_stage(cfg, ckpt, EvalTask::kRetrieval);
    const auto lp = eval_stage(cfg, ckpt, EvalTask::kLinkPred);
    point.metrics["AP"] = lp.at("AP");
    point.metrics["AUC"] = lp.at("AUC");
    log::info("sweep_point", {{"param", name}, {"value", value}, {"metrics", point.metrics}});
    points.push_back(std::move(point));
  }
  nlohmann::json j = nlohmann::json::array();
  std::ostringstream csv;
  csv.precision(17);
  csv << name << ",AP,AUC";
  for (auto k : base.eval.ks) csv << ",Hit@" << k;
  csv << ",unresolved\n";
  for (const auto& p : points) {
    j.push_back({{name, p.value}, {"metrics", p.metrics}, {"unresolved", p.unresolved}});
    csv << p.value << "," << p.metrics.at("AP").get<double>() << ","
        << p.metrics.at("AUC").get<double>();
    for (auto k : base.eval.ks) csv << "," << p.metrics.at("Hit@" + std::to_string(k)).get<double>();
    csv << "," << p.unresolved << "\n";
  }
  write_json_file(out_dir / "sweep.json", j);
  write_text_atomic(out_dir / "sweep.csv", csv.str());
  record_run(out_dir, base, "sweep", {{"param", name}, {"values", values}});
  return points;
}

}  // namespace dygrasp
