#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/pipeline.hpp"
#include "dygrasp/synthgen.hpp"

namespace fs = std::filesystem;
using namespace dygrasp;

namespace {

std::atomic<bool> g_cancel{false};

extern "C" void on_sigint(int) { g_cancel.store(true); }

void print_error(std::string_view kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump()
            << std::endl;
}

void emit_result(const nlohmann::json& j, const std::string& out_file) {
  if (out_file.empty()) {
    std::cout << j.dump(2) << std::endl;
  } else {
    write_json_file(out_file, j);
  }
}

std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) {
      fail(ErrorKind::kInvalidArgument, std::string("bad ") + what + " list `" + text + "`");
    }
    out.push_back(static_cast<std::size_t>(v));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

// Flags shared by the stage commands. Each overrides the config file when given.
struct Common {
  std::string config;
  std::string data;
  std::string trace;
  std::string cache;
  std::string backend;
  std::string endpoint;
  std::size_t workers = 0;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> d_llm;

  void add_to(CLI::App* app, bool with_cache_flag) {
    app->add_option("--config", config, "run config JSON");
    app->add_option("--data", data, "dataset directory (edges.csv, node_text.csv, edge_text.csv)");
    app->add_option("--trace", trace, "oracle trace (default <data>/trace.json)");
    if (with_cache_flag) app->add_option("--caches", cache, "feature cache directory");
    app->add_option("--backend", backend, "mock, oracle or remote")
        ->check(CLI::IsMember({"mock", "oracle", "remote"}));
    app->add_option("--endpoint", endpoint, "remote backend base URL");
    app->add_option("--d-llm", d_llm, "hidden size of the mock/oracle backend");
    app->add_option("--workers", workers, "LLM dispatch pool size")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed, "run seed");
  }

  RunConfig load() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    if (!data.empty()) cfg.dataset = data;
    if (!trace.empty()) cfg.trace = trace;
    if (!cache.empty()) cfg.cache_dir = cache;
    if (!backend.empty()) cfg.backend.kind = parse_backend_kind(backend);
    if (!endpoint.empty()) cfg.backend.endpoint = endpoint;
    if (d_llm) cfg.backend.d_llm = *d_llm;
    if (workers > 0) cfg.workers = workers;
    if (seed) cfg.seed = *seed;
    if (cfg.backend.api_key.empty()) {
      if (const char* key = std::getenv("DYGRASP_API_KEY")) cfg.backend.api_key = key;
    }
    return cfg;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"dygrasp: language-model reasoning features for dynamic text-attributed graphs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  // synth
  auto* synth = app.add_subcommand("synth", "generate a planted synthetic dataset");
  std::string synth_config;
  std::string synth_out;
  std::optional<std::size_t> synth_edges;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--config", synth_config, "synthetic generator config JSON");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--edges", synth_edges, "number of interactions");
  synth->add_option("--seed", synth_seed, "generator seed");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "validate a dataset and write it in canonical form");
  std::string ingest_in;
  std::string ingest_out;
  bool allow_self_loops = false;
  ingest->add_option("--in", ingest_in, "directory with the three CSV files")->required();
  ingest->add_option("--out", ingest_out, "canonical output directory");
  ingest->add_flag("--allow-self-loops", allow_self_loops);

  // reason recent / global
  auto* reason = app.add_subcommand("reason", "run an LLM reasoning stage");
  reason->require_subcommand(1);
  auto* recent = reason->add_subcommand("recent", "hidden-state features per interaction");
  Common recent_common;
  recent_common.add_to(recent, false);
  std::optional<std::size_t> window;
  std::string recent_template_path;
  std::string recent_out;
  bool recent_resume = false;
  recent->add_option("--window", window, "sliding window length c (even)");
  recent->add_option("--template", recent_template_path, "prompt template file");
  recent->add_option("--out", recent_out, "cache directory");
  recent->add_flag("--resume", recent_resume, "extend an existing cache instead of replacing it");

  auto* global = reason->add_subcommand("global", "chained period descriptions per node");
  Common global_common;
  global_common.add_to(global, false);
  std::optional<std::size_t> segments;
  std::string segmenting;
  std::string global_template_path;
  std::string global_out;
  bool global_resume = false;
  std::optional<std::size_t> stop_after_calls;
  global->add_option("--segments", segments, "number of periods s");
  global->add_option("--segmenting", segmenting, "count or time")
      ->check(CLI::IsMember({"count", "time"}));
  global->add_option("--template", global_template_path, "prompt template file");
  global->add_option("--out", global_out, "cache directory");
  global->add_flag("--resume", global_resume, "continue from persisted prefixes");
  global->add_option("--stop-after-calls", stop_after_calls)->group("");

  // tokens
  auto* tokens = app.add_subcommand("tokens", "count prompt tokens without calling an LLM");
  Common tokens_common;
  tokens_common.add_to(tokens, false);
  std::string token_mode = "node-centric";
  std::optional<std::size_t> token_window;
  std::string token_template;
  std::string token_out;
  tokens->add_option("--mode", token_mode)->check(CLI::IsMember({"node-centric", "edge-centric"}));
  tokens->add_option("--window", token_window, "sliding window length c");
  tokens->add_option("--template", token_template, "recent prompt template file");
  tokens->add_option("--out", token_out, "write the report here instead of stdout");

  // train
  auto* train_cmd = app.add_subcommand("train", "train the integration model");
  Common train_common;
  train_common.add_to(train_cmd, true);
  std::string ckpt_out;
  std::optional<std::size_t> epochs;
  train_cmd->add_option("--out", ckpt_out, "checkpoint path")->required();
  train_cmd->add_option("--epochs", epochs, "maximum epochs");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test range");
  Common eval_common;
  eval_common.add_to(eval_cmd, true);
  std::string task = "retrieval";
  std::string setting;
  std::string ks;
  std::string candidates;
  std::string ckpt_in;
  std::string eval_out;
  std::optional<std::size_t> max_queries;
  eval_cmd->add_option("--task", task)->check(CLI::IsMember({"retrieval", "linkpred"}));
  eval_cmd->add_option("--setting", setting)->check(CLI::IsMember({"transductive", "inductive"}));
  eval_cmd->add_option("--k", ks, "comma-separated cutoffs, e.g. 1,3,10");
  eval_cmd->add_option("--candidates", candidates, "number of sampled negatives, or `all`");
  eval_cmd->add_option("--ckpt", ckpt_in, "checkpoint")->required();
  eval_cmd->add_option("--out", eval_out, "metrics JSON path (default stdout)");
  eval_cmd->add_option("--max-queries", max_queries, "evaluate an evenly spaced subset");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "full, -Recent, -Global and -Recent&-Global");
  Common ablate_common;
  ablate_common.add_to(ablate_cmd, true);
  std::string seeds_text;
  std::string ablate_out;
  ablate_cmd->add_option("--seeds", seeds_text, "comma-separated seeds (default: the run seed)");
  ablate_cmd->add_option("--out", ablate_out, "output directory")->required();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "sensitivity to the window c or segments s");
  Common sweep_common;
  sweep_common.add_to(sweep_cmd, false);
  std::string sweep_param;
  std::string sweep_values;
  std::string sweep_out;
  sweep_cmd->add_option("--param", sweep_param)->required()->check(CLI::IsMember({"c", "s"}));
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep_cmd->add_option("--out", sweep_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const int code = exit_code(ErrorKind::kInvalidArgument);
    print_error(kind_name(ErrorKind::kInvalidArgument), e.what(), code);
    return code;
  }

  if (log_level == "debug") log::set_level(log::Level::kDebug);
  if (log_level == "info") log::set_level(log::Level::kInfo);
  if (log_level == "warn") log::set_level(log::Level::kWarn);
  if (log_level == "error") log::set_level(log::Level::kError);
  std::signal(SIGINT, on_sigint);
  std::signal(SIGTERM, on_sigint);

  if (synth->parsed()) {
    SynthConfig sc;
    if (!synth_config.empty()) sc = synth_config_from_json(read_json_file(synth_config));
    if (synth_edges) sc.num_edges = *synth_edges;
    if (synth_seed) sc.seed = *synth_seed;
    sc.validate();
    const auto data = generate_synthetic(sc);
    save_synthetic(data, synth_out);
    write_json_file(fs::path(synth_out) / "run.json",
                    {{"synth",
                      {{"command", "synth"},
                       {"config", to_json(sc)},
                       {"versions", {{"dygrasp", kVersion}}},
                       {"seeds", {{"run", sc.seed}}}}}});
    emit_result({{"out", synth_out},
                 {"interactions", data.graph.num_interactions()},
                 {"nodes", data.graph.num_nodes()}},
                "");
    return 0;
  }

  if (ingest->parsed()) {
    LoadOptions opt;
    opt.allow_self_loops = allow_self_loops;
    const DyTAG g = load_dytag_dir(ingest_in, opt);
    const Split split = temporal_split(g);
    nlohmann::json summary = {{"nodes", g.num_nodes()},
                              {"interactions", g.num_interactions()},
                              {"bipartite", g.is_bipartite()},
                              {"time_range", {g.time_range().first, g.time_range().second}},
                              {"split",
                               {{"train", split.train.size()},
                                {"val", split.val.size()},
                                {"test", split.test.size()}}},
                              {"inductive_test", inductive_mask(g, split).size()}};
    if (!ingest_out.empty()) {
      save_dytag(g, ingest_out);
      write_json_file(fs::path(ingest_out) / "run.json",
                      {{"ingest",
                        {{"command", "ingest"},
                         {"input", ingest_in},
                         {"versions", {{"dygrasp", kVersion}}},
                         {"summary", summary}}}});
    }
    emit_result(summary, "");
    return 0;
  }

  if (recent->parsed()) {
    RunConfig cfg = recent_common.load();
    if (window) cfg.c = *window;
    if (!recent_template_path.empty()) cfg.recent_template = recent_template_path;
    if (!recent_out.empty()) cfg.cache_dir = recent_out;
    cfg.validate();
    StageControl control;
    control.resume = recent_resume;
    control.cancel = &g_cancel;
    const auto r = reason_recent(cfg, control);
    emit_result({{"batches", r.batches}, {"features", r.features}, {"cache", cfg.cache_dir.string()}},
                "");
    return 0;
  }

  if (global->parsed()) {
    RunConfig cfg = global_common.load();
    if (segments) cfg.s = *segments;
    if (!segmenting.empty()) cfg.segmenting = parse_segmenting(segmenting);
    if (!global_template_path.empty()) cfg.global_template = global_template_path;
    if (!global_out.empty()) cfg.cache_dir = global_out;
    cfg.validate();
    StageControl control;
    control.resume = global_resume;
    control.stop_after_calls = stop_after_calls;
    control.cancel = &g_cancel;
    const auto r = reason_global(cfg, control);
    emit_result({{"nodes", r.nodes},
                 {"llm_calls", r.llm_calls},
                 {"reused_nodes", r.reused_nodes},
                 {"cache", cfg.cache_dir.string()}},
                "");
    return 0;
  }

  if (tokens->parsed()) {
    RunConfig cfg = tokens_common.load();
    if (token_window) cfg.c = *token_window;
    if (!token_template.empty()) cfg.recent_template = token_template;
    cfg.validate();
    const auto mode = token_mode == "edge-centric" ? TokenMode::kEdgeCentric : TokenMode::kNodeCentric;
    emit_result(count_tokens(cfg, mode).to_json(), token_out);
    return 0;
  }

  if (train_cmd->parsed()) {
    RunConfig cfg = train_common.load();
    if (epochs) cfg.train.max_epochs = *epochs;
    cfg.validate();
    const auto out = train_stage(cfg, ckpt_out);
    emit_result({{"checkpoint", out.checkpoint.string()},
                 {"best_epoch", out.result.best_epoch},
                 {"best_val_ap", out.result.best_val_ap},
                 {"epochs", out.result.history.size()}},
                "");
    return 0;
  }

  if (eval_cmd->parsed()) {
    RunConfig cfg = eval_common.load();
    if (!setting.empty()) cfg.eval.setting = parse_setting(setting);
    if (!ks.empty()) cfg.eval.ks = parse_list(ks, "k");
    if (!candidates.empty()) {
      if (candidates == "all") {
        cfg.eval.all_candidates = true;
      } else {
        cfg.eval.num_candidates = parse_list(candidates, "candidates").at(0);
        cfg.eval.all_candidates = false;
      }
    }
    if (max_queries) cfg.eval.max_queries = *max_queries;
    cfg.validate();
    const auto metrics = eval_stage(cfg, ckpt_in, parse_task(task));
    emit_result(metrics, eval_out);
    const fs::path dir = eval_out.empty() ? fs::path(ckpt_in).parent_path() : fs::path(eval_out).parent_path();
    record_run(dir.empty() ? fs::path(".") : dir, cfg, "eval " + task,
               {{"checkpoint", fs::path(ckpt_in).filename().string()}, {"metrics", metrics}});
    return 0;
  }

  if (ablate_cmd->parsed()) {
    RunConfig cfg = ablate_common.load();
    cfg.validate();
    std::vector<std::uint64_t> seeds;
    if (seeds_text.empty()) {
      seeds.push_back(cfg.seed);
    } else {
      for (auto v : parse_list(seeds_text, "seed")) seeds.push_back(v);
    }
    const auto rows = ablate_stage(cfg, seeds, ablate_out);
    emit_result(to_json(rows), "");
    return 0;
  }

  if (sweep_cmd->parsed()) {
    RunConfig cfg = sweep_common.load();
    cfg.validate();
    const auto points =
        sweep_stage(cfg, parse_sweep_param(sweep_param), parse_list(sweep_values, "value"), sweep_out);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : points) {
      j.push_back({{sweep_param, p.value}, {"metrics", p.metrics}, {"unresolved", p.unresolved}});
    }
    emit_result(j, "");
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    print_error(kind_name(e.kind()), e.what(), code);
    return code;
  } catch (const fs::filesystem_error& e) {
    const int code = exit_code(ErrorKind::kInvalidArgument);
    print_error(kind_name(ErrorKind::kInvalidArgument), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    print_error("internal", e.what(), 1);
    return 1;
  }
}
