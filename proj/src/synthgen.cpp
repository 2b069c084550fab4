#include "dygrasp/synthgen.hpp"

#include <fstream>
#include <random>
#include <set>
#include <regex>

#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"
#include "dygrasp/tokenizer.hpp"

namespace dygrasp {
namespace {

const std::vector<std::string>& category_vocabulary() {
  static const std::vector<std::string> words = {
      "books",  "coffee", "garden", "music",  "sports", "games",
      "tools",  "toys",   "shoes",  "paint",  "camera", "cheese"};
  return words;
}

const std::vector<std::string>& interest_vocabulary() {
  static const std::vector<std::string> words = {"alpha", "beta",  "gamma", "delta",
                                                 "omega", "sigma", "kappa", "theta"};
  return words;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Eigen::VectorXd keyed_unit(std::uint64_t seed, std::string_view tag, std::size_t k,
                           std::size_t dim) {
  return prefix_vector(hash_combine(hash_combine(seed, fnv1a64(tag)), k), dim);
}

}  // namespace

void SynthConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorKind::kInvalidConfig, msg); };
  if (num_users == 0 || num_items == 0 || num_edges == 0) {
    bad("synthetic sizes must be positive");
  }
  if (num_edges < num_users) bad("num_edges must be >= num_users");
  if (num_interests < 2) bad("num_interests must be >= 2");
  if (num_categories < 1) bad("num_categories must be >= 1");
  if (num_items < num_interests * num_categories) {
    bad("num_items must cover every (interest, category) pool");
  }
  if (ambiguity_rate < 0.0 || ambiguity_rate > 1.0) bad("ambiguity_rate must be in [0,1]");
  if (category_stickiness < 0.0 || category_stickiness > 1.0) {
    bad("category_stickiness must be in [0,1]");
  }
  if (dependency_distance < 1) bad("dependency_distance must be >= 1");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"num_users", c.num_users},
          {"num_items", c.num_items},
          {"num_edges", c.num_edges},
          {"num_interests", c.num_interests},
          {"num_categories", c.num_categories},
          {"drift_period", c.drift_period},
          {"ambiguity_rate", c.ambiguity_rate},
          {"dependency_distance", c.dependency_distance},
          {"category_stickiness", c.category_stickiness},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> known = {
        "num_users",      "num_items",           "num_edges",           "num_interests",
        "num_categories", "drift_period",        "ambiguity_rate",      "dependency_distance",
        "category_stickiness", "seed"};
    if (!known.contains(it.key())) {
      fail(ErrorKind::kInvalidConfig, "unknown synth config field `" + it.key() + "`");
    }
  }
  c.num_users = j.value("num_users", c.num_users);
  c.num_items = j.value("num_items", c.num_items);
  c.num_edges = j.value("num_edges", c.num_edges);
  c.num_interests = j.value("num_interests", c.num_interests);
  c.num_categories = j.value("num_categories", c.num_categories);
  c.drift_period = j.value("drift_period", c.drift_period);
  c.ambiguity_rate = j.value("ambiguity_rate", c.ambiguity_rate);
  c.dependency_distance = j.value("dependency_distance", c.dependency_distance);
  c.category_stickiness = j.value("category_stickiness", c.category_stickiness);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json SynthTrace::to_json() const {
  nlohmann::json events_json = nlohmann::json::array();
  for (const auto& e : events) {
    events_json.push_back({e.user, e.item, e.interest, e.category, e.ambiguous ? 1 : 0,
                           e.user_position});
  }
  return {{"config", dygrasp::to_json(config)},
          {"category_words", category_words},
          {"interest_labels", interest_labels},
          {"ambiguous_word", ambiguous_word},
          {"item_interest", item_interest},
          {"item_category", item_category},
          {"events_columns",
           {"user", "item", "interest", "category", "ambiguous", "user_position"}},
          {"events", events_json}};
}

SynthTrace SynthTrace::from_json(const nlohmann::json& j) {
  SynthTrace t;
  try {
    t.config = synth_config_from_json(j.at("config"));
    t.category_words = j.at("category_words").get<std::vector<std::string>>();
    t.interest_labels = j.at("interest_labels").get<std::vector<std::string>>();
    t.ambiguous_word = j.at("ambiguous_word").get<std::string>();
    t.item_interest = j.at("item_interest").get<std::vector<std::size_t>>();
    t.item_category = j.at("item_category").get<std::vector<std::size_t>>();
    for (const auto& row : j.at("events")) {
      SynthEvent e;
      e.user = row.at(0).get<NodeId>();
      e.item = row.at(1).get<NodeId>();
      e.interest = row.at(2).get<std::size_t>();
      e.category = row.at(3).get<std::size_t>();
      e.ambiguous = row.at(4).get<int>() != 0;
      e.user_position = row.at(5).get<std::size_t>();
      t.events.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("malformed trace: ") + e.what());
  }
  return t;
}

void SynthTrace::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

SynthTrace SynthTrace::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read trace " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, path.string() + ": " + e.what());
  }
  return from_json(j);
}

SynthData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(hash_combine(cfg.seed, 0x5e7a11ULL));
  SynthTrace trace;
  trace.config = cfg;
  const auto& cats = category_vocabulary();
  const auto& labels = interest_vocabulary();
  for (std::size_t k = 0; k < cfg.num_categories; ++k) {
    trace.category_words.push_back(k < cats.size() ? cats[k] : "category" + std::to_string(k));
  }
  for (std::size_t k = 0; k < cfg.num_interests; ++k) {
    trace.interest_labels.push_back(k < labels.size() ? labels[k]
                                                      : "interest" + std::to_string(k));
  }
  trace.ambiguous_word = "notebook";

  const std::size_t K = cfg.num_interests;
  const std::size_t C = cfg.num_categories;
  std::vector<std::vector<std::vector<std::size_t>>> pools(K, std::vector<std::vector<std::size_t>>(C));
  for (std::size_t k = 0; k < cfg.num_items; ++k) {
    trace.item_interest.push_back(k % K);
    trace.item_category.push_back((k / K) % C);
    pools[k % K][(k / K) % C].push_back(k);
  }

  struct UserState {
    std::size_t interest = 0;
    std::size_t offset = 0;
    std::vector<std::size_t> categories;
  };
  std::vector<UserState> users(cfg.num_users);
  for (auto& u : users) {
    u.interest = uniform_index(rng, K);
    u.offset = cfg.drift_period > 0 ? uniform_index(rng, cfg.drift_period) : 0;
  }

  std::map<NodeId, std::string> node_texts;
  for (std::size_t u = 0; u < cfg.num_users; ++u) node_texts[u] = "";
  for (std::size_t k = 0; k < cfg.num_items; ++k) node_texts[trace.item_id(k)] = "";
  std::map<TextId, std::string> edge_texts;
  edge_texts[0] = "buy " + trace.ambiguous_word;
  for (std::size_t k = 0; k < C; ++k) edge_texts[k + 1] = "buy " + trace.category_words[k];

  std::vector<EdgeRow> rows;
  rows.reserve(cfg.num_edges);
  for (std::size_t e = 0; e < cfg.num_edges; ++e) {
    const std::size_t u = uniform_index(rng, cfg.num_users);
    auto& st = users[u];
    const std::size_t n = st.categories.size();
    if (cfg.drift_period > 0 && n > 0 && (n + st.offset) % cfg.drift_period == 0) {
      st.interest = (st.interest + 1 + uniform_index(rng, K - 1)) % K;
    }
    SynthEvent ev;
    ev.user = u;
    ev.interest = st.interest;
    ev.user_position = n;
    const double draw_amb = uniform01(rng);
    const double draw_stick = uniform01(rng);
    const std::size_t draw_cat = uniform_index(rng, C);
    if (n >= cfg.dependency_distance && draw_amb < cfg.ambiguity_rate) {
      ev.ambiguous = true;
      ev.category = st.categories[n - cfg.dependency_distance];
    } else if (n > 0 && draw_stick < cfg.category_stickiness) {
      ev.category = st.categories.back();
    } else {
      ev.category = draw_cat;
    }
    st.categories.push_back(ev.category);
    const auto& pool = pools[ev.interest][ev.category];
    ev.item = trace.item_id(pool[uniform_index(rng, pool.size())]);
    rows.push_back({ev.user, ev.item, ev.ambiguous ? 0 : ev.category + 1,
                    static_cast<double>(e)});
    trace.events.push_back(ev);
  }
  SynthData data{DyTAG::build(std::move(node_texts), std::move(edge_texts), std::move(rows)),
                 std::move(trace)};
  return data;
}

void save_synthetic(const SynthData& data, const std::filesystem::path& dir) {
  save_dytag(data.graph, dir);
  data.trace.save(dir / "trace.json");
}

OracleBackend::OracleBackend(BackendConfig cfg, SynthTrace trace)
    : cfg_(std::move(cfg)), trace_(std::move(trace)) {
  cfg_.kind = BackendKind::kOracle;
  cfg_.validate();
  ambiguous_token_ = token_id(trace_.ambiguous_word);
  destination_token_ = token_id("destination");
  const std::uint64_t seed = splitmix64(cfg_.seed ^ 0x0c0ffee0ULL);
  for (std::size_t k = 0; k < trace_.category_words.size(); ++k) {
    category_tokens_.push_back(token_id(trace_.category_words[k]));
    category_embeddings_.push_back(keyed_unit(seed, "category", k, cfg_.d_llm));
  }
  ambiguous_embedding_ = keyed_unit(seed, "ambiguous", 0, cfg_.d_llm);
  filler_embedding_ = keyed_unit(seed, "filler", 0, cfg_.d_llm);
}

int OracleBackend::token_category(TokenId token) const {
  for (std::size_t k = 0; k < category_tokens_.size(); ++k) {
    if (category_tokens_[k] == token) return static_cast<int>(k);
  }
  return -1;
}

std::vector<int> OracleBackend::resolve_spans(const TokenizedPrompt& prompt) const {
  std::vector<int> cat(prompt.spans.size(), kNoCategory);
  const auto D = trace_.config.dependency_distance;
  for (std::size_t k = 0; k < prompt.spans.size(); ++k) {
    const auto& sp = prompt.spans[k];
    // The ambiguous word points into the buyer's own history. In a prompt
    // centred on the item that history is not present.
    bool item_side = false;
    for (std::size_t j = sp.first_token; j <= sp.last_token && cat[k] == kNoCategory; ++j) {
      const TokenId tok = prompt.tokens[j];
      if (tok == destination_token_) item_side = true;
      if (int c = token_category(tok); c >= 0) {
        cat[k] = c;
      } else if (tok == ambiguous_token_) {
        cat[k] = (!item_side && k >= D && cat[k - D] >= 0) ? cat[k - D] : kUnresolved;
      }
    }
  }
  return cat;
}

std::size_t OracleBackend::unresolved_spans(const TokenizedPrompt& prompt,
                                            const std::vector<std::size_t>& span_ids) const {
  const auto cat = resolve_spans(prompt);
  std::size_t n = 0;
  for (std::size_t k = 0; k < prompt.spans.size(); ++k) {
    if (cat[k] != kUnresolved) continue;
    if (std::find(span_ids.begin(), span_ids.end(), prompt.spans[k].span_id) != span_ids.end()) {
      ++n;
    }
  }
  return n;
}

HiddenStates OracleBackend::hidden_states(const TokenizedPrompt& prompt) const {
  if (prompt.tokens.size() > cfg_.context_limit) {
    fail(ErrorKind::kContextOverflow,
         "prompt has " + std::to_string(prompt.tokens.size()) +
             " tokens, context limit is " + std::to_string(cfg_.context_limit));
  }
  prompt.validate();
  // Span categories only ever look backwards, so row j depends on tokens 0..j.
  const auto span_cat = resolve_spans(prompt);
  const auto d = static_cast<Eigen::Index>(cfg_.d_llm);
  HiddenStates hs;
  hs.vectors.resize(static_cast<Eigen::Index>(prompt.tokens.size()), d);
  std::size_t span = 0;
  // Context of the current span once its category-bearing token was read.
  const Eigen::VectorXd* context = nullptr;
  for (std::size_t j = 0; j < prompt.tokens.size(); ++j) {
    while (span < prompt.spans.size() && prompt.spans[span].last_token < j) ++span;
    const bool in_span = span < prompt.spans.size() && prompt.spans[span].first_token <= j;
    if (!in_span || prompt.spans[span].first_token == j) context = nullptr;
    const TokenId tok = prompt.tokens[j];
    if (in_span && !context) {
      if (token_category(tok) >= 0 || tok == ambiguous_token_) {
        const int c = span_cat[span];
        context = c >= 0 ? &category_embeddings_[static_cast<std::size_t>(c)]
                         : &ambiguous_embedding_;
      }
    }
    Eigen::VectorXd row = 0.5 * filler_embedding_;
    if (context) row += *context;
    row += 0.05 * prefix_vector(hash_combine(cfg_.seed, static_cast<std::uint64_t>(tok)),
                                cfg_.d_llm);
    hs.vectors.row(static_cast<Eigen::Index>(j)) = row.transpose();
  }
  return hs;
}

std::string OracleBackend::generate(std::string_view prompt_text) const {
  static const std::regex line_re(R"(\[([0-9][0-9.eE+-]*)\] \((source|destination)\))");
  const std::string text(prompt_text);
  double latest = -1.0;
  bool as_source = true;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), line_re);
       it != std::sregex_iterator(); ++it) {
    const double ts = std::stod((*it)[1].str());
    if (ts >= latest) {
      latest = ts;
      as_source = (*it)[2].str() == "source";
    }
  }
  const auto idx = static_cast<std::size_t>(latest);
  if (latest < 0.0 || static_cast<double>(idx) != latest || idx >= trace_.events.size()) {
    return "interest unknown";
  }
  const auto& ev = trace_.events[idx];
  const std::size_t interest =
      as_source ? ev.interest : trace_.item_interest[ev.item - trace_.config.num_users];
  return truncate_tokens("interest " + trace_.interest_labels[interest],
                         cfg_.max_generation_tokens);
}

std::string OracleBackend::fingerprint() const {
  return "oracle2:seed=" + std::to_string(cfg_.seed) + ":d=" + std::to_string(cfg_.d_llm) +
         ":D=" + std::to_string(trace_.config.dependency_distance) +
         ":trace=" + hex64(fnv1a64(trace_.to_json().dump()));
}

std::size_t count_unresolved_targets(std::span<const WindowBatch> batches, const DyTAG& g,
                                     const PromptTemplate& tmpl,
                                     const OracleBackend& oracle) {
  std::size_t n = 0;
  for (const auto& b : batches) {
    n += oracle.unresolved_spans(render_recent_prompt(b, tmpl, g), b.target_positions);
  }
  return n;
}

DyTAG regular_graph(std::size_t n, std::size_t d, const std::string& edge_text) {
  if (n < 2 || n % 2 != 0) fail(ErrorKind::kInvalidArgument, "regular graph needs even n >= 2");
  if (d >= n) fail(ErrorKind::kInvalidArgument, "regular graph needs d < n");
  std::map<NodeId, std::string> node_texts;
  for (std::size_t v = 0; v < n; ++v) node_texts[v] = "";
  std::vector<EdgeRow> rows;
  const std::size_t m = n - 1;
  // Circle method: node n-1 is fixed, the others rotate.
  for (std::size_t r = 0; r < d; ++r) {
    auto add = [&](std::size_t a, std::size_t b) {
      rows.push_back({std::min(a, b), std::max(a, b), 0, static_cast<double>(r)});
    };
    add(m, r);
    for (std::size_t k = 1; k < n / 2; ++k) add((r + k) % m, (r + m - k) % m);
  }
  return DyTAG::build(std::move(node_texts), {{0, edge_text}}, std::move(rows));
}

}  // namespace dygrasp
