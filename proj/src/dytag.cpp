#include "dygrasp/dytag.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dygrasp/csv.hpp"
#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"

namespace dygrasp {
namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
bool parse_number(std::string_view raw, T& out) {
  std::string s = trim(raw);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

[[noreturn]] void malformed(const std::string& source, std::size_t line,
                            const std::string& what) {
  fail(ErrorKind::kData,
       source + ":" + std::to_string(line) + ": malformed row: " + what);
}

std::ifstream open_or_fail(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::kData, "cannot open " + p.string());
  return in;
}

void expect_header(csv::Reader& reader, const std::string& source,
                   const std::vector<std::string>& expected) {
  auto header = reader.next();
  if (!header) fail(ErrorKind::kData, source + ": empty file");
  std::vector<std::string> got;
  for (auto& f : header->fields) got.push_back(trim(f));
  // Tolerate a UTF-8 byte order mark on the first column.
  if (!got.empty() && got[0].starts_with("\xEF\xBB\xBF")) {
    got[0] = got[0].substr(3);
  }
  if (got != expected) {
    std::string want;
    for (auto& e : expected) want += (want.empty() ? "" : ",") + e;
    fail(ErrorKind::kData, source + ":1: expected header `" + want + "`");
  }
}

template <typename Id>
std::map<Id, std::string> load_text_table(const std::filesystem::path& p,
                                          const std::string& id_column) {
  auto in = open_or_fail(p);
  const std::string source = p.filename().string();
  csv::Reader reader(in, source);
  expect_header(reader, source, {id_column, "text"});
  std::map<Id, std::string> out;
  while (auto rec = reader.next()) {
    if (rec->fields.size() == 1 && trim(rec->fields[0]).empty()) continue;
    if (rec->fields.size() != 2) {
      malformed(source, rec->line,
                "expected 2 fields, got " + std::to_string(rec->fields.size()));
    }
    Id id{};
    if (!parse_number(rec->fields[0], id)) {
      malformed(source, rec->line, "bad id `" + rec->fields[0] + "`");
    }
    if (!out.emplace(id, rec->fields[1]).second) {
      malformed(source, rec->line, "duplicate id " + std::to_string(id));
    }
  }
  return out;
}

}  // namespace

const char* role_name(Role role) {
  return role == Role::kAsSource ? "source" : "destination";
}

DyTAG DyTAG::build(std::map<NodeId, std::string> node_texts,
                   std::map<TextId, std::string> edge_texts,
                   std::vector<EdgeRow> rows, LoadOptions options) {
  DyTAG g;
  g.node_texts_ = std::move(node_texts);
  g.edge_texts_ = std::move(edge_texts);

  for (const auto& r : rows) {
    if (!g.edge_texts_.contains(r.edge_text_ref)) {
      fail(ErrorKind::kData,
           "unknown edge_text " + std::to_string(r.edge_text_ref));
    }
    if (!g.node_texts_.contains(r.src)) {
      fail(ErrorKind::kData, "unknown node " + std::to_string(r.src));
    }
    if (!g.node_texts_.contains(r.dst)) {
      fail(ErrorKind::kData, "unknown node " + std::to_string(r.dst));
    }
    if (r.src == r.dst && !options.allow_self_loops) {
      fail(ErrorKind::kData, "self-loop on node " + std::to_string(r.src) +
                                 " (enable allow_self_loops)");
    }
    if (!(r.timestamp >= 0.0) || !std::isfinite(r.timestamp)) {
      fail(ErrorKind::kData, "timestamp must be a finite non-negative real");
    }
  }

  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rows[a].timestamp < rows[b].timestamp;
  });
  g.log_.reserve(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& r = rows[order[i]];
    g.log_.push_back({i, r.src, r.dst, r.edge_text_ref, r.timestamp});
  }

  for (const auto& [id, text] : g.node_texts_) {
    g.node_pos_.emplace(id, g.nodes_.size());
    g.nodes_.push_back(id);
  }
  g.incident_.resize(g.nodes_.size());
  std::set<NodeId> sources;
  std::set<NodeId> dests;
  for (const auto& e : g.log_) {
    g.incident_[g.node_pos_.at(e.src)].push_back(
        {e.id, Role::kAsSource, e.timestamp, e.dst});
    if (e.dst != e.src) {
      g.incident_[g.node_pos_.at(e.dst)].push_back(
          {e.id, Role::kAsDestination, e.timestamp, e.src});
    }
    sources.insert(e.src);
    dests.insert(e.dst);
  }
  g.destinations_.assign(dests.begin(), dests.end());
  g.is_bipartite_ =
      !g.log_.empty() &&
      std::none_of(sources.begin(), sources.end(),
                   [&](NodeId v) { return dests.contains(v); });
  if (!g.log_.empty()) {
    g.time_range_ = {g.log_.front().timestamp, g.log_.back().timestamp};
  }
  return g;
}

const std::string& DyTAG::node_text(NodeId v) const {
  auto it = node_texts_.find(v);
  if (it == node_texts_.end()) {
    fail(ErrorKind::kInvalidArgument, "unknown node " + std::to_string(v));
  }
  return it->second;
}

const std::string& DyTAG::edge_text(TextId r) const {
  auto it = edge_texts_.find(r);
  if (it == edge_texts_.end()) {
    fail(ErrorKind::kInvalidArgument, "unknown edge_text " + std::to_string(r));
  }
  return it->second;
}

std::size_t DyTAG::node_index(NodeId v) const {
  auto it = node_pos_.find(v);
  if (it == node_pos_.end()) {
    fail(ErrorKind::kInvalidArgument, "unknown node " + std::to_string(v));
  }
  return it->second;
}

std::span<const NeighborItem> DyTAG::incident(NodeId v) const {
  return incident_[node_index(v)];
}

DyTAG load_dytag(const std::filesystem::path& edges_path,
                 const std::filesystem::path& node_text_path,
                 const std::filesystem::path& edge_text_path,
                 LoadOptions options) {
  auto node_texts = load_text_table<NodeId>(node_text_path, "node_id");
  auto edge_texts = load_text_table<TextId>(edge_text_path, "text_id");

  auto in = open_or_fail(edges_path);
  const std::string source = edges_path.filename().string();
  csv::Reader reader(in, source);
  expect_header(reader, source, {"src", "dst", "edge_text_id", "timestamp"});
  std::vector<EdgeRow> rows;
  while (auto rec = reader.next()) {
    if (rec->fields.size() == 1 && trim(rec->fields[0]).empty()) continue;
    if (rec->fields.size() != 4) {
      malformed(source, rec->line,
                "expected 4 fields, got " + std::to_string(rec->fields.size()));
    }
    EdgeRow r;
    if (!parse_number(rec->fields[0], r.src)) {
      malformed(source, rec->line, "bad src `" + rec->fields[0] + "`");
    }
    if (!parse_number(rec->fields[1], r.dst)) {
      malformed(source, rec->line, "bad dst `" + rec->fields[1] + "`");
    }
    if (!parse_number(rec->fields[2], r.edge_text_ref)) {
      malformed(source, rec->line, "bad edge_text_id `" + rec->fields[2] + "`");
    }
    if (!parse_number(rec->fields[3], r.timestamp) || r.timestamp < 0.0 ||
        !std::isfinite(r.timestamp)) {
      malformed(source, rec->line, "bad timestamp `" + rec->fields[3] + "`");
    }
    if (r.src == r.dst && !options.allow_self_loops) {
      malformed(source, rec->line, "self-loop on node " + std::to_string(r.src));
    }
    rows.push_back(r);
  }
  return DyTAG::build(std::move(node_texts), std::move(edge_texts),
                      std::move(rows), options);
}

DyTAG load_dytag_dir(const std::filesystem::path& dir, LoadOptions options) {
  return load_dytag(dir / "edges.csv", dir / "node_text.csv",
                    dir / "edge_text.csv", options);
}

void save_dytag(const DyTAG& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "edges.csv", std::ios::binary);
    out << "src,dst,edge_text_id,timestamp\n";
    char buf[64];
    for (const auto& e : g.log()) {
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, e.timestamp);
      out << e.src << ',' << e.dst << ',' << e.edge_text_ref << ','
          << std::string_view(buf, p - buf) << '\n';
    }
  }
  {
    std::ofstream out(dir / "node_text.csv", std::ios::binary);
    out << "node_id,text\n";
    for (const auto& [id, text] : g.node_texts()) {
      out << id << ',' << csv::quote(text) << '\n';
    }
  }
  {
    std::ofstream out(dir / "edge_text.csv", std::ios::binary);
    out << "text_id,text\n";
    for (const auto& [id, text] : g.edge_texts()) {
      out << id << ',' << csv::quote(text) << '\n';
    }
  }
}

NeighborSequence neighbor_sequence(const DyTAG& g, NodeId v,
                                   std::optional<double> before) {
  if (!g.has_node(v)) {
    fail(ErrorKind::kInvalidArgument, "unknown node " + std::to_string(v));
  }
  auto items = g.incident(v);
  NeighborSequence seq{v, {}};
  if (!before) {
    seq.items.assign(items.begin(), items.end());
    return seq;
  }
  auto end = std::lower_bound(
      items.begin(), items.end(), *before,
      [](const NeighborItem& it, double t) { return it.timestamp < t; });
  seq.items.assign(items.begin(), end);
  return seq;
}

Split temporal_split(const DyTAG& g, SplitRatios ratios) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 ||
      ratios.test < 0) {
    fail(ErrorKind::kInvalidArgument, "split ratios must be >= 0 and sum to 1");
  }
  const auto& log = g.log();
  const std::size_t n = log.size();
  if (n == 0) fail(ErrorKind::kInvalidArgument, "cannot split an empty log");

  auto floor_count = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  };
  // Interactions tied with the last member of a range join that range.
  auto push_past_ties = [&](std::size_t end) {
    while (end > 0 && end < n && log[end].timestamp == log[end - 1].timestamp) {
      ++end;
    }
    return end;
  };

  const std::size_t n_train = floor_count(ratios.train);
  const std::size_t n_val = floor_count(ratios.val);
  std::size_t train_end = push_past_ties(std::min(n_train, n));
  std::size_t val_end =
      push_past_ties(std::max(train_end, std::min(n_train + n_val, n)));

  Split s;
  s.train = {0, train_end};
  s.val = {train_end, val_end};
  s.test = {val_end, n};
  s.t_train_end = train_end > 0 ? log[train_end - 1].timestamp : log.front().timestamp;
  s.t_val_end = val_end > 0 ? log[val_end - 1].timestamp : s.t_train_end;
  if (s.val.size() == 0 || s.test.size() == 0) {
    log::warn("degenerate_split", {{"train", s.train.size()},
                                   {"val", s.val.size()},
                                   {"test", s.test.size()}});
  }
  return s;
}

std::set<InteractionId> inductive_mask(const DyTAG& g, const Split& split) {
  std::set<NodeId> seen;
  const auto& log = g.log();
  for (std::size_t i = split.train.begin; i < split.train.end; ++i) {
    seen.insert(log[i].src);
    seen.insert(log[i].dst);
  }
  std::set<InteractionId> mask;
  for (std::size_t i = split.test.begin; i < split.test.end; ++i) {
    if (!seen.contains(log[i].src) || !seen.contains(log[i].dst)) {
      mask.insert(log[i].id);
    }
  }
  return mask;
}

}  // namespace dygrasp
