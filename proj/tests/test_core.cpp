#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dygrasp/csv.hpp"
#include "dygrasp/dytag.hpp"
#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/tokenizer.hpp"
#include "support.hpp"

using namespace dygrasp;
using testing_support::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

DyTAG small_graph(std::vector<EdgeRow> rows, std::size_t nodes = 4) {
  std::map<NodeId, std::string> nt;
  for (NodeId v = 0; v < nodes; ++v) nt[v] = "n" + std::to_string(v);
  std::map<TextId, std::string> et;
  for (const auto& r : rows) et[r.edge_text_ref] = "e" + std::to_string(r.edge_text_ref);
  return DyTAG::build(nt, et, rows);
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::kInvalidArgument;
}

}  // namespace

TEST(Tokenizer, CountsFollowSplitterRule) {
  EXPECT_EQ(count_mock_tokens(""), 0u);
  EXPECT_EQ(count_mock_tokens("a b c"), 3u);
  EXPECT_EQ(count_mock_tokens("visit bookstore, buy notebook"), 5u);
  auto toks = split_tokens("[12] (as_source) x");
  std::vector<std::string> got(toks.begin(), toks.end());
  EXPECT_EQ(got, (std::vector<std::string>{"[", "12", "]", "(", "as_source", ")", "x"}));
  EXPECT_EQ(token_id("coffee"), token_id("coffee"));
  EXPECT_NE(token_id("coffee"), token_id("tea"));
  EXPECT_GE(token_id("coffee"), 0);
  EXPECT_LT(token_id("coffee"), TokenId{1} << 31);
}

TEST(Csv, QuotedFieldsRoundTrip) {
  std::vector<std::string> fields = {"plain", "with,comma", "with \"quotes\"", "multi\nline", ""};
  std::ostringstream out;
  csv::write_row(out, fields);
  csv::write_row(out, {"second"});
  std::istringstream in(out.str());
  csv::Reader reader(in, "mem");
  auto r1 = reader.next();
  ASSERT_TRUE(r1);
  EXPECT_EQ(r1->fields, fields);
  EXPECT_EQ(r1->line, 1u);
  auto r2 = reader.next();
  ASSERT_TRUE(r2);
  EXPECT_EQ(r2->fields, std::vector<std::string>{"second"});
  EXPECT_EQ(r2->line, 3u);
  EXPECT_FALSE(reader.next());
}

TEST(Csv, UnterminatedQuoteIsDataError) {
  std::istringstream in("a,\"b\n");
  csv::Reader reader(in, "mem");
  EXPECT_EQ(kind_of([&] { reader.next(); }), ErrorKind::kData);
}

TEST(DyTAG, LoaderSortsAndDetectsBipartite) {
  TempDir dir;
  write_file(dir / "edges.csv",
             "src,dst,edge_text_id,timestamp\n0,100,0,5\n1,101,1,1\n2,102,2,3\n");
  write_file(dir / "node_text.csv",
             "node_id,text\n0,a\n1,b\n2,\"c, quoted\"\n100,x\n101,y\n102,\n");
  write_file(dir / "edge_text.csv", "text_id,text\n0,five\n1,one\n2,three\n");
  auto g = load_dytag_dir(dir.path());
  ASSERT_EQ(g.num_interactions(), 3u);
  EXPECT_EQ(g.log()[0].timestamp, 1.0);
  EXPECT_EQ(g.log()[1].timestamp, 3.0);
  EXPECT_EQ(g.log()[2].timestamp, 5.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g.log()[i].id, i);
  EXPECT_TRUE(g.is_bipartite());
  EXPECT_EQ(g.node_text(2), "c, quoted");
  EXPECT_EQ(g.node_text(102), "");
  EXPECT_EQ(g.time_range(), std::make_pair(1.0, 5.0));
}

TEST(DyTAG, UnknownEdgeTextNamesTheId) {
  TempDir dir;
  write_file(dir / "edges.csv", "src,dst,edge_text_id,timestamp\n0,1,42,5\n");
  write_file(dir / "node_text.csv", "node_id,text\n0,a\n1,b\n");
  write_file(dir / "edge_text.csv", "text_id,text\n0,x\n");
  try {
    load_dytag_dir(dir.path());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find("unknown edge_text 42"), std::string::npos);
  }
}

TEST(DyTAG, MalformedRowReportsLine) {
  TempDir dir;
  write_file(dir / "edges.csv", "src,dst,edge_text_id,timestamp\n0,1,0,5\n0,x,0,6\n");
  write_file(dir / "node_text.csv", "node_id,text\n0,a\n1,b\n");
  write_file(dir / "edge_text.csv", "text_id,text\n0,x\n");
  try {
    load_dytag_dir(dir.path());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(DyTAG, SelfLoopsNeedTheFlag) {
  std::map<NodeId, std::string> nt{{0, "a"}};
  std::map<TextId, std::string> et{{0, "x"}};
  std::vector<EdgeRow> rows{{0, 0, 0, 1.0}};
  EXPECT_EQ(kind_of([&] { DyTAG::build(nt, et, rows); }), ErrorKind::kData);
  auto g = DyTAG::build(nt, et, rows, LoadOptions{.allow_self_loops = true});
  EXPECT_EQ(g.num_interactions(), 1u);
  // A self-loop is one incident interaction, not two.
  EXPECT_EQ(g.incident(0).size(), 1u);
}

TEST(DyTAG, SaveLoadRoundTrip) {
  auto g = testing_support::random_graph(20, 100, 3);
  TempDir dir;
  save_dytag(g, dir.path());
  auto h = load_dytag_dir(dir.path());
  ASSERT_EQ(h.num_interactions(), g.num_interactions());
  for (std::size_t i = 0; i < g.num_interactions(); ++i) {
    EXPECT_EQ(h.log()[i].src, g.log()[i].src);
    EXPECT_EQ(h.log()[i].dst, g.log()[i].dst);
    EXPECT_EQ(h.log()[i].timestamp, g.log()[i].timestamp);
    EXPECT_EQ(h.edge_text(h.log()[i].edge_text_ref), g.edge_text(g.log()[i].edge_text_ref));
  }
  EXPECT_EQ(h.node_texts(), g.node_texts());
}

TEST(NeighborSequence, Examples) {
  // Node 0 has timestamps {2,7,7,9}; the two 7s keep file order.
  auto g = small_graph({{0, 1, 0, 2}, {0, 2, 1, 7}, {3, 0, 2, 7}, {0, 1, 3, 9}, {1, 2, 4, 1}});
  auto seq = neighbor_sequence(g, 0, 8.0);
  ASSERT_EQ(seq.size(), 3u);
  EXPECT_EQ(seq.items[0].timestamp, 2.0);
  EXPECT_EQ(seq.items[1].timestamp, 7.0);
  EXPECT_EQ(seq.items[1].counterpart, 2u);
  EXPECT_EQ(seq.items[1].role, Role::kAsSource);
  EXPECT_EQ(seq.items[2].counterpart, 3u);
  EXPECT_EQ(seq.items[2].role, Role::kAsDestination);
  EXPECT_TRUE(neighbor_sequence(g, 0, g.time_range().first).empty());

  auto iso = small_graph({{0, 1, 0, 1}}, 3);
  EXPECT_TRUE(neighbor_sequence(iso, 2).empty());
  EXPECT_EQ(kind_of([&] { neighbor_sequence(iso, 99); }), ErrorKind::kInvalidArgument);
}

TEST(NeighborSequence, MatchesLogScan) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto g = testing_support::random_graph(30, 1000, seed, 200);
    std::mt19937_64 rng(seed);
    for (int trial = 0; trial < 60; ++trial) {
      NodeId v = rng() % 30;
      std::optional<double> before;
      if (trial % 4 != 0) before = static_cast<double>(rng() % 210);
      auto seq = neighbor_sequence(g, v, before);
      std::vector<NeighborItem> expect;
      for (const auto& e : g.log()) {
        if (before && !(e.timestamp < *before)) continue;
        if (e.src == v) expect.push_back({e.id, Role::kAsSource, e.timestamp, e.dst});
        else if (e.dst == v) expect.push_back({e.id, Role::kAsDestination, e.timestamp, e.src});
      }
      ASSERT_EQ(seq.size(), expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) {
        EXPECT_EQ(seq.items[i].interaction, expect[i].interaction);
        EXPECT_EQ(seq.items[i].role, expect[i].role);
        EXPECT_EQ(seq.items[i].counterpart, expect[i].counterpart);
        EXPECT_EQ(seq.items[i].timestamp, expect[i].timestamp);
      }
    }
  }
}

TEST(Split, CountsAndTies) {
  std::vector<EdgeRow> rows;
  for (std::size_t i = 0; i < 100; ++i) rows.push_back({0, 1, i, static_cast<double>(i)});
  auto g = small_graph(rows, 2);
  auto s = temporal_split(g);
  EXPECT_EQ(s.train.size(), 70u);
  EXPECT_EQ(s.val.size(), 15u);
  EXPECT_EQ(s.test.size(), 15u);

  std::vector<EdgeRow> tied;
  for (std::size_t i = 0; i < 10; ++i) tied.push_back({0, 1, i, 4.0});
  log::reset_counts();
  auto t = temporal_split(small_graph(tied, 2));
  EXPECT_EQ(t.train.size(), 10u);
  EXPECT_EQ(t.val.size(), 0u);
  EXPECT_EQ(t.test.size(), 0u);
  EXPECT_EQ(log::count("degenerate_split"), 1u);
}

TEST(Split, LargeLogFloorArithmetic) {
  // Sizes checked against a plain counter rather than the split code.
  const std::size_t n = 1339245;
  std::size_t train = 0, val = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (10 * (i + 1) <= 7 * n) ++train;
    else if (100 * (i + 1 - train) <= 15 * n) ++val;
  }
  std::vector<EdgeRow> rows;
  rows.reserve(n);
  std::map<TextId, std::string> et{{0, "x"}};
  for (std::size_t i = 0; i < n; ++i) rows.push_back({0, 1, 0, static_cast<double>(i)});
  auto g = DyTAG::build({{0, "a"}, {1, "b"}}, et, rows);
  auto s = temporal_split(g);
  EXPECT_EQ(s.train.size(), train);
  EXPECT_EQ(s.val.size(), val);
  EXPECT_EQ(s.test.size(), n - train - val);
  EXPECT_EQ(s.train.size(), 937471u);
  EXPECT_EQ(s.val.size(), 200886u);
  EXPECT_EQ(s.test.size(), 200888u);
}

TEST(Split, PartitionsRandomLogs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = testing_support::random_graph(15, 50 + seed * 17, seed, 10);
    auto s = temporal_split(g);
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.val.begin);
    EXPECT_EQ(s.val.end, s.test.begin);
    EXPECT_EQ(s.test.end, g.num_interactions());
    const auto& log = g.log();
    for (std::size_t i = s.train.begin; i < s.train.end; ++i)
      for (std::size_t j = s.val.begin; j < s.test.end; ++j)
        EXPECT_LT(log[i].timestamp, log[j].timestamp);
    for (std::size_t i = s.val.begin; i < s.val.end; ++i)
      for (std::size_t j = s.test.begin; j < s.test.end; ++j)
        EXPECT_LT(log[i].timestamp, log[j].timestamp);
  }
}

TEST(InductiveMask, Definition) {
  // 10 train-range edges among nodes 0..2, then node 3 appears in test.
  std::vector<EdgeRow> rows;
  for (std::size_t i = 0; i < 14; ++i) rows.push_back({i % 3, (i + 1) % 3, i, double(i)});
  rows.push_back({3, 0, 14, 20});
  rows.push_back({0, 1, 15, 21});
  rows.push_back({2, 3, 16, 22});
  auto g = small_graph(rows, 4);
  auto s = temporal_split(g);
  auto mask = inductive_mask(g, s);
  std::set<InteractionId> expect;
  for (std::size_t i = s.test.begin; i < s.test.end; ++i)
    if (g.log()[i].src == 3 || g.log()[i].dst == 3) expect.insert(i);
  EXPECT_EQ(mask, expect);
  EXPECT_FALSE(mask.empty());

  auto pair = DyTAG::build({{0, "a"}, {1, "b"}}, {{0, "x"}, {1, "y"}}, {{0, 1, 0, 1}, {0, 1, 1, 10}});
  Split manual{{0, 1}, {1, 1}, {1, 2}, 1, 1};
  EXPECT_TRUE(inductive_mask(pair, manual).empty());
}

TEST(InductiveMask, NeverContainsSeenPairs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = testing_support::random_graph(60, 150, seed, 100);
    auto s = temporal_split(g);
    std::set<NodeId> seen;
    for (std::size_t i = s.train.begin; i < s.train.end; ++i) {
      seen.insert(g.log()[i].src);
      seen.insert(g.log()[i].dst);
    }
    auto mask = inductive_mask(g, s);
    for (auto id : mask) {
      EXPECT_TRUE(s.test.contains(id));
      const auto& e = g.log()[id];
      EXPECT_FALSE(seen.contains(e.src) && seen.contains(e.dst));
    }
  }
}
