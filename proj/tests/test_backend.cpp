#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <thread>

#include "dygrasp/error.hpp"
#include "dygrasp/llm_backend.hpp"
#include "dygrasp/log.hpp"
#include "dygrasp/text_encoder.hpp"
#include "dygrasp/tokenizer.hpp"

// After Eigen: <resolv.h> defines a `_res` macro that breaks Eigen headers.
#include <httplib.h>

using namespace dygrasp;

namespace {

TokenizedPrompt prompt_of(std::vector<TokenId> tokens) {
  TokenizedPrompt p;
  p.tokens = std::move(tokens);
  return p;
}

MockBackend mock(std::size_t d = 16, std::uint64_t seed = 7) {
  BackendConfig cfg;
  cfg.d_llm = d;
  cfg.seed = seed;
  return MockBackend(cfg);
}

// Local HTTP server on an ephemeral port, stopped on destruction.
class TestServer {
 public:
  TestServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~TestServer() {
    server_.stop();
    thread_.join();
  }
  httplib::Server& server() { return server_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

BackendConfig remote_config(const std::string& endpoint, std::size_t d = 8) {
  BackendConfig cfg;
  cfg.kind = BackendKind::kRemote;
  cfg.endpoint = endpoint;
  cfg.d_llm = d;
  cfg.retry_backoff_ms = 1;
  cfg.timeout_ms = 2000;
  return cfg;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

}  // namespace

TEST(MockBackend, DeterministicUnitRows) {
  auto b = mock(16);
  auto p = prompt_of(token_ids("one two three four five"));
  auto h1 = b.hidden_states(p);
  auto h2 = b.hidden_states(p);
  ASSERT_EQ(h1.vectors.rows(), 5);
  ASSERT_EQ(h1.vectors.cols(), 16);
  EXPECT_TRUE(h1.vectors == h2.vectors);
  for (Eigen::Index r = 0; r < 5; ++r) EXPECT_NEAR(h1.vectors.row(r).norm(), 1.0, 1e-6);
  // A different seed gives different rows.
  EXPECT_FALSE(mock(16, 8).hidden_states(p).vectors == h1.vectors);
}

TEST(MockBackend, DifferenceAtTokenTen) {
  auto b = mock(16);
  std::vector<TokenId> a(15), c(15);
  for (int i = 0; i < 15; ++i) a[i] = c[i] = 100 + i;
  c[10] = 999;
  auto ha = b.hidden_states(prompt_of(a)).vectors;
  auto hc = b.hidden_states(prompt_of(c)).vectors;
  for (int r = 0; r < 10; ++r) EXPECT_TRUE(ha.row(r) == hc.row(r));
  EXPECT_FALSE(ha.row(10) == hc.row(10));
}

TEST(MockBackend, CausalityTrials) {
  auto b = mock(16);
  std::mt19937_64 rng(1);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t n = 1 + rng() % 60;
    std::vector<TokenId> a(n);
    for (auto& t : a) t = static_cast<TokenId>(rng() % 50);
    auto c = a;
    std::size_t p = rng() % n;
    c[p] = a[p] + 1 + static_cast<TokenId>(rng() % 10);
    // Anything after p may change too.
    for (std::size_t j = p + 1; j < n; ++j)
      if (rng() % 2) c[j] = static_cast<TokenId>(rng() % 50);
    auto ha = b.hidden_states(prompt_of(a)).vectors;
    auto hc = b.hidden_states(prompt_of(c)).vectors;
    for (std::size_t r = 0; r < p; ++r) violations += !(ha.row(r) == hc.row(r));
    violations += ha.row(p) == hc.row(p);
  }
  EXPECT_EQ(violations, 0u);
}

TEST(MockBackend, ContextLimit) {
  BackendConfig cfg;
  cfg.d_llm = 8;
  cfg.context_limit = 4;
  MockBackend b(cfg);
  try {
    b.hidden_states(prompt_of({1, 2, 3, 4, 5}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kContextOverflow);
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos);
  }
  EXPECT_NO_THROW(b.hidden_states(prompt_of({1, 2, 3, 4})));
}

TEST(MockBackend, GenerateUsesFrequentTerms) {
  auto b = mock();
  std::string prompt = "coffee coffee tea coffee coffee coffee";
  auto out = b.generate(prompt);
  EXPECT_EQ(out, b.generate(prompt));
  EXPECT_NE(out.find("coffee"), std::string::npos);
  EXPECT_EQ(out.rfind("SUMMARY[", 0), 0u);
  EXPECT_FALSE(out.empty());

  BackendConfig cfg;
  cfg.d_llm = 8;
  cfg.max_generation_tokens = 3;
  MockBackend capped(cfg);
  EXPECT_LE(count_mock_tokens(capped.generate(prompt)), 3u);
}

TEST(MockBackend, TopTermsOrderByCountThenFirstSeen) {
  auto terms = top_terms("beta alpha Beta gamma alpha beta delta", 3);
  EXPECT_EQ(terms, (std::vector<std::string>{"beta", "alpha", "gamma"}));
  // Short words, numbers and stopwords are not content words.
  EXPECT_TRUE(top_terms("a an the 12 of", 8).empty());
}

TEST(MockBackend, CountTokens) {
  auto b = mock();
  EXPECT_EQ(b.count_tokens("").count, 0u);
  EXPECT_EQ(b.count_tokens("a b c").count, 3u);
  EXPECT_EQ(b.count_tokens("visit bookstore, buy notebook").count, 5u);
  EXPECT_FALSE(b.count_tokens("a").estimated);
}

TEST(BackendConfig, Validation) {
  BackendConfig cfg;
  cfg.d_llm = 4;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.d_llm = 8;
  cfg.kind = BackendKind::kRemote;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.endpoint = "http://localhost:1";
  EXPECT_NO_THROW(cfg.validate());
  auto back = backend_config_from_json(to_json(cfg));
  EXPECT_EQ(back.kind, BackendKind::kRemote);
  EXPECT_EQ(back.endpoint, cfg.endpoint);
  EXPECT_EQ(parse_backend_kind("oracle"), BackendKind::kOracle);
  EXPECT_THROW(parse_backend_kind("gpt"), Error);
}

TEST(TokenizedPrompt, ValidateSpans) {
  TokenizedPrompt p = prompt_of({1, 2, 3, 4});
  p.spans = {{1, 0, 1}, {2, 2, 3}};
  EXPECT_NO_THROW(p.validate());
  p.spans = {{1, 0, 2}, {2, 2, 3}};
  EXPECT_THROW(p.validate(), Error);
  p.spans = {{1, 0, 1}, {1, 2, 3}};
  EXPECT_THROW(p.validate(), Error);
  p.spans = {{1, 0, 4}};
  EXPECT_THROW(p.validate(), Error);
}

TEST(RemoteBackend, RetriesServerErrors) {
  TestServer srv;
  std::atomic<int> calls{0};
  std::string auth;
  srv.server().Post("/v1/generate", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    if (calls++ < 2) {
      res.status = 500;
      return;
    }
    auto body = nlohmann::json::parse(req.body);
    nlohmann::json out = {{"text", "echo " + body["prompt"].get<std::string>()},
                          {"usage", {{"prompt_tokens", 11}, {"completion_tokens", 2}}}};
    res.set_content(out.dump(), "application/json");
  });
  auto cfg = remote_config(srv.endpoint());
  cfg.api_key = "secret";
  RemoteBackend b(cfg);
  log::reset_counts();
  EXPECT_EQ(b.generate("hello there"), "echo hello there");
  EXPECT_EQ(calls.load(), 3);
  EXPECT_EQ(log::count("backend_retry"), 2u);
  EXPECT_EQ(auth, "Bearer secret");
  // Server-reported usage replaces the estimate for the same prompt.
  auto reported = b.count_tokens("hello there");
  EXPECT_EQ(reported.count, 11u);
  EXPECT_FALSE(reported.estimated);
  auto estimated = b.count_tokens("other text");
  EXPECT_EQ(estimated.count, 2u);
  EXPECT_TRUE(estimated.estimated);
}

TEST(RemoteBackend, RetryBudgetExhaustedIsTransport) {
  TestServer srv;
  std::atomic<int> calls{0};
  srv.server().Post("/v1/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 503;
  });
  auto cfg = remote_config(srv.endpoint());
  cfg.max_retries = 2;
  RemoteBackend b(cfg);
  try {
    b.generate("x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTransport);
    EXPECT_TRUE(e.retryable());
  }
  EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteBackend, ClientErrorsAreNotRetried) {
  TestServer srv;
  std::atomic<int> calls{0};
  srv.server().Post("/v1/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
  });
  RemoteBackend b(remote_config(srv.endpoint()));
  try {
    b.generate("x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBackend);
  }
  EXPECT_EQ(calls.load(), 1);
}

TEST(RemoteBackend, HiddenStates) {
  TestServer srv;
  srv.server().Post("/v1/hidden_states", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    EXPECT_EQ(body["layer"], "last");
    nlohmann::json rows = nlohmann::json::array();
    for (auto& t : body["tokens"]) {
      std::vector<double> row(8, 0.0);
      row[0] = t.get<double>();
      rows.push_back(row);
    }
    res.set_content(nlohmann::json{{"vectors", rows}}.dump(), "application/json");
  });
  RemoteBackend b(remote_config(srv.endpoint()));
  auto hs = b.hidden_states(prompt_of({5, 6, 7}));
  ASSERT_EQ(hs.vectors.rows(), 3);
  EXPECT_EQ(hs.vectors(2, 0), 7.0);
  // Width mismatch is a backend error.
  RemoteBackend wide(remote_config(srv.endpoint(), 16));
  EXPECT_THROW(wide.hidden_states(prompt_of({1})), Error);
}

TEST(RemoteBackend, MissingHiddenStateEndpointIsCapability) {
  TestServer srv;
  RemoteBackend b(remote_config(srv.endpoint()));
  try {
    b.hidden_states(prompt_of({1, 2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapability);
  }
  auto cfg = remote_config(srv.endpoint());
  cfg.remote_hidden_states = false;
  RemoteBackend off(cfg);
  EXPECT_FALSE(off.supports_hidden_states());
  try {
    off.hidden_states(prompt_of({1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapability);
  }
}

TEST(RemoteBackend, UnreachableServerIsTransport) {
  int port;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  auto cfg = remote_config("http://127.0.0.1:" + std::to_string(port));
  cfg.max_retries = 1;
  cfg.timeout_ms = 200;
  RemoteBackend b(cfg);
  try {
    b.generate("x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTransport);
  }
}

TEST(MockEncoder, BasicRules) {
  EncoderConfig cfg;
  cfg.d_bert = 32;
  MockEncoder enc(cfg);
  EXPECT_TRUE(enc.encode("").isZero());
  auto a = enc.encode("tea");
  EXPECT_TRUE(a == enc.encode("tea"));
  EXPECT_TRUE(enc.encode("tea tea") == a);
  EXPECT_NEAR(a.norm(), 1.0, 1e-12);
  EXPECT_EQ(a.size(), 32);
  cfg.seed = 1;
  EXPECT_FALSE(MockEncoder(cfg).encode("tea") == a);
}

TEST(MockEncoder, OverlapRaisesSimilarity) {
  EncoderConfig cfg;
  cfg.d_bert = 768;
  MockEncoder enc(cfg);
  std::mt19937_64 rng(5);
  auto word = [&] { return "w" + std::to_string(rng() % 100000); };
  const int samples = 600;
  std::size_t holds = 0;
  std::vector<double> mean_by_overlap(5, 0.0);
  for (int s = 0; s < samples; ++s) {
    std::vector<std::string> base(4);
    for (auto& w : base) w = word();
    auto join = [](const std::vector<std::string>& ws) {
      std::string out;
      for (const auto& w : ws) out += w + " ";
      return out;
    };
    auto a = enc.encode(join(base));
    std::vector<double> sims;
    for (std::size_t k = 0; k <= 4; ++k) {
      std::vector<std::string> other(base.begin(), base.begin() + k);
      while (other.size() < 4) other.push_back(word());
      double sim = cosine(a, enc.encode(join(other)));
      sims.push_back(sim);
      mean_by_overlap[k] += sim / samples;
    }
    holds += sims[1] >= sims[0];
  }
  EXPECT_EQ(holds, static_cast<std::size_t>(samples));
  for (std::size_t k = 1; k <= 4; ++k) EXPECT_GT(mean_by_overlap[k], mean_by_overlap[k - 1]);
}

TEST(RemoteEncoder, PostsText) {
  TestServer srv;
  srv.server().Post("/v1/encode", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    std::vector<double> v(8, static_cast<double>(body["text"].get<std::string>().size()));
    res.set_content(nlohmann::json{{"vector", v}}.dump(), "application/json");
  });
  EncoderConfig cfg;
  cfg.kind = EncoderKind::kRemote;
  cfg.d_bert = 8;
  cfg.endpoint = srv.endpoint();
  RemoteEncoder enc(cfg);
  auto v = enc.encode("abc");
  ASSERT_EQ(v.size(), 8);
  EXPECT_EQ(v[0], 3.0);
  cfg.d_bert = 9;
  EXPECT_THROW(RemoteEncoder(cfg).encode("abc"), Error);
}
