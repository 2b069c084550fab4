#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "dygrasp/error.hpp"
#include "dygrasp/feature_store.hpp"
#include "support.hpp"

using namespace dygrasp;
using testing_support::TempDir;

namespace {

const nlohmann::json kFp = {{"backend", "mock:seed=1"}, {"template_hash", "abc"}, {"c", 8}};

std::vector<float> random_vector(std::mt19937_64& rng, std::size_t dim) {
  std::uniform_real_distribution<float> u(-10.0f, 10.0f);
  std::vector<float> v(dim);
  for (auto& x : v) x = u(rng);
  return v;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
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

TEST(FeatureStore, RoundTripTenThousandVectors) {
  TempDir dir;
  std::mt19937_64 rng(1);
  std::map<StoreKey, std::vector<float>> expect;
  {
    auto s = FeatureStore::create(dir.path(), StoreKind::kRecent, 24, kFp);
    for (std::size_t i = 0; i < 10000; ++i) {
      StoreKey k{rng() % 500, rng()};
      auto v = random_vector(rng, 24);
      if (expect.emplace(k, v).second) s.put(k, v);
      if (i % 1500 == 0) s.flush();
    }
    s.flush();
    EXPECT_EQ(s.size(), expect.size());
  }
  auto s = FeatureStore::open(dir.path(), StoreKind::kRecent, std::optional<nlohmann::json>(kFp));
  ASSERT_EQ(s.size(), expect.size());
  for (const auto& [k, v] : expect) {
    ASSERT_TRUE(s.has(k));
    auto got = s.get(k);
    ASSERT_EQ(got.size(), v.size());
    EXPECT_EQ(std::memcmp(got.data(), v.data(), 4 * v.size()), 0);
  }
  EXPECT_EQ(s.dim(), 24u);
  EXPECT_EQ(s.fingerprint(), kFp);
  EXPECT_EQ(s.keys().size(), expect.size());
}

TEST(FeatureStore, TextsRoundTrip) {
  TempDir dir;
  std::vector<std::string> texts = {"", "plain", "with\nnewline", "caf\xc3\xa9 \xe2\x98\x95",
                                    std::string(5000, 'x')};
  {
    auto s = FeatureStore::create(dir.path(), StoreKind::kDescriptions, 0, kFp);
    for (std::size_t i = 0; i < texts.size(); ++i) s.put_text({1, i}, texts[i]);
    s.finalize();
  }
  auto s = FeatureStore::open(dir.path(), StoreKind::kDescriptions, std::nullopt);
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(s.get_text({1, i}), texts[i]);
  EXPECT_THROW(s.put({2, 0}, std::vector<float>{1.0f}), Error);
}

TEST(FeatureStore, FingerprintGuardAndMissing) {
  TempDir dir;
  EXPECT_FALSE(FeatureStore::exists(dir.path(), StoreKind::kRecent));
  EXPECT_EQ(kind_of([&] { FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt); }),
            ErrorKind::kMissingCache);
  auto s = FeatureStore::create(dir.path(), StoreKind::kRecent, 4, kFp);
  s.put({0, 0}, std::vector<float>{1, 2, 3, 4});
  s.flush();
  EXPECT_TRUE(FeatureStore::exists(dir.path(), StoreKind::kRecent));
  auto other = kFp;
  other["template_hash"] = "def";
  try {
    FeatureStore::open(dir.path(), StoreKind::kRecent, std::optional<nlohmann::json>(other));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kStaleCache);
    EXPECT_NE(std::string(e.what()).find("template_hash"), std::string::npos);
  }
  // Wrong kind for the file is corruption, not staleness.
  std::filesystem::copy_file(dir / "recent.bin", dir / "global.bin");
  std::filesystem::copy_file(dir / "recent.idx.json", dir / "global.idx.json");
  EXPECT_EQ(kind_of([&] { FeatureStore::open(dir.path(), StoreKind::kGlobal, std::nullopt); }),
            ErrorKind::kCorruptCache);
}

TEST(FeatureStore, CollisionsAndDims) {
  TempDir dir;
  auto s = FeatureStore::create(dir.path(), StoreKind::kGlobal, 3, kFp);
  s.put({1, 1}, std::vector<float>{1, 2, 3});
  // Re-putting an identical value is allowed, a different one is not.
  EXPECT_NO_THROW(s.put({1, 1}, std::vector<float>{1, 2, 3}));
  EXPECT_THROW(s.put({1, 1}, std::vector<float>{1, 2, 4}), Error);
  s.flush();
  EXPECT_NO_THROW(s.put({1, 1}, std::vector<float>{1, 2, 3}));
  EXPECT_THROW(s.put({1, 1}, std::vector<float>{0, 2, 3}), Error);
  EXPECT_EQ(kind_of([&] { s.put({1, 2}, std::vector<float>{1, 2}); }), ErrorKind::kInvalidArgument);
  EXPECT_THROW(s.put_text({1, 3}, "x"), Error);
  EXPECT_EQ(kind_of([&] { s.get({9, 9}); }), ErrorKind::kMissingCache);
}

TEST(FeatureStore, ReadersSeeFlushedDataOnly) {
  TempDir dir;
  auto s = FeatureStore::create(dir.path(), StoreKind::kRecent, 2, kFp);
  s.put({0, 1}, std::vector<float>{1, 2});
  EXPECT_FALSE(s.has({0, 1}));
  EXPECT_EQ(s.pending(), 1u);
  EXPECT_EQ(s.size(), 0u);
  s.flush();
  EXPECT_TRUE(s.has({0, 1}));
  EXPECT_EQ(s.pending(), 0u);
  // Unflushed writes vanish with the object.
  s.put({0, 2}, std::vector<float>{3, 4});
  { FeatureStore gone = std::move(s); }
  auto r = FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt);
  EXPECT_EQ(r.size(), 1u);
  EXPECT_FALSE(r.has({0, 2}));
}

TEST(FeatureStore, CrashInjectionRecoversFlushedPrefix) {
  std::mt19937_64 rng(7);
  const std::size_t dim = 5, row_bytes = 4 * dim;
  for (int trial = 0; trial < 40; ++trial) {
    TempDir dir;
    std::size_t flushed = 0;
    std::string saved_index;
    {
      auto s = FeatureStore::create(dir.path(), StoreKind::kRecent, dim, kFp);
      std::size_t first = 1 + rng() % 30, second = 1 + rng() % 30;
      for (std::size_t i = 0; i < first; ++i) s.put({i, i}, random_vector(rng, dim));
      s.flush();
      flushed = first;
      saved_index = file_bytes(s.index_path());
      // The next flush is "killed": its body bytes are partially written and
      // the index replacement never happens.
      for (std::size_t i = first; i < first + second; ++i) s.put({i, i}, random_vector(rng, dim));
      s.flush();
    }
    const auto bin = dir / "recent.bin";
    const std::size_t full = std::filesystem::file_size(bin);
    const std::size_t durable_end = FeatureStore::kHeaderBytes + flushed * row_bytes;
    const std::size_t cut = durable_end + rng() % (full - durable_end + 1);
    std::filesystem::resize_file(bin, cut);
    std::ofstream(dir / "recent.idx.json", std::ios::binary | std::ios::trunc) << saved_index;

    auto s = FeatureStore::open(dir.path(), StoreKind::kRecent, std::optional<nlohmann::json>(kFp));
    EXPECT_EQ(s.recovery().durable_count, flushed);
    EXPECT_EQ(s.size(), flushed);
    EXPECT_FALSE(s.recovery().truncated);
    EXPECT_EQ(s.recovery().trailing_bytes, cut - durable_end);
    // Writing continues after the durable prefix.
    s.put({999, 0}, random_vector(rng, dim));
    s.flush();
    auto again = FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt);
    EXPECT_EQ(again.size(), flushed + 1);
  }
}

TEST(FeatureStore, TruncatedBodyNeedsRepair) {
  std::mt19937_64 rng(8);
  const std::size_t dim = 3, row_bytes = 4 * dim;
  for (int trial = 0; trial < 30; ++trial) {
    TempDir dir;
    std::size_t n = 2 + rng() % 40;
    {
      auto s = FeatureStore::create(dir.path(), StoreKind::kRecent, dim, kFp);
      for (std::size_t i = 0; i < n; ++i) s.put({0, i}, random_vector(rng, dim));
      s.flush();
    }
    const auto bin = dir / "recent.bin";
    const std::size_t body = n * row_bytes;
    const std::size_t keep = rng() % body;  // strictly shorter than indexed
    std::filesystem::resize_file(bin, FeatureStore::kHeaderBytes + keep);
    EXPECT_EQ(kind_of([&] { FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt); }),
              ErrorKind::kCorruptCache);
    auto s = FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt, true);
    EXPECT_TRUE(s.recovery().truncated);
    EXPECT_EQ(s.size(), keep / row_bytes);
    // After repair the store opens cleanly.
    auto clean = FeatureStore::open(dir.path(), StoreKind::kRecent, std::nullopt);
    EXPECT_EQ(clean.size(), keep / row_bytes);
    EXPECT_FALSE(clean.recovery().truncated);
  }
}

TEST(FeatureStore, ConcurrentWritersMatchSerial) {
  std::mt19937_64 rng(9);
  std::vector<std::pair<StoreKey, std::vector<float>>> data;
  for (std::size_t i = 0; i < 4000; ++i) data.push_back({{i % 97, i}, random_vector(rng, 8)});
  TempDir serial, concurrent;
  {
    auto s = FeatureStore::create(serial.path(), StoreKind::kRecent, 8, kFp);
    for (auto& [k, v] : data) s.put(k, v);
    s.finalize();
  }
  {
    auto s = FeatureStore::create(concurrent.path(), StoreKind::kRecent, 8, kFp);
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < 4; ++w) {
      threads.emplace_back([&, w] {
        // Each writer takes every fourth key, in reverse, flushing now and then.
        for (std::size_t i = data.size(); i-- > 0;) {
          if (i % 4 != w) continue;
          s.put(data[i].first, data[i].second);
          if (i % 301 == 0) s.flush();
        }
      });
    }
    for (auto& t : threads) t.join();
    s.finalize();
  }
  EXPECT_EQ(file_bytes(serial / "recent.bin"), file_bytes(concurrent / "recent.bin"));
  EXPECT_EQ(file_bytes(serial / "recent.idx.json"), file_bytes(concurrent / "recent.idx.json"));
}
