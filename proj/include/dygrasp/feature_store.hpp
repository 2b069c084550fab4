#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace dygrasp {

enum class StoreKind { kRecent, kGlobal, kDescriptions };

std::string_view store_kind_name(StoreKind kind);
// File stem inside the cache directory: recent, global or desc.
std::string_view store_file_stem(StoreKind kind);

struct StoreKey {
  std::uint64_t node = 0;
  std::uint64_t item = 0;  // interaction id (recent) or segment index
  auto operator<=>(const StoreKey&) const = default;
};

// What open() found on disk. `durable_count` entries are usable.
struct RecoveryReport {
  std::size_t index_count = 0;
  std::size_t header_count = 0;
  std::size_t durable_count = 0;
  std::size_t trailing_bytes = 0;  // body bytes past the last indexed record
  bool truncated = false;          // body shorter than the index claims
};

// Persistent cache of float32 vectors (recent/global) or UTF-8 texts
// (descriptions).
//
// Layout: CACHE_DIR/<stem>.bin holds an 8-byte magic, a u32 length and the
// JSON header {kind, dim, count, fingerprint} padded to 4096 bytes, then the
// body: little-endian float32 rows, or u32-length-prefixed texts.
// CACHE_DIR/<stem>.idx.json maps each key to its body byte offset and is
// replaced atomically on flush(); it defines the durable state.
//
// put() may be called from several threads. get()/has() see flushed data
// only. The destructor does not flush.
class FeatureStore {
 public:
  static constexpr std::size_t kHeaderBytes = 4096;

  // Creates (or truncates) the store files.
  static FeatureStore create(const std::filesystem::path& dir, StoreKind kind,
                             std::size_t dim, nlohmann::json fingerprint);

  // Opens an existing store. A fingerprint mismatch is Error(kStaleCache).
  // A body shorter than its index is Error(kCorruptCache) unless `repair`,
  // in which case the store is cut back to its longest intact prefix.
  static FeatureStore open(const std::filesystem::path& dir, StoreKind kind,
                           const std::optional<nlohmann::json>& expected_fingerprint,
                           bool repair = false);

  static bool exists(const std::filesystem::path& dir, StoreKind kind);

  FeatureStore(FeatureStore&&) noexcept;
  FeatureStore& operator=(FeatureStore&&) noexcept;
  ~FeatureStore();

  void put(StoreKey key, std::span<const float> vector);
  void put_text(StoreKey key, std::string text);

  bool has(StoreKey key) const;
  std::vector<float> get(StoreKey key) const;
  std::string get_text(StoreKey key) const;

  // Appends pending entries (sorted by key) and publishes a new index.
  void flush();
  // Flushes, then rewrites the body in key order so that the file bytes
  // depend only on the stored contents.
  void finalize();

  std::size_t size() const;  // durable entries
  std::size_t pending() const;
  std::size_t dim() const { return dim_; }
  StoreKind kind() const { return kind_; }
  const nlohmann::json& fingerprint() const { return fingerprint_; }
  const RecoveryReport& recovery() const { return recovery_; }
  std::vector<StoreKey> keys() const;

  std::filesystem::path bin_path() const;
  std::filesystem::path index_path() const;

 private:
  using Value = std::variant<std::vector<float>, std::string>;
  struct Entry {
    Value value;
    std::uint64_t offset = 0;
  };

  FeatureStore() = default;
  void put_value(StoreKey key, Value value);
  void write_header(std::ostream& out, std::size_t count) const;
  void write_index() const;
  std::string encode(const Value& v) const;

  std::filesystem::path dir_;
  StoreKind kind_ = StoreKind::kRecent;
  std::size_t dim_ = 0;
  nlohmann::json fingerprint_;
  std::map<StoreKey, Entry> durable_;
  std::map<StoreKey, Value> pending_;
  std::uint64_t body_bytes_ = 0;
  RecoveryReport recovery_;
  mutable std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
};

}  // namespace dygrasp
