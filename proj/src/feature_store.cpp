#include "dygrasp/feature_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dygrasp/error.hpp"
#include "dygrasp/log.hpp"

namespace dygrasp {
namespace {

constexpr char kMagic[8] = {'D', 'Y', 'G', 'F', 'S', '0', '0', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return v;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingCache, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes `bytes` at `offset` (or appends when offset < 0) and fsyncs.
void write_synced(const std::filesystem::path& p, const std::string& bytes,
                  long long offset, bool truncate) {
  int flags = O_WRONLY | O_CREAT;
  if (truncate) flags |= O_TRUNC;
  if (offset < 0) flags |= O_APPEND;
  int fd = ::open(p.c_str(), flags, 0644);
  if (fd < 0) fail(ErrorKind::kData, "cannot open " + p.string() + " for writing");
  if (offset >= 0 && ::lseek(fd, offset, SEEK_SET) < 0) {
    ::close(fd);
    fail(ErrorKind::kData, "seek failed on " + p.string());
  }
  std::size_t done = 0;
  while (done < bytes.size()) {
    auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      fail(ErrorKind::kData, "write failed on " + p.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

void replace_atomically(const std::filesystem::path& p, const std::string& bytes) {
  auto tmp = p;
  tmp += ".tmp";
  write_synced(tmp, bytes, 0, true);
  std::filesystem::rename(tmp, p);
}

StoreKind parse_kind(const std::string& s) {
  if (s == "recent") return StoreKind::kRecent;
  if (s == "global") return StoreKind::kGlobal;
  if (s == "descriptions") return StoreKind::kDescriptions;
  fail(ErrorKind::kCorruptCache, "unknown store kind `" + s + "`");
}

}  // namespace

std::string_view store_kind_name(StoreKind kind) {
  switch (kind) {
    case StoreKind::kRecent: return "recent";
    case StoreKind::kGlobal: return "global";
    case StoreKind::kDescriptions: return "descriptions";
  }
  return "recent";
}

std::string_view store_file_stem(StoreKind kind) {
  switch (kind) {
    case StoreKind::kRecent: return "recent";
    case StoreKind::kGlobal: return "global";
    case StoreKind::kDescriptions: return "desc";
  }
  return "recent";
}

FeatureStore::FeatureStore(FeatureStore&&) noexcept = default;
FeatureStore& FeatureStore::operator=(FeatureStore&&) noexcept = default;
FeatureStore::~FeatureStore() = default;

std::filesystem::path FeatureStore::bin_path() const {
  return dir_ / (std::string(store_file_stem(kind_)) + ".bin");
}

std::filesystem::path FeatureStore::index_path() const {
  return dir_ / (std::string(store_file_stem(kind_)) + ".idx.json");
}

bool FeatureStore::exists(const std::filesystem::path& dir, StoreKind kind) {
  auto stem = std::string(store_file_stem(kind));
  return std::filesystem::exists(dir / (stem + ".bin")) &&
         std::filesystem::exists(dir / (stem + ".idx.json"));
}

void FeatureStore::write_header(std::ostream& out, std::size_t count) const {
  nlohmann::json h = {{"kind", store_kind_name(kind_)},
                      {"dim", dim_},
                      {"count", count},
                      {"fingerprint", fingerprint_}};
  std::string json = h.dump();
  if (json.size() + 12 > kHeaderBytes) {
    fail(ErrorKind::kInvalidArgument, "store header too large");
  }
  std::string block(kMagic, kMagic + 8);
  put_u32(block, static_cast<std::uint32_t>(json.size()));
  block += json;
  block.resize(kHeaderBytes, ' ');
  out << block;
}

void FeatureStore::write_index() const {
  nlohmann::json keys = nlohmann::json::array();
  for (const auto& [k, e] : durable_) keys.push_back({k.node, k.item, e.offset});
  nlohmann::json idx = {{"kind", store_kind_name(kind_)},
                        {"count", durable_.size()},
                        {"body_bytes", body_bytes_},
                        {"keys", std::move(keys)}};
  replace_atomically(index_path(), idx.dump());
}

std::string FeatureStore::encode(const Value& v) const {
  std::string out;
  if (const auto* vec = std::get_if<std::vector<float>>(&v)) {
    out.reserve(vec->size() * 4);
    for (float f : *vec) put_u32(out, std::bit_cast<std::uint32_t>(f));
  } else {
    const auto& text = std::get<std::string>(v);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
  }
  return out;
}

FeatureStore FeatureStore::create(const std::filesystem::path& dir, StoreKind kind,
                                  std::size_t dim, nlohmann::json fingerprint) {
  std::filesystem::create_directories(dir);
  FeatureStore s;
  s.dir_ = dir;
  s.kind_ = kind;
  s.dim_ = kind == StoreKind::kDescriptions ? 0 : dim;
  s.fingerprint_ = std::move(fingerprint);
  std::ostringstream header;
  s.write_header(header, 0);
  write_synced(s.bin_path(), header.str(), 0, true);
  s.write_index();
  return s;
}

FeatureStore FeatureStore::open(const std::filesystem::path& dir, StoreKind kind,
                                const std::optional<nlohmann::json>& expected_fingerprint,
                                bool repair) {
  FeatureStore s;
  s.dir_ = dir;
  s.kind_ = kind;
  if (!exists(dir, kind)) {
    fail(ErrorKind::kMissingCache, "no " + std::string(store_kind_name(kind)) +
                                       " cache in " + dir.string());
  }
  const std::string bin = read_all(s.bin_path());
  if (bin.size() < kHeaderBytes || std::memcmp(bin.data(), kMagic, 8) != 0) {
    fail(ErrorKind::kCorruptCache, s.bin_path().string() + ": bad header");
  }
  const std::uint32_t hlen = get_u32(bin.data() + 8);
  if (hlen + 12 > kHeaderBytes) fail(ErrorKind::kCorruptCache, "bad header length");
  nlohmann::json header;
  nlohmann::json index;
  try {
    header = nlohmann::json::parse(bin.substr(12, hlen));
    index = nlohmann::json::parse(read_all(s.index_path()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptCache, s.bin_path().string() + ": " + e.what());
  }
  if (parse_kind(header.at("kind").get<std::string>()) != kind) {
    fail(ErrorKind::kCorruptCache, s.bin_path().string() + ": kind mismatch");
  }
  s.dim_ = header.at("dim").get<std::size_t>();
  s.fingerprint_ = header.at("fingerprint");
  if (expected_fingerprint && *expected_fingerprint != s.fingerprint_) {
    fail(ErrorKind::kStaleCache,
         "stale " + std::string(store_kind_name(kind)) + " cache in " + dir.string() +
             ": fingerprint " + s.fingerprint_.dump() + " does not match " +
             expected_fingerprint->dump() + "; rerun the reasoning stage");
  }

  const std::string_view body(bin.data() + kHeaderBytes, bin.size() - kHeaderBytes);
  s.recovery_.header_count = header.at("count").get<std::size_t>();
  s.recovery_.index_count = index.at("count").get<std::size_t>();

  // Entries in index order are laid out back to back; keep the intact prefix.
  struct Loc {
    StoreKey key;
    std::uint64_t offset;
  };
  std::vector<Loc> locs;
  for (const auto& row : index.at("keys")) {
    locs.push_back({{row[0].get<std::uint64_t>(), row[1].get<std::uint64_t>()},
                    row[2].get<std::uint64_t>()});
  }
  std::sort(locs.begin(), locs.end(),
            [](const Loc& a, const Loc& b) { return a.offset < b.offset; });
  std::uint64_t end = 0;
  for (const auto& loc : locs) {
    std::uint64_t len = 0;
    if (kind == StoreKind::kDescriptions) {
      if (loc.offset + 4 > body.size()) break;
      len = 4 + get_u32(body.data() + loc.offset);
    } else {
      len = 4 * s.dim_;
    }
    if (loc.offset + len > body.size()) break;
    Entry e;
    e.offset = loc.offset;
    if (kind == StoreKind::kDescriptions) {
      e.value = std::string(body.substr(loc.offset + 4, len - 4));
    } else {
      std::vector<float> v(s.dim_);
      for (std::size_t i = 0; i < s.dim_; ++i) {
        v[i] = std::bit_cast<float>(get_u32(body.data() + loc.offset + 4 * i));
      }
      e.value = std::move(v);
    }
    if (!s.durable_.emplace(loc.key, std::move(e)).second) {
      fail(ErrorKind::kCorruptCache, s.index_path().string() + ": duplicate key");
    }
    end = std::max(end, loc.offset + len);
  }
  s.recovery_.durable_count = s.durable_.size();
  s.recovery_.truncated = s.durable_.size() < locs.size();
  s.recovery_.trailing_bytes = body.size() > end ? body.size() - end : 0;
  s.body_bytes_ = end;

  if (s.recovery_.truncated && !repair) {
    fail(ErrorKind::kCorruptCache,
         s.bin_path().string() + " is truncated: " + std::to_string(locs.size()) +
             " indexed entries, resumable prefix " +
             std::to_string(s.recovery_.durable_count) + "; rerun with --resume");
  }
  if (s.recovery_.truncated || s.recovery_.trailing_bytes > 0 ||
      s.recovery_.header_count != s.recovery_.index_count) {
    log::warn("cache_recovered", {{"path", s.bin_path().string()},
                                  {"indexed", locs.size()},
                                  {"durable", s.recovery_.durable_count},
                                  {"trailing_bytes", s.recovery_.trailing_bytes}});
    if (repair) {
      std::filesystem::resize_file(s.bin_path(), kHeaderBytes + s.body_bytes_);
      std::ostringstream h;
      s.write_header(h, s.durable_.size());
      write_synced(s.bin_path(), h.str(), 0, false);
      s.write_index();
    }
  }
  return s;
}

void FeatureStore::put_value(StoreKey key, Value value) {
  std::lock_guard lock(*mutex_);
  if (auto it = durable_.find(key); it != durable_.end()) {
    if (it->second.value == value) return;
    fail(ErrorKind::kInvalidArgument,
         "key collision (" + std::to_string(key.node) + ", " +
             std::to_string(key.item) + ") with a different value");
  }
  auto [it, inserted] = pending_.emplace(key, value);
  if (!inserted && it->second != value) {
    fail(ErrorKind::kInvalidArgument,
         "key collision (" + std::to_string(key.node) + ", " +
             std::to_string(key.item) + ") with a different value");
  }
}

void FeatureStore::put(StoreKey key, std::span<const float> vector) {
  if (kind_ == StoreKind::kDescriptions) {
    fail(ErrorKind::kInvalidArgument, "description store holds texts");
  }
  if (vector.size() != dim_) {
    fail(ErrorKind::kInvalidArgument, "dim mismatch: got " +
                                          std::to_string(vector.size()) +
                                          ", store has " + std::to_string(dim_));
  }
  put_value(key, std::vector<float>(vector.begin(), vector.end()));
}

void FeatureStore::put_text(StoreKey key, std::string text) {
  if (kind_ != StoreKind::kDescriptions) {
    fail(ErrorKind::kInvalidArgument, "vector store cannot hold texts");
  }
  put_value(key, std::move(text));
}

bool FeatureStore::has(StoreKey key) const {
  std::lock_guard lock(*mutex_);
  return durable_.contains(key);
}

std::vector<float> FeatureStore::get(StoreKey key) const {
  std::lock_guard lock(*mutex_);
  auto it = durable_.find(key);
  if (it == durable_.end()) {
    fail(ErrorKind::kMissingCache, "missing cached feature for (node " +
                                       std::to_string(key.node) + ", " +
                                       std::to_string(key.item) + ")");
  }
  return std::get<std::vector<float>>(it->second.value);
}

std::string FeatureStore::get_text(StoreKey key) const {
  std::lock_guard lock(*mutex_);
  auto it = durable_.find(key);
  if (it == durable_.end()) {
    fail(ErrorKind::kMissingCache, "missing cached description for (node " +
                                       std::to_string(key.node) + ", " +
                                       std::to_string(key.item) + ")");
  }
  return std::get<std::string>(it->second.value);
}

void FeatureStore::flush() {
  std::lock_guard lock(*mutex_);
  if (pending_.empty()) return;
  std::string bytes;
  std::uint64_t offset = body_bytes_;
  std::vector<std::pair<StoreKey, Entry>> added;
  for (auto& [key, value] : pending_) {
    std::string rec = encode(value);
    added.push_back({key, Entry{std::move(value), offset}});
    offset += rec.size();
    bytes += rec;
  }
  pending_.clear();
  write_synced(bin_path(), bytes, -1, false);
  body_bytes_ = offset;
  for (auto& [k, e] : added) durable_.emplace(k, std::move(e));
  std::ostringstream h;
  write_header(h, durable_.size());
  write_synced(bin_path(), h.str(), 0, false);
  write_index();
}

void FeatureStore::finalize() {
  flush();
  std::lock_guard lock(*mutex_);
  std::ostringstream out;
  write_header(out, durable_.size());
  std::uint64_t offset = 0;
  for (auto& [key, e] : durable_) {
    std::string rec = encode(e.value);
    e.offset = offset;
    offset += rec.size();
    out << rec;
  }
  body_bytes_ = offset;
  replace_atomically(bin_path(), out.str());
  write_index();
}

std::size_t FeatureStore::size() const {
  std::lock_guard lock(*mutex_);
  return durable_.size();
}

std::size_t FeatureStore::pending() const {
  std::lock_guard lock(*mutex_);
  return pending_.size();
}

std::vector<StoreKey> FeatureStore::keys() const {
  std::lock_guard lock(*mutex_);
  std::vector<StoreKey> out;
  for (const auto& [k, e] : durable_) out.push_back(k);
  return out;
}

}  // namespace dygrasp
