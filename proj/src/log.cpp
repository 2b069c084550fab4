#include "dygrasp/log.hpp"

#include <atomic>
#include <iostream>
#include <map>
#include <mutex>
#include <string>

namespace dygrasp::log {
namespace {

std::atomic<Level> g_level{Level::kWarn};
std::mutex g_mutex;
std::map<std::string, std::size_t, std::less<>> g_counts;

std::string_view level_name(Level level) {
  switch (level) {
    case Level::kDebug: return "debug";
    case Level::kInfo: return "info";
    case Level::kWarn: return "warn";
    case Level::kError: return "error";
  }
  return "info";
}

}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void emit(Level lvl, std::string_view event, nlohmann::json fields) {
  std::lock_guard lock(g_mutex);
  ++g_counts[std::string(event)];
  if (lvl < g_level.load()) return;
  nlohmann::json line = {{"level", level_name(lvl)}, {"event", event}};
  if (fields.is_object()) {
    for (auto& [k, v] : fields.items()) line[k] = v;
  }
  std::cerr << line.dump() << '\n';
}

std::size_t count(std::string_view event) {
  std::lock_guard lock(g_mutex);
  auto it = g_counts.find(event);
  return it == g_counts.end() ? 0 : it->second;
}

void reset_counts() {
  std::lock_guard lock(g_mutex);
  g_counts.clear();
}

}  // namespace dygrasp::log
