#pragma once

#include <string_view>

#include <json.hpp>

namespace dygrasp::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

// Line-delimited JSON on stderr. Thread-safe.
void set_level(Level level);
Level level();

void emit(Level level, std::string_view event, nlohmann::json fields = {});

inline void info(std::string_view event, nlohmann::json fields = {}) {
  emit(Level::kInfo, event, std::move(fields));
}
inline void warn(std::string_view event, nlohmann::json fields = {}) {
  emit(Level::kWarn, event, std::move(fields));
}
inline void debug(std::string_view event, nlohmann::json fields = {}) {
  emit(Level::kDebug, event, std::move(fields));
}

// Test hook: counts of emitted events by name since the last reset.
std::size_t count(std::string_view event);
void reset_counts();

}  // namespace dygrasp::log
