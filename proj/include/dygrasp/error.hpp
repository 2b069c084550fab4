#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dygrasp {

// Each kind maps to a distinct CLI exit code (see exit_code()).
enum class ErrorKind {
  kInvalidArgument,
  kInvalidConfig,
  kData,
  kMissingCache,
  kStaleCache,
  kCorruptCache,
  kBackend,
  kTransport,
  kCapability,
  kContextOverflow,
  kTraining,
  kInterrupted,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Retryable errors are transient transport failures.
  bool retryable() const noexcept { return kind_ == ErrorKind::kTransport; }

 private:
  ErrorKind kind_;
};

inline std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kInvalidConfig: return "invalid_config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kMissingCache: return "missing_cache";
    case ErrorKind::kStaleCache: return "stale_cache";
    case ErrorKind::kCorruptCache: return "corrupt_cache";
    case ErrorKind::kBackend: return "backend";
    case ErrorKind::kTransport: return "transport";
    case ErrorKind::kCapability: return "capability";
    case ErrorKind::kContextOverflow: return "context_overflow";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kInterrupted: return "interrupted";
  }
  return "unknown";
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return 2;
    case ErrorKind::kInvalidConfig: return 3;
    case ErrorKind::kData: return 4;
    case ErrorKind::kMissingCache: return 5;
    case ErrorKind::kStaleCache: return 6;
    case ErrorKind::kCorruptCache: return 7;
    case ErrorKind::kBackend:
    case ErrorKind::kTransport:
    case ErrorKind::kCapability:
    case ErrorKind::kContextOverflow: return 8;
    case ErrorKind::kTraining: return 9;
    case ErrorKind::kInterrupted: return 10;
  }
  return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace dygrasp
