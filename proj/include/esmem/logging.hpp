#pragma once
// Minimal leveled logging to stderr. Pipelines log progress and degraded
// paths (fallback boundaries, dropped candidates); artifacts never go here.

#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

#include "esmem/errors.hpp"

namespace esmem {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

namespace detail {
inline LogLevel& log_level_ref() {
  static LogLevel level = LogLevel::info;
  return level;
}
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_level_ref() = level; }
inline LogLevel log_level() { return detail::log_level_ref(); }

inline LogLevel parse_log_level(std::string_view name) {
  if (name == "debug") return LogLevel::debug;
  if (name == "info") return LogLevel::info;
  if (name == "warn") return LogLevel::warn;
  if (name == "error") return LogLevel::error;
  if (name == "off") return LogLevel::off;
  throw ConfigError("unknown log level: " + std::string(name));
}

inline void log(LogLevel level, std::string_view msg) {
  if (level < detail::log_level_ref()) return;
  const char* tag = "info";
  switch (level) {
    case LogLevel::debug: tag = "debug"; break;
    case LogLevel::info: tag = "info"; break;
    case LogLevel::warn: tag = "warn"; break;
    case LogLevel::error: tag = "error"; break;
    case LogLevel::off: return;
  }
  std::lock_guard<std::mutex> lock(detail::log_mutex());
  std::cerr << "[esmem][" << tag << "] " << msg << "\n";
}

inline void log_debug(std::string_view msg) { log(LogLevel::debug, msg); }
inline void log_info(std::string_view msg) { log(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log(LogLevel::warn, msg); }
inline void log_error(std::string_view msg) { log(LogLevel::error, msg); }

}  // namespace esmem
