#pragma once

#include <atomic>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace cag {

enum class LogLevel { kInfo, kWarning, kError };

using LogSink = std::function<void(LogLevel, const std::string&)>;

namespace detail {
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, const std::string& msg) {
    const char* tag = level == LogLevel::kInfo      ? "info"
                      : level == LogLevel::kWarning ? "warning"
                                                    : "error";
    std::cerr << "[cag " << tag << "] " << msg << '\n';
  };
  return sink;
}
inline std::atomic<std::size_t>& warning_count() {
  static std::atomic<std::size_t> n{0};
  return n;
}
}  // namespace detail

/// Replaces the process-wide log sink; returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(detail::log_mutex());
  std::swap(detail::log_sink(), sink);
  return sink;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level == LogLevel::kWarning) ++detail::warning_count();
  std::lock_guard lock(detail::log_mutex());
  if (detail::log_sink()) detail::log_sink()(level, msg);
}

inline void log_warning(const std::string& msg) { log(LogLevel::kWarning, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::kInfo, msg); }

inline std::size_t warnings_logged() { return detail::warning_count().load(); }

}  // namespace cag
