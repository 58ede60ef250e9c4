#include "kronfisher/log.hpp"

#include <iostream>
#include <mutex>

namespace kronfisher {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

void stderr_sink(LogLevel level, std::string_view msg) {
  std::cerr << (level == LogLevel::Warning ? "[warning] " : "[info] ") << msg << '\n';
}

LogSink& sink() {
  static LogSink s = stderr_sink;
  return s;
}

}  // namespace

void set_log_sink(LogSink s) {
  std::lock_guard<std::mutex> lock(sink_mutex());
  sink() = std::move(s);
}

void reset_log_sink() { set_log_sink(stderr_sink); }

void log_message(LogLevel level, std::string_view message) {
  std::lock_guard<std::mutex> lock(sink_mutex());
  if (sink()) sink()(level, message);
}

}  // namespace kronfisher
