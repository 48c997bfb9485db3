#pragma once

#include <sstream>
#include <string>

namespace regcast::cli::logging {

// spdlog lives in its own translation unit: the torch headers carry a newer
// fmt than the one the system spdlog is built against.

enum class Level { kInfo, kWarn, kError };

/// Routes output to stderr only, dropping any file sinks.
void reset();
/// Mirrors subsequent messages into `path` (appending) until detach_files().
void attach_file(const std::string& path);
void detach_files();
void write(Level level, const std::string& message);

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
void info(const Args&... args) {
  write(Level::kInfo, cat(args...));
}
template <typename... Args>
void warn(const Args&... args) {
  write(Level::kWarn, cat(args...));
}
template <typename... Args>
void error(const Args&... args) {
  write(Level::kError, cat(args...));
}

}  // namespace regcast::cli::logging
