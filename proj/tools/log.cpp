#include "log.hpp"

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/dist_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

namespace regcast::cli::logging {

namespace {

constexpr const char* kPattern = "[%Y-%m-%d %H:%M:%S] [%l] %v";

std::shared_ptr<spdlog::sinks::dist_sink_mt> sinks() {
  static auto s = std::make_shared<spdlog::sinks::dist_sink_mt>();
  return s;
}

spdlog::logger& logger() {
  static auto l = [] {
    auto p = std::make_shared<spdlog::logger>("regcast", sinks());
    p->set_pattern(kPattern);
    p->flush_on(spdlog::level::info);
    return p;
  }();
  return *l;
}

}  // namespace

void reset() {
  auto err = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  err->set_pattern(kPattern);
  sinks()->set_sinks({err});
}

void attach_file(const std::string& path) {
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>(path);
  file->set_pattern(kPattern);
  sinks()->add_sink(file);
}

void detach_files() {
  auto all = sinks()->sinks();
  if (!all.empty()) sinks()->set_sinks({all.front()});
}

void write(Level level, const std::string& message) {
  switch (level) {
    case Level::kInfo: logger().info(message); break;
    case Level::kWarn: logger().warn(message); break;
    case Level::kError: logger().error(message); break;
  }
}

}  // namespace regcast::cli::logging
