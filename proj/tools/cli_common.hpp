// Bits shared by the command-line tools.

#pragma once

#include <signal.h>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <string>

namespace mtcd::cli {

inline void add_log_level(CLI::App& app, std::string& level) {
  app.add_option("--log-level", level, "trace|debug|info|warn|error|off")->capture_default_str();
}

inline void apply_log_level(const std::string& level) {
  spdlog::set_level(spdlog::level::from_str(level));
  spdlog::set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ [%n] %v");
}

// Blocks SIGINT/SIGTERM in every thread; a dedicated thread waits for them.
inline sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

}  // namespace mtcd::cli
