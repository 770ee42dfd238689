#include <thread>

#include "cli_common.hpp"
#include "mtcd/dispatcher_server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Task dispatcher service"};
  app.require_subcommand(1);
  auto* serve = app.add_subcommand("serve", "Accept executors and clients");
  std::string bind = "0.0.0.0:7000";
  std::string log_dir;
  std::string level = "info";
  mtcd::DispatcherConfig config;
  serve->add_option("--bind", bind, "HOST:PORT")->capture_default_str();
  serve->add_option("--log-dir", log_dir, "Directory for events.csv");
  serve->add_option("--heartbeat-ms", config.heartbeat_interval_ms)->capture_default_str();
  serve->add_option("--missed-heartbeats", config.missed_heartbeats)->capture_default_str();
  serve->add_option("--suspend-failures", config.suspend_failures)->capture_default_str();
  serve->add_option("--suspend-window-ms", config.suspend_window_ms)->capture_default_str();
  serve->add_option("--retries", config.default_retries, "Default retry budget per task")->capture_default_str();
  mtcd::cli::add_log_level(*serve, level);
  CLI11_PARSE(app, argc, argv);
  mtcd::cli::apply_log_level(level);

  const sigset_t stop_set = mtcd::cli::block_stop_signals();
  try {
    mtcd::DispatcherServer::Options o;
    o.bind = mtcd::parse_endpoint(bind);
    o.config = config;
    if (!log_dir.empty()) o.log_dir = log_dir;
    mtcd::DispatcherServer server(o);
    std::thread waiter([&] {
      int sig = 0;
      sigwait(&stop_set, &sig);
      server.stop();
    });
    server.run();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
