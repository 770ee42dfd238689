#include <thread>

#include "cli_common.hpp"
#include "mtcd/executor.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Executor agent"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Register with a dispatcher and run tasks");
  std::string dispatcher;
  std::string level = "info";
  mtcd::AgentConfig config;
  std::int64_t backoff_base_ms = 1000;
  std::int64_t backoff_cap_ms = 30000;
  std::uint64_t cache_mb = 1024;
  run->add_option("--dispatcher", dispatcher, "HOST:PORT")->required();
  run->add_option("--slots", config.slots)->capture_default_str();
  run->add_option("--cache-dir", config.cache_dir)->required();
  run->add_option("--cache-mb", cache_mb, "Static cache capacity")->capture_default_str();
  run->add_option("--address", config.address, "Stable identity (default hostname:pid)");
  run->add_option("--backoff-base-ms", backoff_base_ms)->capture_default_str();
  run->add_option("--backoff-cap-ms", backoff_cap_ms)->capture_default_str();
  run->add_option("--max-connect-attempts", config.max_connect_attempts, "Negative means retry forever")
      ->capture_default_str();
  mtcd::cli::add_log_level(*run, level);
  CLI11_PARSE(app, argc, argv);
  mtcd::cli::apply_log_level(level);

  const sigset_t stop_set = mtcd::cli::block_stop_signals();
  try {
    config.dispatcher = mtcd::parse_endpoint(dispatcher);
    config.cache_capacity_bytes = cache_mb << 20;
    config.backoff_base = std::chrono::milliseconds(backoff_base_ms);
    config.backoff_cap = std::chrono::milliseconds(backoff_cap_ms);
    mtcd::Agent agent(config);
    std::thread waiter([&] {
      int sig = 0;
      sigwait(&stop_set, &sig);
      agent.stop();
    });
    const int rc = agent.run();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    return rc;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
