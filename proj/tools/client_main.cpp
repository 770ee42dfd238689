#include <cstdio>

#include "cli_common.hpp"
#include "mtcd/client.hpp"
#include "mtcd/serialization.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Workload submission client"};
  app.require_subcommand(1);
  auto* submit = app.add_subcommand("submit", "Submit a workload file and wait for every result");
  std::string workload;
  std::string dispatchers;
  std::string events_out;
  std::string results_out;
  std::string level = "info";
  double timeout_s = 3600;
  mtcd::ClientOptions options;
  submit->add_option("--workload", workload, "JSON Lines task file")->required();
  submit->add_option("--dispatchers", dispatchers, "HOST:PORT[,HOST:PORT...]")->required();
  submit->add_option("--credit-multiplier", options.credit_multiplier)->capture_default_str();
  submit->add_option("--max-batch", options.max_batch)->capture_default_str();
  submit->add_option("--timeout-s", timeout_s)->capture_default_str();
  submit->add_option("--events-out", events_out, "Per-task event CSV");
  submit->add_option("--results-out", results_out, "One JSON result per line");
  mtcd::cli::add_log_level(*submit, level);
  CLI11_PARSE(app, argc, argv);
  mtcd::cli::apply_log_level(level);

  try {
    if (!events_out.empty()) options.events_out = events_out;
    mtcd::WorkloadReader reader(workload);
    auto run = mtcd::submit_all(reader, mtcd::parse_endpoint_list(dispatchers), options);
    const mtcd::RunOutcome out = mtcd::wait_all(*run, timeout_s);
    if (!results_out.empty()) {
      std::ofstream f(results_out, std::ios::trunc);
      for (const auto& r : out.results) f << nlohmann::json(r).dump() << "\n";
    }
    const auto& s = out.summary;
    std::printf("tasks %zu success %zu app_failure %zu system_failure %zu timeout %zu lost %zu rejected %zu "
                "lost_to_client %zu\nmakespan_s %.3f throughput_tasks_per_s %.1f\n",
                s.total, s.success, s.app_failure, s.system_failure, s.timeout, s.lost, s.rejected, s.lost_to_client,
                s.makespan_s, s.throughput_tasks_per_s);
    if (s.submission_failed) {
      spdlog::error("submission failed: {} ({} tasks sent)", s.error, run->submitted());
      return 2;
    }
    return s.complete ? 0 : 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
