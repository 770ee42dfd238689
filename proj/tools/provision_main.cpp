#include <cstdio>
#include <thread>

#include "cli_common.hpp"
#include "mtcd/process.hpp"
#include "mtcd/provisioner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Pset-granularity provisioner"};
  app.require_subcommand(1);
  auto* start = app.add_subcommand("start", "Acquire an allocation and hold it for its duration");
  int psets = 1;
  int cores_per_pset = 256;
  double scale = 8.0 / 256.0;
  double duration_s = 60;
  std::string dispatcher;
  std::string mode = "simulated";
  std::string boot_model;
  std::string work_dir = "provision";
  std::string executor_bin;
  std::string level = "info";
  start->add_option("--psets", psets)->capture_default_str();
  start->add_option("--cores-per-pset", cores_per_pset)->capture_default_str();
  start->add_option("--scale-factor", scale, "Executor processes per core in real mode")->capture_default_str();
  start->add_option("--duration-s", duration_s)->capture_default_str();
  start->add_option("--dispatcher", dispatcher, "HOST:PORT (real mode)");
  start->add_option("--mode", mode, "real|simulated")->capture_default_str();
  start->add_option("--boot-model", boot_model, "File of 'cores seconds' anchor lines");
  start->add_option("--work-dir", work_dir)->capture_default_str();
  start->add_option("--executor-bin", executor_bin, "Executor program (default: next to this one)");
  mtcd::cli::add_log_level(*start, level);
  CLI11_PARSE(app, argc, argv);
  mtcd::cli::apply_log_level(level);

  const sigset_t stop_set = mtcd::cli::block_stop_signals();
  try {
    mtcd::ProvisionerOptions o;
    if (!boot_model.empty()) o.boot = mtcd::BootModel::load(boot_model);
    if (!dispatcher.empty()) o.dispatcher = mtcd::parse_endpoint(dispatcher);
    o.scale_factor = scale;
    o.work_dir = work_dir;
    if (!executor_bin.empty()) {
      o.executor_binary = executor_bin;
    } else if (auto sibling = mtcd::sibling_program("executor")) {
      o.executor_binary = *sibling;
    }
    const auto m = mtcd::parse_provision_mode(mode);
    mtcd::Provisioner prov(o);
    const mtcd::Allocation& a = prov.request_allocation(psets, cores_per_pset, duration_s, m);
    if (m == mtcd::ProvisionMode::kSimulated) prov.advance_until_ready(a.allocation_id);
    std::printf("allocation %s state %s cores %lld boot_s %.3f\n", a.allocation_id.c_str(), mtcd::to_string(a.state),
                static_cast<long long>(a.total_cores()), a.boot_seconds());
    std::fflush(stdout);
    if (a.state != mtcd::AllocationState::kReady) return 1;
    if (m == mtcd::ProvisionMode::kReal) {
      // Hold until the duration elapses or we are told to stop.
      const double remaining = std::max(0.0, duration_s - a.boot_seconds());
      timespec ts{static_cast<time_t>(remaining), static_cast<long>((remaining - static_cast<time_t>(remaining)) * 1e9)};
      sigtimedwait(&stop_set, nullptr, &ts);
    }
    prov.release(a.allocation_id);
    std::printf("allocation %s released\n", a.allocation_id.c_str());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
