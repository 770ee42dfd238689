#include <cstdio>

#include "cli_common.hpp"
#include "mtcd/bench.hpp"

namespace {

void write_report(const mtcd::BenchReport& r, const std::string& out) {
  for (const auto fmt : {mtcd::ReportFormat::kCsv, mtcd::ReportFormat::kPlotData}) {
    for (const auto& p : mtcd::emit_report(r, out, fmt)) std::printf("wrote %s\n", p.c_str());
  }
  for (const auto& [k, v] : r.derived) std::printf("%s %.6g\n", k.c_str(), v);
  if (r.partial) std::printf("partial run\n");
}

std::optional<std::filesystem::path> executor_binary(const std::string& flag) {
  if (!flag.empty()) return std::filesystem::path(flag);
  return mtcd::sibling_program("executor");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Throughput, efficiency and filesystem benchmarks"};
  app.require_subcommand(1);
  std::string out = "bench-out";
  std::string level = "warn";
  std::string executor_bin;
  std::string work_dir = "bench-work";
  app.add_option("--out", out, "Report directory")->capture_default_str();
  app.add_option("--executor-bin", executor_bin, "Executor program (default: next to this one)");
  app.add_option("--work-dir", work_dir)->capture_default_str();
  mtcd::cli::add_log_level(app, level);

  mtcd::ThroughputOptions tp;
  auto* throughput = app.add_subcommand("throughput", "Sleep-0 dispatch throughput");
  throughput->add_option("--slots", tp.slots)->capture_default_str();
  throughput->add_option("--tasks", tp.num_tasks)->capture_default_str();
  throughput->add_option("--dispatchers", tp.dispatchers)->capture_default_str();
  throughput->add_flag("--simulated", tp.simulated, "Virtual executors; measures the dispatcher loop alone");
  throughput->add_option("--timeout-s", tp.timeout_s)->capture_default_str();

  mtcd::EfficiencyOptions ef;
  auto* eff = app.add_subcommand("efficiency", "Efficiency against task length");
  eff->add_option("--slots", ef.slots)->capture_default_str();
  eff->add_option("--task-lengths", ef.task_lengths_s, "Seconds")->delimiter(',');
  eff->add_option("--tasks-per-point", ef.tasks_per_point, "0 means 10 per slot")->capture_default_str();
  eff->add_flag("--simulated", ef.simulated);

  mtcd::FsOpsOptions fo;
  std::string fs_op = "create_file";
  std::string layout = "single_dir";
  std::string target = ".";
  auto* fsops = app.add_subcommand("fsops", "Concurrent metadata operations");
  fsops->add_option("--op", fs_op, "create_file|create_dir|invoke_script|noop_task")->capture_default_str();
  fsops->add_option("--concurrency", fo.concurrency)->capture_default_str();
  fsops->add_option("--layout", layout, "single_dir|many_dirs")->capture_default_str();
  fsops->add_option("--target-dir", target)->capture_default_str();
  fsops->add_option("--ops-per-worker", fo.ops_per_worker)->capture_default_str();
  fsops->add_flag("--threads", fo.use_threads, "Threads instead of processes");

  mtcd::ReadWriteOptions rw;
  std::string rw_mode = "read";
  auto* readwrite = app.add_subcommand("readwrite", "Bulk read or read+write throughput");
  readwrite->add_option("--file-size", rw.file_size_bytes, "Bytes")->capture_default_str();
  readwrite->add_option("--concurrency", rw.concurrency)->capture_default_str();
  readwrite->add_option("--mode", rw_mode, "read|read_write")->capture_default_str();
  readwrite->add_option("--block-bytes", rw.block_bytes)->capture_default_str();
  readwrite->add_option("--target-dir", target)->capture_default_str();
  readwrite->add_flag("--threads", rw.use_threads);

  CLI11_PARSE(app, argc, argv);
  mtcd::cli::apply_log_level(level);

  try {
    if (*throughput) {
      tp.executor_binary = executor_binary(executor_bin);
      tp.work_dir = work_dir;
      tp.events_out = std::filesystem::path(out) / "throughput-events.csv";
      std::filesystem::create_directories(out);
      write_report(mtcd::bench_dispatch_throughput(tp), out);
    } else if (*eff) {
      ef.executor_binary = executor_binary(executor_bin);
      ef.work_dir = work_dir;
      write_report(mtcd::bench_efficiency_sweep(ef), out);
    } else if (*fsops) {
      fo.op = mtcd::parse_fs_op(fs_op);
      fo.layout = mtcd::parse_fs_layout(layout);
      fo.target_dir = target;
      write_report(mtcd::bench_fsops(fo), out);
    } else if (*readwrite) {
      rw.mode = mtcd::parse_rw_mode(rw_mode);
      rw.target_dir = target;
      write_report(mtcd::bench_readwrite(rw), out);
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
