// Benchmark harness: local dispatcher/executor stacks, throughput and
// efficiency runs, filesystem microbenchmarks, CSV and plot-data output.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mtcd/client.hpp"
#include "mtcd/dispatcher_server.hpp"
#include "mtcd/executor.hpp"
#include "mtcd/metrics.hpp"
#include "mtcd/process.hpp"

namespace mtcd {

struct MachineSpec {
  std::string hostname;
  std::string kernel;
  std::string cpu_model;
  unsigned cpus = 0;
  std::string compiler;

  static MachineSpec detect();
  std::string csv_row() const;
};

struct Aggregates {
  std::size_t count = 0;
  double mean = 0;
  double stddev = 0;  // population
  double min = 0;
  double max = 0;
  double p50 = 0;
  double p90 = 0;
  double p99 = 0;
};

// Nearest-rank percentile of an unsorted sample; p in (0, 100].
double percentile(std::vector<double> values, double p);
Aggregates aggregate(const std::vector<double>& values);

struct Series {
  std::string name;
  std::string x_label;
  std::string y_label;
  std::vector<std::pair<double, double>> points;
};

struct BenchReport {
  std::string benchmark;
  std::string param_set_id;
  std::map<std::string, std::string> parameters;
  std::vector<double> samples_ms;
  std::map<std::string, double> derived;
  std::vector<EfficiencyPoint> efficiency_points;
  std::vector<Series> series;
  bool partial = false;
  MachineSpec machine;

  Aggregates aggregates() const { return aggregate(samples_ms); }
};

enum class ReportFormat { kCsv, kPlotData };

// Returns the files written under `out_dir`. Output depends only on the report.
std::vector<std::filesystem::path> emit_report(const BenchReport& report, const std::filesystem::path& out_dir,
                                               ReportFormat format);

// ---------------------------------------------------------------------------
// Local stacks.

struct LocalStackOptions {
  int dispatchers = 1;
  int executors_per_dispatcher = 4;
  int slots_per_executor = 1;
  // Executors as separate processes when set, else in-process agents.
  std::optional<std::filesystem::path> executor_binary;
  std::filesystem::path work_dir;
  DispatcherConfig config;
  bool dispatcher_event_log = false;
};

class LocalStack {
 public:
  explicit LocalStack(LocalStackOptions options);
  ~LocalStack();
  LocalStack(const LocalStack&) = delete;
  LocalStack& operator=(const LocalStack&) = delete;

  std::vector<Endpoint> endpoints() const;
  DispatcherServer& dispatcher(std::size_t i) { return *servers_[i]; }
  Agent* agent(std::size_t i) { return i < agents_.size() ? agents_[i].get() : nullptr; }
  ChildProcess* executor_process(std::size_t i) { return i < processes_.size() ? &processes_[i] : nullptr; }
  std::size_t executor_count() const { return agents_.size() + processes_.size(); }
  int total_slots() const;
  // Blocks until every executor is registered; false on timeout.
  bool wait_registered(double timeout_s);
  void stop();

 private:
  LocalStackOptions options_;
  std::vector<std::unique_ptr<DispatcherServer>> servers_;
  std::vector<std::thread> server_threads_;
  std::vector<std::unique_ptr<Agent>> agents_;
  std::vector<std::thread> agent_threads_;
  std::vector<ChildProcess> processes_;
  bool stopped_ = false;
};

// Full path of `name` on PATH, or `name` itself.
std::string resolve_program(const std::string& name);

std::vector<TaskDescriptor> sleep_tasks(std::int64_t count, double seconds, const std::string& prefix = "t");

// Completions per second over the middle 80% of finish times.
double sustained_throughput(std::vector<double> finish_ms);

struct ThroughputOptions {
  int slots = 64;
  std::int64_t num_tasks = 50000;
  int dispatchers = 1;
  bool simulated = false;
  std::optional<std::filesystem::path> executor_binary;
  std::filesystem::path work_dir = "bench-work";
  double timeout_s = 600;
  std::optional<std::filesystem::path> events_out;
};

BenchReport bench_dispatch_throughput(const ThroughputOptions& options);

struct EfficiencyOptions {
  int slots = 64;
  std::vector<double> task_lengths_s{0.25, 0.5, 1, 2, 4};
  // Tasks per point; 0 means 10 per slot.
  std::int64_t tasks_per_point = 0;
  bool simulated = false;
  std::optional<std::filesystem::path> executor_binary;
  std::filesystem::path work_dir = "bench-work";
  // Sleep-0 tasks used to measure the per-task overhead; 0 means 10 per slot.
  std::int64_t overhead_tasks = 0;
};

// Derived metrics include "overhead_ms" and, per point, "model_t=<t>".
BenchReport bench_efficiency_sweep(const EfficiencyOptions& options);

// ---------------------------------------------------------------------------
// Filesystem microbenchmarks.

enum class FsOp { kCreateFile, kCreateDir, kInvokeScript, kNoopTask };
enum class FsLayout { kSingleDir, kManyDirs };
enum class RwMode { kRead, kReadWrite };

FsOp parse_fs_op(const std::string& s);
FsLayout parse_fs_layout(const std::string& s);
RwMode parse_rw_mode(const std::string& s);
const char* to_string(FsOp op);
const char* to_string(FsLayout layout);
const char* to_string(RwMode mode);

struct FsOpsOptions {
  FsOp op = FsOp::kCreateFile;
  int concurrency = 64;
  FsLayout layout = FsLayout::kSingleDir;
  std::filesystem::path target_dir;
  // Operations per worker; every one is a sample.
  int ops_per_worker = 1;
  bool use_threads = false;
};

BenchReport bench_fsops(const FsOpsOptions& options);

struct ReadWriteOptions {
  std::uint64_t file_size_bytes = 10ull << 20;
  int concurrency = 1;
  RwMode mode = RwMode::kRead;
  std::size_t block_bytes = 131072;
  std::filesystem::path target_dir;
  bool use_threads = false;
  // Drop each input from the page cache before reading (best effort).
  bool drop_cache = true;
};

// Derived "aggregate_mb_per_s" = total bytes / slowest worker's time.
BenchReport bench_readwrite(const ReadWriteOptions& options);

}  // namespace mtcd
