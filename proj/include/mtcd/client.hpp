// Client library: reads workload files, spreads submission over many
// dispatchers under credit-based flow control, and collects results.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mtcd/net.hpp"
#include "mtcd/protocol.hpp"

namespace mtcd {

namespace fs = std::filesystem;

class WorkloadError : public std::runtime_error {
 public:
  WorkloadError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Workload {
  std::string name;
  std::int64_t created_at = 0;  // file mtime, epoch seconds
  std::vector<TaskDescriptor> tasks;
};

// Pull-based stream of tasks so very large workloads need not be resident.
class TaskSource {
 public:
  virtual ~TaskSource() = default;
  virtual std::optional<TaskDescriptor> next() = 0;
};

class VectorTaskSource : public TaskSource {
 public:
  explicit VectorTaskSource(std::vector<TaskDescriptor> tasks) : tasks_(std::move(tasks)) {}
  std::optional<TaskDescriptor> next() override {
    if (pos_ >= tasks_.size()) return std::nullopt;
    return std::move(tasks_[pos_++]);
  }

 private:
  std::vector<TaskDescriptor> tasks_;
  std::size_t pos_ = 0;
};

// One JSON task record per line; blank lines and lines starting with '#'
// are skipped. Throws WorkloadError naming the offending line.
class WorkloadReader : public TaskSource {
 public:
  explicit WorkloadReader(const fs::path& path);
  std::optional<TaskDescriptor> next() override;

 private:
  std::ifstream in_;
  std::size_t line_no_ = 0;
  std::unordered_set<std::string> seen_;
};

Workload load_workload(const fs::path& path);
std::string format_task_line(const TaskDescriptor& task);

struct DispatcherHandle {
  Endpoint address;
  int advertised_slots = 0;
  int outstanding = 0;
  int credit_limit = 0;
  bool reachable = true;
  std::int64_t sent_total = 0;
  std::int64_t finalized_total = 0;
};

// Chooses the dispatcher for each next task: the reachable one with the most
// free credit, ties broken round-robin; none when every credit is used.
class CreditBalancer {
 public:
  explicit CreditBalancer(std::vector<DispatcherHandle> handles);

  std::optional<std::size_t> pick();
  void on_sent(std::size_t i);
  void on_finalized(std::size_t i);
  void mark_unreachable(std::size_t i);
  bool any_reachable() const;

  const std::vector<DispatcherHandle>& handles() const { return handles_; }
  DispatcherHandle& handle(std::size_t i) { return handles_[i]; }

 private:
  std::vector<DispatcherHandle> handles_;
  std::size_t rr_ = 0;
};

int credit_for(int advertised_slots, double multiplier);

struct ClientOptions {
  double credit_multiplier = 3.0;
  // Consecutive tasks for one dispatcher are coalesced into SUBMIT frames of
  // at most this many tasks.
  std::size_t max_batch = 256;
  std::optional<fs::path> events_out;
  // Overrides the credit limit derived from STATS_REPLY (testing, tuning).
  std::optional<int> credit_limit_override;
  std::chrono::milliseconds connect_timeout{5000};
};

struct RunSummary {
  std::size_t total = 0;
  std::size_t success = 0;
  std::size_t app_failure = 0;
  std::size_t system_failure = 0;
  std::size_t timeout = 0;
  std::size_t lost = 0;
  std::size_t rejected = 0;
  std::size_t lost_to_client = 0;
  double makespan_s = 0;
  double throughput_tasks_per_s = 0;
  bool complete = false;
  bool submission_failed = false;
  std::string error;
  std::vector<std::int64_t> tasks_per_dispatcher;
  std::vector<int> max_outstanding_per_dispatcher;
};

struct RunOutcome {
  std::vector<TaskResult> results;
  RunSummary summary;
};

// State of one submission run; returned by submit_all, consumed by wait_all.
class Run {
 public:
  ~Run();
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;

  std::size_t submitted() const;
  std::size_t finalized() const;
  bool submission_failed() const;
  // Outstanding count observed right after every send, per dispatcher.
  std::vector<std::vector<int>> outstanding_samples() const;

 private:
  friend std::unique_ptr<Run> submit_all(TaskSource&, const std::vector<Endpoint>&, const ClientOptions&);
  friend RunOutcome wait_all(Run&, double);
  struct Pending {
    TaskDescriptor task;
    std::size_t dispatcher = 0;
    double t_sent = 0;
  };

  Run(std::vector<DispatcherHandle> handles, ClientOptions options);
  void reader_loop(std::size_t index);
  void lose_dispatcher_locked(std::size_t index, const std::string& why);
  // Sends tasks while credit allows; returns false when the source is done
  // and nothing waits for resubmission.
  bool pump_locked(std::unique_lock<std::mutex>& lock, TaskSource* source);
  void flush_locked(std::unique_lock<std::mutex>& lock);
  void accept_result_locked(std::size_t index, TaskResult result);
  void write_events_locked(const TaskResult& result, double t_sent);

  ClientOptions options_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  CreditBalancer balancer_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<std::thread> readers_;
  std::vector<std::vector<TaskDescriptor>> batches_;
  std::unordered_map<std::string, Pending> in_flight_;
  std::vector<TaskDescriptor> resubmit_;
  std::vector<TaskResult> results_;
  std::unordered_set<std::string> finalized_ids_;
  std::vector<std::vector<int>> samples_;
  std::vector<int> max_outstanding_;
  std::size_t submitted_ = 0;
  std::size_t rejected_ = 0;
  bool source_done_ = false;
  bool failed_ = false;
  bool closing_ = false;
  std::string error_;
  std::ofstream events_;
};

// Connects to every dispatcher, learns its slots, then streams the tasks
// out. Blocks until every task is sent (or submission fails).
std::unique_ptr<Run> submit_all(TaskSource& tasks, const std::vector<Endpoint>& dispatchers,
                                const ClientOptions& options = {});
std::unique_ptr<Run> submit_all(const Workload& workload, const std::vector<Endpoint>& dispatchers,
                                const ClientOptions& options = {});

// Blocks until every submitted task is finalized or `timeout_s` passes.
RunOutcome wait_all(Run& run, double timeout_s);

// Summary arithmetic shared by wait_all and tests.
RunSummary summarize(const std::vector<TaskResult>& results);

}  // namespace mtcd
