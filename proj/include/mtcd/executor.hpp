// Executor agent: registers with one dispatcher, runs up to `slots` tasks
// at a time by forking the application, stages data through the local
// cache and reports exit codes with timing.

#pragma once

#include <sys/types.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mtcd/cache.hpp"
#include "mtcd/net.hpp"
#include "mtcd/protocol.hpp"

namespace mtcd {

// Runs single tasks inside per-task sandboxes under `<cache_dir>/tasks/`.
class TaskRunner {
 public:
  TaskRunner(fs::path cache_dir, std::uint64_t cache_capacity_bytes);

  // Stages inputs, runs the process, persists outputs, cleans up.
  TaskResult execute_task(const TaskDescriptor& task, const std::string& executor_id = "");

  // SIGKILLs every running process group; their results report `lost`.
  void kill_all();

  Cache& cache() { return cache_; }
  const fs::path& cache_dir() const { return cache_dir_; }
  fs::path sandbox_for(const std::string& task_id) const;
  std::size_t running() const;

 private:
  struct Spawned {
    pid_t pid = -1;
    int spawn_errno = 0;
  };
  Spawned spawn(const TaskDescriptor& task, const fs::path& sandbox);
  // Returns the wait status, or nullopt on timeout (process already killed).
  std::optional<int> wait_for(pid_t pid, std::int64_t limit_s);

  fs::path cache_dir_;
  fs::path log_dir_;
  Cache cache_;
  Fd devnull_;
  std::vector<std::string> base_env_;
  mutable std::mutex mu_;
  std::set<pid_t> running_;
  std::uint64_t kill_epoch_ = 0;
};

struct AgentConfig {
  Endpoint dispatcher;
  int slots = 1;
  fs::path cache_dir;
  std::uint64_t cache_capacity_bytes = 1ull << 30;
  // Stable identity across reconnects; defaults to hostname:pid.
  std::string address;
  std::chrono::milliseconds backoff_base{1000};
  std::chrono::milliseconds backoff_cap{30000};
  // Give up after this many consecutive failed connection attempts (<0: never).
  int max_connect_attempts = -1;
};

// Delay before reconnect attempt `attempt` (0-based): base * 2^attempt, capped.
std::chrono::milliseconds reconnect_delay(int attempt, std::chrono::milliseconds base, std::chrono::milliseconds cap);

class Agent {
 public:
  explicit Agent(AgentConfig config);
  ~Agent();

  // Blocks until SHUTDOWN, stop(), or the connect-attempt budget is spent.
  // Returns 0 on orderly exit, 1 if it gave up connecting.
  int run();
  // Thread-safe.
  void stop();

  std::string executor_id() const;
  bool suspended() const { return suspended_; }
  bool connected() const { return connected_; }
  int reconnect_attempts() const { return reconnect_attempts_; }
  int sessions() const { return sessions_; }
  int max_concurrent_observed() const { return max_concurrent_; }
  std::uint64_t tasks_completed() const { return tasks_completed_; }
  TaskRunner& runner() { return runner_; }

 private:
  bool session();
  void worker_loop();
  void heartbeat_loop();
  void end_session();
  bool sleep_interruptible(std::chrono::milliseconds d);

  AgentConfig config_;
  TaskRunner runner_;

  std::atomic<bool> stopping_{false};
  std::atomic<bool> suspended_{false};
  std::atomic<bool> connected_{false};
  std::atomic<int> reconnect_attempts_{0};
  std::atomic<int> sessions_{0};
  std::atomic<int> running_now_{0};
  std::atomic<int> max_concurrent_{0};
  std::atomic<std::uint64_t> tasks_completed_{0};

  mutable std::mutex mu_;
  std::condition_variable cv_;
  // Workers wait here only, so a new task never wakes the heartbeat thread.
  std::condition_variable work_cv_;
  std::deque<TaskDescriptor> pending_;
  bool session_over_ = false;
  std::string executor_id_;
  std::int64_t heartbeat_ms_ = 5000;
  std::shared_ptr<Connection> conn_;
  std::vector<std::thread> threads_;
};

}  // namespace mtcd
