// Dispatcher state machine: FIFO task queue, executor registry, slot
// accounting, failure detection, rescheduling and suspension.
//
// The core performs no I/O of its own. Outgoing messages go through an
// Outbox and time is passed in explicitly, so the same code runs under the
// TCP event loop (DispatcherServer) and under the virtual-clock simulator.
// It is not thread-safe; callers serialize access.

#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtcd/protocol.hpp"

namespace mtcd {

using ConnectionId = std::uint64_t;

struct DispatcherConfig {
  std::int64_t heartbeat_interval_ms = 5000;
  int missed_heartbeats = 3;
  int suspend_failures = 3;
  std::int64_t suspend_window_ms = 60000;
  int default_retries = 3;
  double throughput_window_ms = 1000;
};

enum class ExecutorState { kRegistering, kIdle, kBusy, kSuspended, kDead };

const char* to_string(ExecutorState state);

struct FailureEvent {
  double timestamp_ms = 0;
  std::string task_id;
};

struct ExecutorRecord {
  std::string executor_id;
  std::string address;
  int slots = 1;
  int busy_slots = 0;
  ExecutorState state = ExecutorState::kRegistering;
  double registered_ms = 0;
  double last_heartbeat_ms = 0;
  std::deque<FailureEvent> failure_events;
  ConnectionId connection = 0;
  std::set<std::string> running;

  bool live() const { return state != ExecutorState::kDead; }
  bool accepts_work() const {
    return (state == ExecutorState::kIdle || state == ExecutorState::kBusy) && busy_slots < slots;
  }
};

struct Assignment {
  std::string task_id;
  std::string executor_id;
  bool operator==(const Assignment&) const = default;
};

class Outbox {
 public:
  virtual ~Outbox() = default;
  // Returns false if the connection is gone.
  virtual bool send(ConnectionId to, const Message& msg) = 0;
};

// Receives one line per task state transition.
class EventSink {
 public:
  virtual ~EventSink() = default;
  virtual void record(std::string_view task_id, std::string_view event, double timestamp_ms) = 0;
};

class Dispatcher {
 public:
  Dispatcher(DispatcherConfig config, Outbox& outbox, EventSink* events = nullptr);

  const DispatcherConfig& config() const { return config_; }

  // Returns RegisterAck, or ErrorReply when the hello is rejected (the caller
  // closes the connection in that case).
  Message register_executor(ConnectionId conn, const Register& hello, double now_ms);

  SubmitAck submit(ConnectionId client, std::vector<TaskDescriptor> batch, double now_ms);

  std::vector<Assignment> schedule_step(double now_ms);

  void handle_result(TaskResult result, double now_ms);

  void heartbeat(const std::string& executor_id, double now_ms);

  std::vector<std::string> check_liveness(double now_ms);

  // Prunes the failure window and suspends when the threshold is reached.
  // Returns true if the executor is (now) suspended.
  bool apply_suspend_policy(ExecutorRecord& executor, double now_ms);

  // Operator action; suspended executors are never resumed automatically.
  bool resume(const std::string& executor_id);

  // The transport reports a closed connection (executor or client).
  void connection_closed(ConnectionId conn, double now_ms);

  DispatcherStats stats(double now_ms);

  const ExecutorRecord* executor(const std::string& executor_id) const;
  std::vector<const ExecutorRecord*> executors() const;
  std::vector<std::string> queued_task_ids() const { return {queue_.begin(), queue_.end()}; }
  bool has_work() const { return !queue_.empty() && free_slots_ > 0; }
  std::size_t queue_length() const { return queue_.size(); }
  std::int64_t free_slots() const { return free_slots_; }

  // Connections the transport should drop (executors declared dead).
  std::vector<ConnectionId> take_connections_to_close();

 private:
  enum class Phase { kQueued, kRunning, kFinal };

  struct TaskEntry {
    TaskDescriptor descriptor;
    ConnectionId owner = 0;
    Phase phase = Phase::kQueued;
    std::string executor_id;
    double t_submitted = 0;
    double t_dispatched = 0;
    int dispatch_count = 0;
  };

  ExecutorRecord* find_executor(const std::string& executor_id);
  ExecutorRecord* pick_executor();
  // Recomputes idle/busy and membership in available_.
  void update_busy_state(ExecutorRecord& executor);
  void release_slot(ExecutorRecord& executor, const std::string& task_id);
  void mark_dead(ExecutorRecord& executor, double now_ms, const char* reason);
  void retry_or_fail(const std::string& task_id, TaskEntry& entry, TaskResult result, double now_ms);
  void finalize(TaskEntry& entry, TaskResult result, double now_ms);
  void record(std::string_view task_id, std::string_view event, double ts);

  DispatcherConfig config_;
  Outbox& outbox_;
  EventSink* events_;

  std::unordered_map<std::string, TaskEntry> tasks_;
  std::deque<std::string> queue_;
  std::map<std::string, ExecutorRecord> executors_;
  // Executors with a free slot, in dispatch preference order: earliest
  // registration, then executor_id.
  std::set<std::pair<double, std::string>> available_;
  std::unordered_map<ConnectionId, std::string> executor_by_conn_;
  std::vector<ConnectionId> to_close_;
  std::uint64_t next_executor_seq_ = 1;
  std::int64_t free_slots_ = 0;

  std::int64_t submitted_ = 0;
  std::int64_t running_ = 0;
  std::int64_t completed_ok_ = 0;
  std::int64_t failed_app_ = 0;
  std::int64_t failed_system_ = 0;
  std::int64_t rescheduled_ = 0;
  std::deque<double> recent_completions_;
};

}  // namespace mtcd
