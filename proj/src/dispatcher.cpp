#include "mtcd/dispatcher.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>

namespace mtcd {

const char* to_string(ExecutorState state) {
  switch (state) {
    case ExecutorState::kRegistering: return "registering";
    case ExecutorState::kIdle: return "idle";
    case ExecutorState::kBusy: return "busy";
    case ExecutorState::kSuspended: return "suspended";
    case ExecutorState::kDead: return "dead";
  }
  return "unknown";
}

namespace {

std::int64_t free_of(const ExecutorRecord& e) {
  return (e.state == ExecutorState::kIdle || e.state == ExecutorState::kBusy) ? e.slots - e.busy_slots : 0;
}

}  // namespace

Dispatcher::Dispatcher(DispatcherConfig config, Outbox& outbox, EventSink* events)
    : config_(config), outbox_(outbox), events_(events) {}

void Dispatcher::record(std::string_view task_id, std::string_view event, double ts) {
  if (events_ != nullptr) events_->record(task_id, event, ts);
}

ExecutorRecord* Dispatcher::find_executor(const std::string& executor_id) {
  auto it = executors_.find(executor_id);
  return it == executors_.end() ? nullptr : &it->second;
}

const ExecutorRecord* Dispatcher::executor(const std::string& executor_id) const {
  auto it = executors_.find(executor_id);
  return it == executors_.end() ? nullptr : &it->second;
}

std::vector<const ExecutorRecord*> Dispatcher::executors() const {
  std::vector<const ExecutorRecord*> out;
  for (const auto& [id, e] : executors_) out.push_back(&e);
  return out;
}

// ---------------------------------------------------------------------------

Message Dispatcher::register_executor(ConnectionId conn, const Register& hello, double now_ms) {
  if (hello.protocol_version != kProtocolVersion) {
    return ErrorReply{"version_mismatch", "dispatcher speaks protocol " + std::to_string(kProtocolVersion) +
                                              ", executor sent " + std::to_string(hello.protocol_version)};
  }
  if (hello.slots < 1) return ErrorReply{"bad_slots", "slots must be >= 1"};
  if (executor_by_conn_.count(conn) != 0) {
    return ErrorReply{"already_registered", "connection already registered"};
  }

  // A reconnecting agent supersedes its previous incarnation.
  for (auto& [id, existing] : executors_) {
    if (existing.live() && !hello.address.empty() && existing.address == hello.address) {
      spdlog::info("executor {} re-registered from {}; retiring old record", id, hello.address);
      mark_dead(existing, now_ms, "re-registered");
    }
  }

  char id_buf[32];
  std::snprintf(id_buf, sizeof(id_buf), "e%06llu", static_cast<unsigned long long>(next_executor_seq_++));
  ExecutorRecord rec;
  rec.executor_id = id_buf;
  rec.address = hello.address;
  rec.slots = hello.slots;
  rec.state = ExecutorState::kIdle;
  rec.registered_ms = now_ms;
  rec.last_heartbeat_ms = now_ms;
  rec.connection = conn;
  free_slots_ += rec.slots;
  executor_by_conn_[conn] = rec.executor_id;
  spdlog::debug("registered executor {} ({} slots) from {}", rec.executor_id, rec.slots, rec.address);
  RegisterAck ack{rec.executor_id, config_.heartbeat_interval_ms};
  auto it = executors_.emplace(rec.executor_id, std::move(rec)).first;
  update_busy_state(it->second);
  return ack;
}

SubmitAck Dispatcher::submit(ConnectionId client, std::vector<TaskDescriptor> batch, double now_ms) {
  SubmitAck ack;
  ack.accepted.reserve(batch.size());
  for (auto& task : batch) {
    try {
      validate(task);
    } catch (const std::invalid_argument& e) {
      ack.rejected.push_back({task.task_id, e.what()});
      continue;
    }
    if (tasks_.count(task.task_id) != 0) {
      ack.rejected.push_back({task.task_id, "duplicate task_id"});
      continue;
    }
    if (!task.retries_remaining) task.retries_remaining = config_.default_retries;
    std::string id = task.task_id;
    TaskEntry entry;
    entry.descriptor = std::move(task);
    entry.owner = client;
    entry.t_submitted = now_ms;
    tasks_.emplace(id, std::move(entry));
    queue_.push_back(id);
    ++submitted_;
    record(id, "submitted", now_ms);
    ack.accepted.push_back(std::move(id));
  }
  return ack;
}

ExecutorRecord* Dispatcher::pick_executor() {
  if (free_slots_ <= 0 || available_.empty()) return nullptr;
  return &executors_.at(available_.begin()->second);
}

void Dispatcher::update_busy_state(ExecutorRecord& e) {
  if (e.state == ExecutorState::kIdle || e.state == ExecutorState::kBusy) {
    e.state = e.busy_slots == 0 ? ExecutorState::kIdle : ExecutorState::kBusy;
  }
  const std::pair<double, std::string> key{e.registered_ms, e.executor_id};
  if (e.accepts_work()) {
    available_.insert(key);
  } else {
    available_.erase(key);
  }
}

std::vector<Assignment> Dispatcher::schedule_step(double now_ms) {
  std::vector<Assignment> out;
  while (!queue_.empty()) {
    ExecutorRecord* e = pick_executor();
    if (e == nullptr) break;
    const std::string task_id = queue_.front();
    queue_.pop_front();
    auto& entry = tasks_.at(task_id);

    if (!outbox_.send(e->connection, TaskDispatch{entry.descriptor})) {
      queue_.push_front(task_id);
      mark_dead(*e, now_ms, "send failed");
      continue;
    }
    free_slots_ -= free_of(*e);
    ++e->busy_slots;
    e->running.insert(task_id);
    update_busy_state(*e);
    free_slots_ += free_of(*e);

    entry.phase = Phase::kRunning;
    entry.executor_id = e->executor_id;
    entry.t_dispatched = now_ms;
    ++entry.dispatch_count;
    ++running_;
    record(task_id, "dispatched", now_ms);
    out.push_back({task_id, e->executor_id});
  }
  return out;
}

void Dispatcher::release_slot(ExecutorRecord& e, const std::string& task_id) {
  if (e.running.erase(task_id) == 0) return;
  free_slots_ -= free_of(e);
  --e.busy_slots;
  update_busy_state(e);
  free_slots_ += free_of(e);
}

void Dispatcher::handle_result(TaskResult result, double now_ms) {
  auto it = tasks_.find(result.task_id);
  if (it == tasks_.end()) {
    spdlog::warn("result for unknown task '{}' ignored", result.task_id);
    return;
  }
  auto& entry = it->second;
  if (entry.phase != Phase::kRunning || entry.executor_id != result.executor_id) {
    spdlog::debug("late or duplicate result for '{}' from {} discarded", result.task_id, result.executor_id);
    return;
  }
  ExecutorRecord* e = find_executor(result.executor_id);
  if (e != nullptr) {
    e->last_heartbeat_ms = std::max(e->last_heartbeat_ms, now_ms);
    release_slot(*e, result.task_id);
  }
  --running_;

  result.t_submitted = entry.t_submitted;
  result.t_dispatched = entry.t_dispatched;
  result.t_started = std::max(result.t_started, result.t_dispatched);
  result.t_finished = std::max(result.t_finished, result.t_started);
  record(result.task_id, "started", result.t_started);

  switch (result.status) {
    case TaskStatus::kSuccess:
    case TaskStatus::kAppFailure:
      finalize(entry, std::move(result), now_ms);
      return;
    case TaskStatus::kSystemFailure:
    case TaskStatus::kTimeout:
      if (e != nullptr && e->live()) {
        e->failure_events.push_back({now_ms, result.task_id});
        apply_suspend_policy(*e, now_ms);
      }
      [[fallthrough]];
    case TaskStatus::kLost:
      retry_or_fail(it->first, entry, std::move(result), now_ms);
      return;
  }
}

void Dispatcher::retry_or_fail(const std::string& task_id, TaskEntry& entry, TaskResult result,
                               double now_ms) {
  int& retries = *entry.descriptor.retries_remaining;
  if (retries > 0) {
    --retries;
    entry.phase = Phase::kQueued;
    entry.executor_id.clear();
    queue_.push_back(task_id);
    ++rescheduled_;
    record(task_id, "requeued", now_ms);
    return;
  }
  finalize(entry, std::move(result), now_ms);
}

void Dispatcher::finalize(TaskEntry& entry, TaskResult result, double now_ms) {
  entry.phase = Phase::kFinal;
  switch (result.status) {
    case TaskStatus::kSuccess: ++completed_ok_; break;
    case TaskStatus::kAppFailure: ++failed_app_; break;
    default: ++failed_system_; break;
  }
  recent_completions_.push_back(now_ms);
  record(result.task_id, "finished", result.t_finished);
  outbox_.send(entry.owner, ResultNotify{std::move(result)});
  // Keep the id for duplicate detection; drop the payload.
  entry.descriptor = TaskDescriptor{};
  entry.descriptor.retries_remaining = 0;
}

void Dispatcher::heartbeat(const std::string& executor_id, double now_ms) {
  if (ExecutorRecord* e = find_executor(executor_id); e != nullptr && e->live()) {
    e->last_heartbeat_ms = std::max(e->last_heartbeat_ms, now_ms);
  }
}

std::vector<std::string> Dispatcher::check_liveness(double now_ms) {
  const double limit = static_cast<double>(config_.missed_heartbeats * config_.heartbeat_interval_ms);
  std::vector<std::string> dead;
  for (auto& [id, e] : executors_) {
    if (e.live() && now_ms - e.last_heartbeat_ms > limit) {
      dead.push_back(id);
      mark_dead(e, now_ms, "missed heartbeats");
    }
  }
  return dead;
}

void Dispatcher::mark_dead(ExecutorRecord& e, double now_ms, const char* reason) {
  if (!e.live()) return;
  spdlog::warn("executor {} marked dead: {}", e.executor_id, reason);
  free_slots_ -= free_of(e);
  e.state = ExecutorState::kDead;
  available_.erase({e.registered_ms, e.executor_id});
  executor_by_conn_.erase(e.connection);
  to_close_.push_back(e.connection);
  const std::set<std::string> running = std::move(e.running);
  e.running.clear();
  e.busy_slots = 0;
  for (const auto& task_id : running) {
    auto& entry = tasks_.at(task_id);
    --running_;
    TaskResult lost;
    lost.task_id = task_id;
    lost.exit_code = kExitKilled;
    lost.status = TaskStatus::kLost;
    lost.executor_id = e.executor_id;
    lost.t_submitted = entry.t_submitted;
    lost.t_dispatched = entry.t_dispatched;
    lost.t_started = entry.t_dispatched;
    lost.t_finished = std::max(now_ms, entry.t_dispatched);
    retry_or_fail(task_id, entry, std::move(lost), now_ms);
  }
}

bool Dispatcher::apply_suspend_policy(ExecutorRecord& e, double now_ms) {
  const double window = static_cast<double>(config_.suspend_window_ms);
  while (!e.failure_events.empty() && now_ms - e.failure_events.front().timestamp_ms > window) {
    e.failure_events.pop_front();
  }
  if (e.state == ExecutorState::kSuspended) return true;
  if (!e.live() || static_cast<int>(e.failure_events.size()) < config_.suspend_failures) return false;

  free_slots_ -= free_of(e);
  e.state = ExecutorState::kSuspended;
  update_busy_state(e);
  spdlog::warn("executor {} suspended: {} failures within {} ms", e.executor_id, e.failure_events.size(),
               config_.suspend_window_ms);
  outbox_.send(e.connection, Suspend{e.executor_id, std::to_string(e.failure_events.size()) +
                                                        " task failures within " +
                                                        std::to_string(config_.suspend_window_ms) + " ms"});
  return true;
}

bool Dispatcher::resume(const std::string& executor_id) {
  ExecutorRecord* e = find_executor(executor_id);
  if (e == nullptr || e->state != ExecutorState::kSuspended) return false;
  e->failure_events.clear();
  e->state = ExecutorState::kIdle;
  update_busy_state(*e);
  free_slots_ += free_of(*e);
  return true;
}

void Dispatcher::connection_closed(ConnectionId conn, double now_ms) {
  if (auto it = executor_by_conn_.find(conn); it != executor_by_conn_.end()) {
    if (ExecutorRecord* e = find_executor(it->second)) mark_dead(*e, now_ms, "connection closed");
  }
}

std::vector<ConnectionId> Dispatcher::take_connections_to_close() { return std::exchange(to_close_, {}); }

DispatcherStats Dispatcher::stats(double now_ms) {
  while (!recent_completions_.empty() &&
         now_ms - recent_completions_.front() >= config_.throughput_window_ms) {
    recent_completions_.pop_front();
  }
  DispatcherStats s;
  s.submitted = submitted_;
  s.queued = static_cast<std::int64_t>(queue_.size());
  s.dispatched_running = running_;
  s.completed_ok = completed_ok_;
  s.failed_app = failed_app_;
  s.failed_system = failed_system_;
  s.rescheduled = rescheduled_;
  s.current_throughput_tasks_per_s =
      static_cast<double>(recent_completions_.size()) * 1000.0 / config_.throughput_window_ms;
  for (const auto& [id, e] : executors_) {
    if (!e.live()) continue;
    ++s.registered_executors;
    if (e.state == ExecutorState::kSuspended) {
      ++s.suspended_executors;
    } else {
      s.total_slots += e.slots;
    }
  }
  return s;
}

}  // namespace mtcd
