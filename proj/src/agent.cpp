#include <unistd.h>

#include <spdlog/spdlog.h>

#include "mtcd/clock.hpp"
#include "mtcd/executor.hpp"

namespace mtcd {

std::chrono::milliseconds reconnect_delay(int attempt, std::chrono::milliseconds base, std::chrono::milliseconds cap) {
  auto delay = base;
  for (int i = 0; i < attempt && delay < cap; ++i) delay *= 2;
  return std::min(delay, cap);
}

namespace {

std::string default_address() {
  char host[256] = {};
  ::gethostname(host, sizeof(host) - 1);
  return std::string(host) + ":" + std::to_string(::getpid());
}

}  // namespace

Agent::Agent(AgentConfig config)
    : config_(std::move(config)), runner_(config_.cache_dir, config_.cache_capacity_bytes) {
  if (config_.slots < 1) throw std::invalid_argument("slots must be >= 1");
  if (config_.address.empty()) config_.address = default_address();
}

Agent::~Agent() { stop(); }

std::string Agent::executor_id() const {
  std::lock_guard lock(mu_);
  return executor_id_;
}

void Agent::stop() {
  stopping_ = true;
  std::shared_ptr<Connection> conn;
  {
    std::lock_guard lock(mu_);
    conn = conn_;
  }
  if (conn) conn->shutdown_both();
  cv_.notify_all();
}

bool Agent::sleep_interruptible(std::chrono::milliseconds d) {
  std::unique_lock lock(mu_);
  return !cv_.wait_for(lock, d, [&] { return stopping_.load(); });
}

int Agent::run() {
  int failed_attempts = 0;
  while (!stopping_) {
    const bool registered = session();
    if (stopping_) break;
    if (registered) {
      failed_attempts = 0;
    } else if (config_.max_connect_attempts >= 0 && failed_attempts >= config_.max_connect_attempts) {
      spdlog::error("giving up on dispatcher {} after {} attempts", config_.dispatcher.to_string(), failed_attempts);
      return 1;
    }
    const auto delay = reconnect_delay(failed_attempts++, config_.backoff_base, config_.backoff_cap);
    ++reconnect_attempts_;
    spdlog::warn("reconnecting to dispatcher {} in {} ms (attempt {})", config_.dispatcher.to_string(),
                 delay.count(), failed_attempts);
    sleep_interruptible(delay);
  }
  return 0;
}

bool Agent::session() {
  std::shared_ptr<Connection> conn;
  try {
    conn = std::make_shared<Connection>(connect_tcp(config_.dispatcher));
    conn->send(Register{kProtocolVersion, config_.slots, config_.address});
    Message reply = conn->receive();
    if (const auto* err = reply.as<ErrorReply>()) {
      spdlog::error("dispatcher rejected registration: {} ({})", err->message, err->code);
      stopping_ = true;
      return false;
    }
    const auto* ack = reply.as<RegisterAck>();
    if (ack == nullptr) throw ProtocolError(std::string("expected REGISTER_ACK, got ") + to_string(reply.kind()));
    std::lock_guard lock(mu_);
    executor_id_ = ack->executor_id;
    heartbeat_ms_ = std::max<std::int64_t>(1, ack->heartbeat_interval_ms);
    conn_ = conn;
    session_over_ = false;
    pending_.clear();
  } catch (const std::exception& e) {
    spdlog::warn("cannot register with {}: {}", config_.dispatcher.to_string(), e.what());
    return false;
  }
  if (stopping_) {
    end_session();
    return true;
  }

  connected_ = true;
  suspended_ = false;
  ++sessions_;
  spdlog::info("registered with {} as {}", config_.dispatcher.to_string(), executor_id());
  for (int i = 0; i < config_.slots; ++i) threads_.emplace_back([this] { worker_loop(); });
  threads_.emplace_back([this] { heartbeat_loop(); });

  try {
    for (;;) {
      Message msg = conn->receive();
      if (auto* dispatch = std::get_if<TaskDispatch>(&msg.payload)) {
        {
          std::lock_guard lock(mu_);
          pending_.push_back(std::move(dispatch->task));
        }
        work_cv_.notify_one();
      } else if (const auto* suspend = msg.as<Suspend>()) {
        spdlog::warn("suspended by dispatcher: {}", suspend->reason);
        suspended_ = true;
      } else if (const auto* shutdown = msg.as<Shutdown>()) {
        spdlog::info("shutdown requested: {}", shutdown->reason);
        stopping_ = true;
        break;
      } else if (const auto* err = msg.as<ErrorReply>()) {
        spdlog::warn("dispatcher error: {} ({})", err->message, err->code);
      }
    }
  } catch (const std::exception& e) {
    if (!stopping_) spdlog::warn("lost connection to dispatcher {}: {}", config_.dispatcher.to_string(), e.what());
  }
  end_session();
  return true;
}

void Agent::end_session() {
  connected_ = false;
  std::shared_ptr<Connection> conn;
  {
    std::lock_guard lock(mu_);
    session_over_ = true;
    pending_.clear();
    conn = std::exchange(conn_, nullptr);
  }
  cv_.notify_all();
  work_cv_.notify_all();
  runner_.kill_all();
  if (conn) conn->shutdown_both();
  for (auto& t : threads_) t.join();
  threads_.clear();
  if (conn) conn->close();
}

void Agent::worker_loop() {
  std::shared_ptr<Connection> conn;
  std::string id;
  {
    std::lock_guard lock(mu_);
    conn = conn_;
    id = executor_id_;
  }
  for (;;) {
    TaskDescriptor task;
    {
      std::unique_lock lock(mu_);
      work_cv_.wait(lock, [&] { return session_over_ || !pending_.empty(); });
      if (session_over_) return;
      task = std::move(pending_.front());
      pending_.pop_front();
    }
    TaskResult result;
    if (suspended_) {
      // Hand it back without counting against this node.
      result.task_id = task.task_id;
      result.executor_id = id;
      result.status = TaskStatus::kLost;
      result.exit_code = kExitKilled;
      result.t_started = result.t_finished = monotonic_ms();
    } else {
      const int now_running = ++running_now_;
      int seen = max_concurrent_.load();
      while (now_running > seen && !max_concurrent_.compare_exchange_weak(seen, now_running)) {
      }
      result = runner_.execute_task(task, id);
      --running_now_;
    }
    try {
      conn->send(TaskResultReport{std::move(result)});
      ++tasks_completed_;
    } catch (const std::exception&) {
      // Session is over; the dispatcher reschedules the task.
    }
  }
}

void Agent::heartbeat_loop() {
  std::shared_ptr<Connection> conn;
  std::string id;
  std::chrono::milliseconds interval;
  {
    std::lock_guard lock(mu_);
    conn = conn_;
    id = executor_id_;
    interval = std::chrono::milliseconds(heartbeat_ms_);
  }
  for (;;) {
    {
      std::unique_lock lock(mu_);
      if (cv_.wait_for(lock, interval, [&] { return session_over_; })) return;
    }
    try {
      conn->send(Heartbeat{id});
    } catch (const std::exception&) {
      return;
    }
  }
}

}  // namespace mtcd
