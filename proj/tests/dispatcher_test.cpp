#include <gtest/gtest.h>

#include <map>
#include <random>

#include "mtcd/dispatcher.hpp"

using namespace mtcd;

namespace {

struct RecordingOutbox : Outbox {
  std::map<ConnectionId, std::vector<Message>> sent;
  std::set<ConnectionId> broken;

  bool send(ConnectionId to, const Message& msg) override {
    if (broken.count(to) != 0) return false;
    sent[to].push_back(msg);
    return true;
  }

  std::vector<std::string> dispatched_to(ConnectionId c) const {
    std::vector<std::string> ids;
    if (auto it = sent.find(c); it != sent.end()) {
      for (const auto& m : it->second) {
        if (auto* d = m.as<TaskDispatch>()) ids.push_back(d->task.task_id);
      }
    }
    return ids;
  }
  std::vector<TaskResult> notified(ConnectionId c) const {
    std::vector<TaskResult> out;
    if (auto it = sent.find(c); it != sent.end()) {
      for (const auto& m : it->second) {
        if (auto* n = m.as<ResultNotify>()) out.push_back(n->result);
      }
    }
    return out;
  }
};

constexpr ConnectionId kClient = 100;

TaskDescriptor task(const std::string& id, std::optional<int> retries = std::nullopt) {
  TaskDescriptor t;
  t.task_id = id;
  t.executable = "/bin/true";
  t.retries_remaining = retries;
  return t;
}

TaskResult result(const std::string& id, const std::string& executor, TaskStatus status, int exit_code = 0) {
  TaskResult r;
  r.task_id = id;
  r.executor_id = executor;
  r.status = status;
  r.exit_code = exit_code;
  return r;
}

std::string register_ok(Dispatcher& d, ConnectionId conn, int slots, double now, const std::string& addr = "") {
  Message reply = d.register_executor(conn, Register{kProtocolVersion, slots, addr}, now);
  auto* ack = reply.as<RegisterAck>();
  EXPECT_NE(ack, nullptr);
  return ack ? ack->executor_id : "";
}

void expect_conserved(Dispatcher& d, double now) {
  const DispatcherStats s = d.stats(now);
  EXPECT_EQ(s.submitted, s.queued + s.dispatched_running + s.completed_ok + s.failed_app + s.failed_system);
}

}  // namespace

TEST(Dispatcher, FifoOrderOnOneSlot) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto e = register_ok(d, 1, 1, 0);
  auto ack = d.submit(kClient, {task("a"), task("b"), task("c")}, 1);
  EXPECT_EQ(ack.accepted, (std::vector<std::string>{"a", "b", "c"}));

  std::vector<std::string> order;
  for (const char* id : {"a", "b", "c"}) {
    auto as = d.schedule_step(2);
    ASSERT_EQ(as.size(), 1u);
    EXPECT_EQ(as[0].executor_id, e);
    order.push_back(as[0].task_id);
    EXPECT_TRUE(d.schedule_step(2).empty());
    d.handle_result(result(id, e, TaskStatus::kSuccess), 3);
  }
  EXPECT_EQ(order, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(out.notified(kClient).size(), 3u);
  expect_conserved(d, 4);
}

TEST(Dispatcher, PrefersEarliestRegisteredExecutor) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto late = register_ok(d, 2, 2, 50);
  const auto early = register_ok(d, 1, 2, 10);
  d.submit(kClient, {task("a"), task("b"), task("c")}, 60);
  auto as = d.schedule_step(60);
  ASSERT_EQ(as.size(), 3u);
  EXPECT_EQ(as[0].executor_id, early);
  EXPECT_EQ(as[1].executor_id, early);
  EXPECT_EQ(as[2].executor_id, late);
  EXPECT_EQ(out.dispatched_to(1), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(d.free_slots(), 1);
}

TEST(Dispatcher, RejectsDuplicatesAndInvalidTasks) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  auto bad = task("x");
  bad.executable.clear();
  auto ack = d.submit(kClient, {task("a"), task("a"), bad}, 0);
  EXPECT_EQ(ack.accepted, std::vector<std::string>{"a"});
  ASSERT_EQ(ack.rejected.size(), 2u);
  EXPECT_EQ(ack.rejected[0].task_id, "a");
  EXPECT_EQ(ack.rejected[1].task_id, "x");
  // Finished ids stay reserved.
  const auto e = register_ok(d, 1, 1, 0);
  d.schedule_step(0);
  d.handle_result(result("a", e, TaskStatus::kSuccess), 1);
  EXPECT_EQ(d.submit(kClient, {task("a")}, 2).rejected.size(), 1u);
}

TEST(Dispatcher, RegistrationChecks) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  EXPECT_NE(d.register_executor(1, Register{kProtocolVersion + 1, 1, ""}, 0).as<ErrorReply>(), nullptr);
  EXPECT_NE(d.register_executor(1, Register{kProtocolVersion, 0, ""}, 0).as<ErrorReply>(), nullptr);
  register_ok(d, 1, 1, 0);
  EXPECT_NE(d.register_executor(1, Register{kProtocolVersion, 1, ""}, 0).as<ErrorReply>(), nullptr);
}

TEST(Dispatcher, SystemFailureRetriesThenFinalizes) {
  RecordingOutbox out;
  DispatcherConfig cfg;
  cfg.suspend_failures = 100;
  Dispatcher d(cfg, out);
  const auto e = register_ok(d, 1, 1, 0);
  d.submit(kClient, {task("a", 2)}, 0);
  for (int attempt = 0; attempt < 3; ++attempt) {
    ASSERT_EQ(d.schedule_step(attempt).size(), 1u);
    d.handle_result(result("a", e, TaskStatus::kSystemFailure, -1), attempt + 0.5);
  }
  EXPECT_TRUE(d.schedule_step(10).empty());
  const auto notes = out.notified(kClient);
  ASSERT_EQ(notes.size(), 1u);
  EXPECT_EQ(notes[0].status, TaskStatus::kSystemFailure);
  const auto s = d.stats(10);
  EXPECT_EQ(s.rescheduled, 2);
  EXPECT_EQ(s.failed_system, 1);
  expect_conserved(d, 10);
}

TEST(Dispatcher, DefaultRetryBudgetApplies) {
  RecordingOutbox out;
  DispatcherConfig cfg;
  cfg.default_retries = 1;
  cfg.suspend_failures = 100;
  Dispatcher d(cfg, out);
  const auto e = register_ok(d, 1, 1, 0);
  d.submit(kClient, {task("a")}, 0);
  d.schedule_step(0);
  d.handle_result(result("a", e, TaskStatus::kTimeout), 1);
  d.schedule_step(1);
  d.handle_result(result("a", e, TaskStatus::kTimeout), 2);
  ASSERT_EQ(out.notified(kClient).size(), 1u);
  EXPECT_EQ(out.notified(kClient)[0].status, TaskStatus::kTimeout);
  EXPECT_EQ(d.stats(2).rescheduled, 1);
}

TEST(Dispatcher, AppFailureIsFinalImmediately) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto e = register_ok(d, 1, 1, 0);
  d.submit(kClient, {task("a", 5)}, 0);
  d.schedule_step(0);
  d.handle_result(result("a", e, TaskStatus::kAppFailure, 3), 1);
  ASSERT_EQ(out.notified(kClient).size(), 1u);
  EXPECT_EQ(out.notified(kClient)[0].exit_code, 3);
  EXPECT_EQ(d.stats(1).rescheduled, 0);
  EXPECT_EQ(d.executor(e)->failure_events.size(), 0u);
}

TEST(Dispatcher, MissedHeartbeatsKillExecutorAndRequeue) {
  RecordingOutbox out;
  DispatcherConfig cfg;
  cfg.heartbeat_interval_ms = 1000;
  cfg.missed_heartbeats = 3;
  Dispatcher d(cfg, out);
  const auto e1 = register_ok(d, 1, 1, 0);
  d.submit(kClient, {task("a")}, 0);
  ASSERT_EQ(d.schedule_step(0).size(), 1u);

  d.heartbeat(e1, 1000);
  EXPECT_TRUE(d.check_liveness(4000).empty());  // exactly 3 intervals: still alive
  EXPECT_EQ(d.check_liveness(4001), std::vector<std::string>{e1});
  EXPECT_EQ(d.executor(e1)->state, ExecutorState::kDead);
  EXPECT_EQ(d.take_connections_to_close(), std::vector<ConnectionId>{1});
  EXPECT_EQ(d.queued_task_ids(), std::vector<std::string>{"a"});

  // A late result from the dead executor is ignored.
  d.handle_result(result("a", e1, TaskStatus::kSuccess), 4002);
  EXPECT_TRUE(out.notified(kClient).empty());

  const auto e2 = register_ok(d, 2, 1, 4100);
  auto as = d.schedule_step(4100);
  ASSERT_EQ(as.size(), 1u);
  EXPECT_EQ(as[0].executor_id, e2);
  d.handle_result(result("a", e2, TaskStatus::kSuccess), 4200);
  ASSERT_EQ(out.notified(kClient).size(), 1u);
  EXPECT_EQ(out.notified(kClient)[0].executor_id, e2);
  EXPECT_EQ(d.stats(4200).rescheduled, 1);
  expect_conserved(d, 4200);
}

TEST(Dispatcher, ConnectionCloseRequeuesRunningTasks) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  register_ok(d, 1, 2, 0);
  d.submit(kClient, {task("a"), task("b")}, 0);
  d.schedule_step(0);
  d.connection_closed(1, 5);
  EXPECT_EQ(d.queue_length(), 2u);
  EXPECT_EQ(d.stats(5).dispatched_running, 0);
  EXPECT_EQ(d.free_slots(), 0);
}

TEST(Dispatcher, SendFailureMarksExecutorDead) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto e1 = register_ok(d, 1, 1, 0);
  const auto e2 = register_ok(d, 2, 1, 1);
  out.broken.insert(1);
  d.submit(kClient, {task("a")}, 2);
  auto as = d.schedule_step(2);
  ASSERT_EQ(as.size(), 1u);
  EXPECT_EQ(as[0].executor_id, e2);
  EXPECT_EQ(d.executor(e1)->state, ExecutorState::kDead);
}

TEST(Dispatcher, ReRegistrationRetiresOldRecord) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto old_id = register_ok(d, 1, 1, 0, "host:1");
  d.submit(kClient, {task("a")}, 0);
  d.schedule_step(0);
  const auto new_id = register_ok(d, 2, 1, 10, "host:1");
  EXPECT_NE(old_id, new_id);
  EXPECT_EQ(d.executor(old_id)->state, ExecutorState::kDead);
  auto as = d.schedule_step(10);
  ASSERT_EQ(as.size(), 1u);
  EXPECT_EQ(as[0].executor_id, new_id);
}

namespace {

// Feeds three failures at the given times into one executor.
ExecutorState after_failures(const std::vector<double>& times) {
  RecordingOutbox out;
  DispatcherConfig cfg;
  cfg.suspend_failures = 3;
  cfg.suspend_window_ms = 60000;
  Dispatcher d(cfg, out);
  const auto e = register_ok(d, 1, 1, 0);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const std::string id = "t" + std::to_string(i);
    d.submit(kClient, {task(id, 0)}, times[i]);
    d.schedule_step(times[i]);
    d.heartbeat(e, times[i]);
    d.handle_result(result(id, e, TaskStatus::kSystemFailure, -1), times[i]);
  }
  return d.executor(e)->state;
}

}  // namespace

TEST(Dispatcher, SuspendBoundaries) {
  EXPECT_EQ(after_failures({0, 30000, 59999}), ExecutorState::kSuspended);
  EXPECT_EQ(after_failures({0, 30000, 60000}), ExecutorState::kSuspended);
  EXPECT_NE(after_failures({0, 30000, 60001}), ExecutorState::kSuspended);
  EXPECT_NE(after_failures({0, 40000, 80000}), ExecutorState::kSuspended);
  EXPECT_NE(after_failures({0, 1}), ExecutorState::kSuspended);
}

TEST(Dispatcher, SuspendedExecutorGetsNoWorkUntilResumed) {
  RecordingOutbox out;
  Dispatcher d({}, out);
  const auto e = register_ok(d, 1, 1, 0);
  for (int i = 0; i < 3; ++i) {
    const std::string id = "f" + std::to_string(i);
    d.submit(kClient, {task(id, 0)}, i);
    d.schedule_step(i);
    d.handle_result(result(id, e, TaskStatus::kSystemFailure), i);
  }
  ASSERT_EQ(d.executor(e)->state, ExecutorState::kSuspended);
  bool suspend_sent = false;
  for (const auto& m : out.sent[1]) suspend_sent |= m.as<Suspend>() != nullptr;
  EXPECT_TRUE(suspend_sent);

  d.submit(kClient, {task("next")}, 10);
  EXPECT_TRUE(d.schedule_step(10).empty());
  const auto s = d.stats(10);
  EXPECT_EQ(s.suspended_executors, 1);
  EXPECT_EQ(s.total_slots, 0);

  EXPECT_TRUE(d.resume(e));
  EXPECT_EQ(d.schedule_step(11).size(), 1u);
}

TEST(Dispatcher, ConservationUnderRandomOperations) {
  RecordingOutbox out;
  DispatcherConfig cfg;
  cfg.suspend_failures = 1000;
  Dispatcher d(cfg, out);
  std::mt19937 rng(11);
  std::map<std::string, ConnectionId> conn_of;
  std::map<std::string, std::string> running;  // task -> executor
  ConnectionId next_conn = 1;
  int next_task = 0;
  double now = 0;
  std::set<std::string> finalized;

  for (int step = 0; step < 5000; ++step) {
    now += 1;
    switch (rng() % 6) {
      case 0: {
        const auto id = register_ok(d, next_conn, 1 + static_cast<int>(rng() % 4), now);
        conn_of[id] = next_conn++;
        break;
      }
      case 1:
      case 2: {
        std::vector<TaskDescriptor> batch;
        for (int i = static_cast<int>(rng() % 5); i > 0; --i) batch.push_back(task("t" + std::to_string(next_task++)));
        d.submit(kClient, std::move(batch), now);
        break;
      }
      case 3: {
        if (running.empty()) break;
        auto it = std::next(running.begin(), static_cast<long>(rng() % running.size()));
        const TaskStatus st = static_cast<TaskStatus>(rng() % 4);
        d.handle_result(result(it->first, it->second, st), now);
        running.erase(it);
        break;
      }
      case 4: {
        if (conn_of.empty() || rng() % 4 != 0) break;
        auto it = std::next(conn_of.begin(), static_cast<long>(rng() % conn_of.size()));
        d.connection_closed(it->second, now);
        for (auto r = running.begin(); r != running.end();) r = r->second == it->first ? running.erase(r) : std::next(r);
        conn_of.erase(it);
        break;
      }
      default:
        for (const auto& a : d.schedule_step(now)) running[a.task_id] = a.executor_id;
        break;
    }
    expect_conserved(d, now);
  }
  for (const auto& r : out.notified(kClient)) {
    EXPECT_TRUE(finalized.insert(r.task_id).second) << "duplicate notify for " << r.task_id;
  }
}
