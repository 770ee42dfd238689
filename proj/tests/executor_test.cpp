#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "mtcd/clock.hpp"
#include "mtcd/dispatcher_server.hpp"
#include "mtcd/executor.hpp"
#include "test_util.hpp"

using namespace mtcd;
using namespace std::chrono_literals;
using mtcd::testing::TempDir;

namespace {

TaskDescriptor sh(const std::string& id, const std::string& script) {
  TaskDescriptor t;
  t.task_id = id;
  t.executable = "/bin/sh";
  t.args = {"-c", script};
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool wait_until(const std::function<bool()>& pred, double timeout_s) {
  const double end = monotonic_ms() + timeout_s * 1000;
  while (monotonic_ms() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(10ms);
  }
  return pred();
}

}  // namespace

TEST(TaskRunner, ExitCodes) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  auto ok = runner.execute_task(sh("ok", "exit 0"), "e1");
  EXPECT_EQ(ok.status, TaskStatus::kSuccess);
  EXPECT_EQ(ok.exit_code, 0);
  EXPECT_EQ(ok.executor_id, "e1");
  EXPECT_LE(ok.t_started, ok.t_finished);

  auto fail = runner.execute_task(sh("fail", "exit 3"));
  EXPECT_EQ(fail.status, TaskStatus::kAppFailure);
  EXPECT_EQ(fail.exit_code, 3);

  auto sig = runner.execute_task(sh("sig", "kill -9 $$"));
  EXPECT_EQ(sig.status, TaskStatus::kAppFailure);
  EXPECT_EQ(sig.exit_code, 128 + 9);

  TaskDescriptor missing;
  missing.task_id = "missing";
  missing.executable = "/nonexistent/program";
  auto nx = runner.execute_task(missing);
  EXPECT_EQ(nx.status, TaskStatus::kAppFailure);
  EXPECT_EQ(nx.exit_code, kExitSpawnFailed);
}

TEST(TaskRunner, WallTimeLimitKillsTask) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  auto t = sh("slow", "sleep 30");
  t.wall_time_limit_s = 1;
  const double t0 = monotonic_ms();
  auto r = runner.execute_task(t);
  const double took = monotonic_ms() - t0;
  EXPECT_EQ(r.status, TaskStatus::kTimeout);
  EXPECT_EQ(r.exit_code, kExitKilled);
  EXPECT_GE(took, 900);
  EXPECT_LT(took, 5000);
}

TEST(TaskRunner, SandboxEnvironmentAndOutputs) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  auto t = sh("job/1", "pwd > where; echo \"$MTCD_TASK_ID:$FOO\" > ids");
  t.env["FOO"] = "bar";
  t.outputs = {{"where", (dir / "where.txt").string(), DataKind::kDynamic, {}},
               {"ids", (dir / "ids.txt").string(), DataKind::kDynamic, {}}};
  auto r = runner.execute_task(t);
  ASSERT_EQ(r.status, TaskStatus::kSuccess) << r.exit_code;
  EXPECT_EQ(slurp(dir / "ids.txt"), "job/1:bar\n");
  const std::string where = slurp(dir / "where.txt");
  EXPECT_EQ(fs::path(where.substr(0, where.size() - 1)), fs::canonical(runner.sandbox_for("job/1").parent_path()) /
                                                            runner.sandbox_for("job/1").filename());
  EXPECT_FALSE(fs::exists(runner.sandbox_for("job/1")));
  for (const auto& e : fs::directory_iterator(dir.path())) {
    EXPECT_EQ(e.path().string().find(".mtcd-partial"), std::string::npos);
  }
}

TEST(TaskRunner, MissingDeclaredOutputIsAppFailure) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  auto t = sh("noout", "true");
  t.outputs = {{"result", (dir / "result").string(), DataKind::kDynamic, {}}};
  auto r = runner.execute_task(t);
  EXPECT_EQ(r.status, TaskStatus::kAppFailure);
  EXPECT_EQ(r.exit_code, kExitStageOutFailed);
  EXPECT_FALSE(fs::exists(dir / "result"));
}

TEST(TaskRunner, InputsAreStagedIntoSandbox) {
  TempDir dir;
  std::ofstream(dir / "static.txt") << "shared";
  std::ofstream(dir / "dyn.txt") << "mine";
  TaskRunner runner(dir / "exec", 1u << 20);
  for (int i = 0; i < 3; ++i) {
    auto t = sh("in" + std::to_string(i), "cat db part > out");
    t.static_inputs = {{"db", (dir / "static.txt").string(), DataKind::kStatic, {}}};
    t.dynamic_inputs = {{"part", (dir / "dyn.txt").string(), DataKind::kDynamic, {}}};
    t.outputs = {{"out", (dir / ("out" + std::to_string(i))).string(), DataKind::kDynamic, {}}};
    auto r = runner.execute_task(t);
    ASSERT_EQ(r.status, TaskStatus::kSuccess);
    EXPECT_EQ(slurp(dir / ("out" + std::to_string(i))), "sharedmine");
  }
  // One static copy, three dynamic copies, none retained.
  EXPECT_EQ(runner.cache().copies_performed(), 4u);
  EXPECT_EQ(runner.cache().static_entries(), 1u);
  EXPECT_EQ(runner.cache().total_bytes(), 6u);

  auto bad = sh("bad", "true");
  bad.static_inputs = {{"db", (dir / "nope").string(), DataKind::kStatic, {}}};
  auto r = runner.execute_task(bad);
  EXPECT_EQ(r.status, TaskStatus::kSystemFailure);
  EXPECT_EQ(r.exit_code, kExitStageInFailed);
}

TEST(TaskRunner, CapturesStdoutWhenAsked) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  auto t = sh("loud", "echo hello; echo oops >&2");
  t.capture_stdout = true;
  auto r = runner.execute_task(t);
  ASSERT_TRUE(r.stdout_ref.has_value());
  EXPECT_FALSE(r.stderr_ref.has_value());
  EXPECT_EQ(slurp(r.stdout_ref->source_uri), "hello\n");
}

TEST(TaskRunner, KillAllReportsLost) {
  TempDir dir;
  TaskRunner runner(dir / "exec", 1u << 20);
  TaskResult r;
  std::thread t([&] { r = runner.execute_task(sh("victim", "sleep 30")); });
  ASSERT_TRUE(wait_until([&] { return runner.running() == 1; }, 5));
  runner.kill_all();
  t.join();
  EXPECT_EQ(r.status, TaskStatus::kLost);
}

TEST(Agent, ReconnectDelayDoublesUpToCap) {
  const auto base = 100ms;
  const auto cap = 1000ms;
  EXPECT_EQ(reconnect_delay(0, base, cap), 100ms);
  EXPECT_EQ(reconnect_delay(1, base, cap), 200ms);
  EXPECT_EQ(reconnect_delay(3, base, cap), 800ms);
  EXPECT_EQ(reconnect_delay(4, base, cap), 1000ms);
  EXPECT_EQ(reconnect_delay(60, base, cap), 1000ms);
}

TEST(Agent, RunsTasksFromDispatcher) {
  TempDir dir;
  DispatcherServer server({});
  std::thread loop([&] { server.run(); });

  AgentConfig cfg;
  cfg.dispatcher = server.endpoint();
  cfg.slots = 2;
  cfg.cache_dir = dir / "agent";
  Agent agent(cfg);
  std::thread agent_thread([&] { agent.run(); });
  ASSERT_TRUE(wait_until([&] { return server.stats().registered_executors == 1; }, 5));
  EXPECT_EQ(server.stats().total_slots, 2);

  Connection client(connect_tcp(server.endpoint()));
  client.send(Submit{{sh("a", "exit 0"), sh("b", "exit 4")}});
  std::map<std::string, TaskResult> results;
  while (results.size() < 2) {
    Message m = client.receive();
    if (auto* n = m.as<ResultNotify>()) results[n->result.task_id] = n->result;
  }
  EXPECT_EQ(results["a"].status, TaskStatus::kSuccess);
  EXPECT_EQ(results["b"].exit_code, 4);
  EXPECT_EQ(results["a"].executor_id, agent.executor_id());
  EXPECT_LE(results["a"].t_dispatched, results["a"].t_started);

  agent.stop();
  agent_thread.join();
  server.stop();
  loop.join();
}

TEST(Agent, ReconnectsWithBackoffAfterDispatcherDeath) {
  TempDir dir;
  auto server = std::make_unique<DispatcherServer>(DispatcherServer::Options{});
  const Endpoint ep = server->endpoint();
  auto loop = std::thread([s = server.get()] { s->run(); });

  AgentConfig cfg;
  cfg.dispatcher = ep;
  cfg.cache_dir = dir / "agent";
  cfg.backoff_base = 50ms;
  cfg.backoff_cap = 400ms;
  Agent agent(cfg);
  std::thread agent_thread([&] { agent.run(); });
  ASSERT_TRUE(wait_until([&] { return agent.connected(); }, 5));

  server->stop();
  loop.join();
  server.reset();
  ASSERT_TRUE(wait_until([&] { return !agent.connected(); }, 5));
  // Several attempts while nothing listens, spaced by growing delays.
  ASSERT_TRUE(wait_until([&] { return agent.reconnect_attempts() >= 4; }, 5));
  EXPECT_EQ(agent.sessions(), 1);

  DispatcherServer::Options opts;
  opts.bind = ep;
  DispatcherServer revived(opts);
  std::thread loop2([&] { revived.run(); });
  ASSERT_TRUE(wait_until([&] { return revived.stats().registered_executors == 1; }, 5));
  EXPECT_EQ(agent.sessions(), 2);
  EXPECT_TRUE(agent.connected());
  EXPECT_FALSE(agent.executor_id().empty());

  agent.stop();
  agent_thread.join();
  revived.stop();
  loop2.join();
}

TEST(Agent, GivesUpAfterConnectBudget) {
  TempDir dir;
  // Reserve a port, then close it so nothing listens there.
  Endpoint ep{"127.0.0.1", 0};
  {
    Fd l = listen_tcp(ep);
    ep.port = local_port(l.get());
  }
  AgentConfig cfg;
  cfg.dispatcher = ep;
  cfg.cache_dir = dir / "agent";
  cfg.backoff_base = 10ms;
  cfg.backoff_cap = 20ms;
  cfg.max_connect_attempts = 3;
  Agent agent(cfg);
  EXPECT_EQ(agent.run(), 1);
  EXPECT_EQ(agent.reconnect_attempts(), 3);
}
