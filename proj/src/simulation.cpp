#include "mtcd/simulation.hpp"

#include <queue>
#include <stdexcept>

#include "mtcd/client.hpp"

namespace mtcd {

namespace {

constexpr ConnectionId kClientConn = 1;
constexpr ConnectionId kFirstExecutorConn = 100;

// Captures what the core would put on the wire.
class CaptureOutbox : public Outbox {
 public:
  bool send(ConnectionId to, const Message& msg) override {
    sent.push_back({to, msg});
    return true;
  }
  std::vector<std::pair<ConnectionId, Message>> sent;
};

struct Completion {
  double at_ms;
  std::uint64_t seq;
  std::size_t dispatcher;
  TaskResult result;
  bool operator>(const Completion& o) const { return at_ms != o.at_ms ? at_ms > o.at_ms : seq > o.seq; }
};

struct Node {
  CaptureOutbox outbox;
  std::unique_ptr<Dispatcher> core;
  std::map<ConnectionId, SimExecutor> executors;
  std::map<ConnectionId, std::string> executor_ids;
};

}  // namespace

SimConfig uniform_sim(int dispatchers, int executors, int slots_each, std::int64_t num_tasks, double task_length_ms) {
  SimConfig c;
  c.dispatchers.assign(dispatchers, SimDispatcher{std::vector<SimExecutor>(executors, SimExecutor{slots_each})});
  c.num_tasks = num_tasks;
  c.task_length_ms = task_length_ms;
  return c;
}

SimResult simulate(const SimConfig& config) {
  if (config.dispatchers.empty()) throw std::invalid_argument("simulation needs a dispatcher");
  const std::size_t nd = config.dispatchers.size();
  std::vector<std::unique_ptr<Node>> nodes;
  std::vector<DispatcherHandle> handles;
  double now = config.start_ms;
  for (std::size_t d = 0; d < nd; ++d) {
    auto node = std::make_unique<Node>();
    node->core = std::make_unique<Dispatcher>(config.dispatcher_config, node->outbox);
    ConnectionId conn = kFirstExecutorConn;
    int slots = 0;
    for (const auto& ex : config.dispatchers[d].executors) {
      // Distinct addresses: a repeated address would retire the earlier executor.
      const std::string address = "sim-" + std::to_string(d) + "-" + std::to_string(conn);
      Message ack = node->core->register_executor(conn, Register{kProtocolVersion, ex.slots, address}, now);
      const auto* reg = ack.as<RegisterAck>();
      if (reg == nullptr) throw std::logic_error("simulated executor rejected");
      node->executors[conn] = ex;
      node->executor_ids[conn] = reg->executor_id;
      slots += ex.slots;
      ++conn;
    }
    DispatcherHandle h;
    h.address = Endpoint{"sim", static_cast<std::uint16_t>(d)};
    h.advertised_slots = slots;
    h.credit_limit = config.credit_limit_override.value_or(credit_for(slots, config.credit_multiplier));
    handles.push_back(h);
    nodes.push_back(std::move(node));
  }
  CreditBalancer balancer(std::move(handles));

  SimResult out;
  out.tasks_per_dispatcher.assign(nd, 0);
  out.max_outstanding.assign(nd, 0);
  out.outstanding_samples.assign(nd, {});
  out.finish_ms.reserve(static_cast<std::size_t>(config.num_tasks));

  std::priority_queue<Completion, std::vector<Completion>, std::greater<>> pending;
  std::uint64_t seq = 0;
  std::int64_t next_task = 0;
  bool any_dispatch = false;

  auto submit_available = [&] {
    std::vector<std::vector<TaskDescriptor>> batches(nd);
    while (next_task < config.num_tasks) {
      const auto d = balancer.pick();
      if (!d) break;
      balancer.on_sent(*d);
      const int o = balancer.handles()[*d].outstanding;
      out.outstanding_samples[*d].push_back(o);
      out.max_outstanding[*d] = std::max(out.max_outstanding[*d], o);
      TaskDescriptor t;
      t.task_id = "t" + std::to_string(next_task++);
      t.executable = "sleep";
      batches[*d].push_back(std::move(t));
    }
    for (std::size_t d = 0; d < nd; ++d) {
      if (!batches[d].empty()) nodes[d]->core->submit(kClientConn, std::move(batches[d]), now);
    }
  };

  auto drain_outboxes = [&] {
    for (std::size_t d = 0; d < nd; ++d) {
      Node& node = *nodes[d];
      node.core->schedule_step(now);
      for (auto& [to, msg] : node.outbox.sent) {
        if (const auto* dispatch = msg.as<TaskDispatch>()) {
          const SimExecutor& ex = node.executors.at(to);
          const double run_ms = config.task_length_ms / ex.speed + ex.overhead_ms;
          Completion c{now + run_ms, seq++, d, {}};
          c.result.task_id = dispatch->task.task_id;
          c.result.executor_id = node.executor_ids.at(to);
          c.result.status = TaskStatus::kSuccess;
          c.result.t_started = now;
          c.result.t_finished = now + run_ms;
          pending.push(std::move(c));
          if (!any_dispatch) {
            out.first_dispatch_ms = now;
            any_dispatch = true;
          }
          out.busy_s += run_ms / 1000.0;
        } else if (const auto* notify = msg.as<ResultNotify>()) {
          balancer.on_finalized(d);
          ++out.tasks_per_dispatcher[d];
          ++out.completed;
          out.last_finish_ms = std::max(out.last_finish_ms, notify->result.t_finished);
          out.finish_ms.push_back(notify->result.t_finished);
        }
      }
      node.outbox.sent.clear();
    }
  };

  for (;;) {
    submit_available();
    drain_outboxes();
    // Results can free credit within the same instant.
    while (!pending.empty() && pending.top().at_ms <= now) {
      Completion c = pending.top();
      pending.pop();
      nodes[c.dispatcher]->core->handle_result(std::move(c.result), now);
    }
    drain_outboxes();
    if (pending.empty()) {
      if (next_task >= config.num_tasks) break;
      throw std::logic_error("simulation stalled with tasks left");
    }
    if (pending.top().at_ms > now) now = pending.top().at_ms;
  }
  out.makespan_s = any_dispatch ? (out.last_finish_ms - out.first_dispatch_ms) / 1000.0 : 0.0;
  return out;
}

}  // namespace mtcd
