#include "mtcd/client.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mtcd/clock.hpp"
#include "mtcd/serialization.hpp"

namespace mtcd {

// ---------------------------------------------------------------------------
// Workload files.

WorkloadReader::WorkloadReader(const fs::path& path) : in_(path) {
  if (!in_) throw std::runtime_error("cannot open workload " + path.string());
}

std::optional<TaskDescriptor> WorkloadReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    TaskDescriptor task;
    try {
      task = nlohmann::json::parse(line).get<TaskDescriptor>();
      validate(task);
    } catch (const nlohmann::json::exception& e) {
      throw WorkloadError(line_no_, e.what());
    } catch (const std::invalid_argument& e) {
      throw WorkloadError(line_no_, e.what());
    }
    if (!seen_.insert(task.task_id).second) {
      throw WorkloadError(line_no_, "duplicate task_id '" + task.task_id + "'");
    }
    return task;
  }
  return std::nullopt;
}

Workload load_workload(const fs::path& path) {
  Workload w;
  w.name = path.stem().string();
  std::error_code ec;
  const auto mtime = fs::last_write_time(path, ec);
  if (!ec) {
    w.created_at = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::file_clock::to_sys(mtime).time_since_epoch())
                       .count();
  }
  WorkloadReader reader(path);
  while (auto task = reader.next()) w.tasks.push_back(std::move(*task));
  return w;
}

std::string format_task_line(const TaskDescriptor& task) { return nlohmann::json(task).dump(); }

// ---------------------------------------------------------------------------
// Credit balancing.

int credit_for(int advertised_slots, double multiplier) {
  return std::max(1, static_cast<int>(std::llround(advertised_slots * multiplier)));
}

CreditBalancer::CreditBalancer(std::vector<DispatcherHandle> handles) : handles_(std::move(handles)) {}

std::optional<std::size_t> CreditBalancer::pick() {
  const std::size_t n = handles_.size();
  int best_free = 0;
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = (rr_ + k) % n;
    const auto& h = handles_[i];
    if (!h.reachable) continue;
    const int free = h.credit_limit - h.outstanding;
    if (free > best_free) {
      best_free = free;
      best = i;
    }
  }
  if (best) rr_ = (*best + 1) % n;
  return best;
}

void CreditBalancer::on_sent(std::size_t i) {
  ++handles_[i].outstanding;
  ++handles_[i].sent_total;
}

void CreditBalancer::on_finalized(std::size_t i) {
  if (handles_[i].outstanding > 0) --handles_[i].outstanding;
  ++handles_[i].finalized_total;
}

void CreditBalancer::mark_unreachable(std::size_t i) {
  handles_[i].reachable = false;
  handles_[i].outstanding = 0;
}

bool CreditBalancer::any_reachable() const {
  return std::any_of(handles_.begin(), handles_.end(), [](const auto& h) { return h.reachable; });
}

// ---------------------------------------------------------------------------
// Runs.

Run::Run(std::vector<DispatcherHandle> handles, ClientOptions options)
    : options_(std::move(options)), balancer_(std::move(handles)) {
  const std::size_t n = balancer_.handles().size();
  conns_.resize(n);
  batches_.resize(n);
  samples_.resize(n);
  max_outstanding_.assign(n, 0);
  if (options_.events_out) {
    events_.open(*options_.events_out, std::ios::trunc);
    if (!events_) throw std::runtime_error("cannot open events file " + options_.events_out->string());
    events_ << "task_id,event,timestamp_ms\n";
  }
}

Run::~Run() {
  {
    std::lock_guard lock(mu_);
    closing_ = true;
  }
  for (auto& c : conns_) {
    if (c) c->shutdown_both();
  }
  for (auto& t : readers_) {
    if (t.joinable()) t.join();
  }
}

std::size_t Run::submitted() const {
  std::lock_guard lock(mu_);
  return submitted_;
}

std::size_t Run::finalized() const {
  std::lock_guard lock(mu_);
  return results_.size() + rejected_;
}

bool Run::submission_failed() const {
  std::lock_guard lock(mu_);
  return failed_;
}

std::vector<std::vector<int>> Run::outstanding_samples() const {
  std::lock_guard lock(mu_);
  return samples_;
}

void Run::lose_dispatcher_locked(std::size_t index, const std::string& why) {
  if (!balancer_.handles()[index].reachable) return;
  spdlog::warn("dispatcher {} unreachable: {}", balancer_.handles()[index].address.to_string(), why);
  balancer_.mark_unreachable(index);
  for (auto it = in_flight_.begin(); it != in_flight_.end();) {
    if (it->second.dispatcher == index) {
      resubmit_.push_back(std::move(it->second.task));
      it = in_flight_.erase(it);
    } else {
      ++it;
    }
  }
  batches_[index].clear();
  if (!balancer_.any_reachable()) {
    failed_ = true;
    error_ = "all dispatchers unreachable";
  }
  cv_.notify_all();
}

void Run::flush_locked(std::unique_lock<std::mutex>& lock) {
  for (std::size_t i = 0; i < batches_.size(); ++i) {
    if (batches_[i].empty()) continue;
    std::vector<TaskDescriptor> batch = std::exchange(batches_[i], {});
    auto conn = conns_[i];
    lock.unlock();
    bool ok = true;
    std::string why;
    try {
      conn->send(Submit{std::move(batch)});
    } catch (const std::exception& e) {
      ok = false;
      why = e.what();
    }
    lock.lock();
    if (!ok) lose_dispatcher_locked(i, why);
  }
}

bool Run::pump_locked(std::unique_lock<std::mutex>& lock, TaskSource* source) {
  for (;;) {
    if (failed_) {
      flush_locked(lock);
      return false;
    }
    if (resubmit_.empty() && (source_done_ || source == nullptr)) {
      flush_locked(lock);
      return false;
    }
    const auto idx = balancer_.pick();
    if (!idx) {
      flush_locked(lock);
      return true;
    }
    TaskDescriptor task;
    if (!resubmit_.empty()) {
      task = std::move(resubmit_.back());
      resubmit_.pop_back();
    } else {
      auto next = source->next();
      if (!next) {
        source_done_ = true;
        continue;
      }
      task = std::move(*next);
      ++submitted_;
    }
    balancer_.on_sent(*idx);
    const int outstanding = balancer_.handles()[*idx].outstanding;
    samples_[*idx].push_back(outstanding);
    max_outstanding_[*idx] = std::max(max_outstanding_[*idx], outstanding);
    const std::string id = task.task_id;
    in_flight_[id] = Pending{task, *idx, monotonic_ms()};
    batches_[*idx].push_back(std::move(task));
    if (batches_[*idx].size() >= options_.max_batch) flush_locked(lock);
  }
}

void Run::write_events_locked(const TaskResult& r, double t_sent) {
  if (!events_.is_open()) return;
  char buf[512];
  const std::pair<const char*, double> rows[] = {
      {"submitted", t_sent}, {"dispatched", r.t_dispatched}, {"started", r.t_started}, {"finished", r.t_finished}};
  for (const auto& [event, ts] : rows) {
    std::snprintf(buf, sizeof(buf), ",%s,%.3f\n", event, ts);
    events_ << r.task_id << buf;
  }
}

void Run::accept_result_locked(std::size_t index, TaskResult result) {
  if (finalized_ids_.count(result.task_id) != 0) return;
  auto it = in_flight_.find(result.task_id);
  if (it == in_flight_.end()) return;
  const std::size_t owner = it->second.dispatcher;
  if (owner != index) return;
  write_events_locked(result, it->second.t_sent);
  in_flight_.erase(it);
  balancer_.on_finalized(owner);
  finalized_ids_.insert(result.task_id);
  results_.push_back(std::move(result));
}

void Run::reader_loop(std::size_t index) {
  auto conn = conns_[index];
  try {
    for (;;) {
      Message msg = conn->receive();
      if (auto* notify = std::get_if<ResultNotify>(&msg.payload)) {
        std::lock_guard lock(mu_);
        accept_result_locked(index, std::move(notify->result));
        cv_.notify_all();
      } else if (const auto* ack = msg.as<SubmitAck>()) {
        if (ack->rejected.empty()) continue;
        std::lock_guard lock(mu_);
        for (const auto& r : ack->rejected) {
          spdlog::warn("task '{}' rejected by {}: {}", r.task_id, balancer_.handles()[index].address.to_string(),
                       r.reason);
          auto it = in_flight_.find(r.task_id);
          if (it == in_flight_.end() || it->second.dispatcher != index) continue;
          in_flight_.erase(it);
          balancer_.on_finalized(index);
          finalized_ids_.insert(r.task_id);
          ++rejected_;
        }
        cv_.notify_all();
      } else if (const auto* err = msg.as<ErrorReply>()) {
        spdlog::warn("dispatcher {} error: {} ({})", balancer_.handles()[index].address.to_string(), err->message,
                     err->code);
      }
    }
  } catch (const std::exception& e) {
    std::lock_guard lock(mu_);
    if (!closing_) lose_dispatcher_locked(index, e.what());
  }
}

std::unique_ptr<Run> submit_all(TaskSource& tasks, const std::vector<Endpoint>& dispatchers,
                                const ClientOptions& options) {
  std::vector<DispatcherHandle> handles;
  std::vector<std::shared_ptr<Connection>> conns;
  for (const auto& ep : dispatchers) {
    DispatcherHandle h;
    h.address = ep;
    std::shared_ptr<Connection> conn;
    try {
      conn = std::make_shared<Connection>(connect_tcp(ep, options.connect_timeout));
      conn->send(StatsRequest{});
      Message reply = conn->receive();
      const auto* stats = reply.as<StatsReply>();
      if (stats == nullptr) throw ProtocolError("expected STATS_REPLY");
      h.advertised_slots = static_cast<int>(stats->stats.total_slots);
      h.credit_limit = options.credit_limit_override.value_or(credit_for(h.advertised_slots, options.credit_multiplier));
    } catch (const std::exception& e) {
      spdlog::warn("dispatcher {} unreachable: {}", ep.to_string(), e.what());
      h.reachable = false;
      conn.reset();
    }
    handles.push_back(h);
    conns.push_back(std::move(conn));
  }

  std::unique_ptr<Run> run(new Run(std::move(handles), options));
  run->conns_ = std::move(conns);
  std::unique_lock lock(run->mu_);
  if (!run->balancer_.any_reachable()) {
    run->failed_ = true;
    run->error_ = "no dispatcher reachable";
    return run;
  }
  for (std::size_t i = 0; i < run->conns_.size(); ++i) {
    if (run->conns_[i]) run->readers_.emplace_back([r = run.get(), i] { r->reader_loop(i); });
  }
  while (run->pump_locked(lock, &tasks)) {
    run->cv_.wait(lock);
  }
  if (run->failed_) {
    spdlog::error("submission failed after {} tasks: {}", run->submitted_, run->error_);
  }
  return run;
}

std::unique_ptr<Run> submit_all(const Workload& workload, const std::vector<Endpoint>& dispatchers,
                                const ClientOptions& options) {
  VectorTaskSource source(workload.tasks);
  return submit_all(source, dispatchers, options);
}

RunSummary summarize(const std::vector<TaskResult>& results) {
  RunSummary s;
  s.total = results.size();
  double first = 0;
  double last = 0;
  bool any = false;
  for (const auto& r : results) {
    switch (r.status) {
      case TaskStatus::kSuccess: ++s.success; break;
      case TaskStatus::kAppFailure: ++s.app_failure; break;
      case TaskStatus::kSystemFailure: ++s.system_failure; break;
      case TaskStatus::kTimeout: ++s.timeout; break;
      case TaskStatus::kLost: ++s.lost; break;
    }
    if (!any) {
      first = r.t_dispatched;
      last = r.t_finished;
      any = true;
    } else {
      first = std::min(first, r.t_dispatched);
      last = std::max(last, r.t_finished);
    }
  }
  s.makespan_s = any ? (last - first) / 1000.0 : 0.0;
  s.throughput_tasks_per_s = s.makespan_s > 0 ? static_cast<double>(s.total) / s.makespan_s : 0.0;
  return s;
}

RunOutcome wait_all(Run& run, double timeout_s) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                                std::chrono::duration<double>(timeout_s));
  std::unique_lock lock(run.mu_);
  for (;;) {
    run.pump_locked(lock, nullptr);
    const bool drained = run.in_flight_.empty() && run.resubmit_.empty();
    if ((drained && run.source_done_) || run.failed_) break;
    if (run.cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
      run.pump_locked(lock, nullptr);
      break;
    }
  }

  RunOutcome out;
  out.results = run.results_;
  out.summary = summarize(out.results);
  out.summary.rejected = run.rejected_;
  out.summary.submission_failed = run.failed_;
  out.summary.error = run.error_;
  std::vector<std::string> stragglers;
  for (const auto& [id, pending] : run.in_flight_) stragglers.push_back(id);
  for (const auto& t : run.resubmit_) stragglers.push_back(t.task_id);
  std::sort(stragglers.begin(), stragglers.end());
  for (const auto& id : stragglers) {
    TaskResult lost;
    lost.task_id = id;
    lost.status = TaskStatus::kLost;
    lost.exit_code = kExitKilled;
    out.results.push_back(std::move(lost));
  }
  out.summary.lost_to_client = stragglers.size();
  out.summary.complete = stragglers.empty() && run.source_done_ && !run.failed_;
  for (const auto& h : run.balancer_.handles()) out.summary.tasks_per_dispatcher.push_back(h.finalized_total);
  out.summary.max_outstanding_per_dispatcher = run.max_outstanding_;
  if (run.events_.is_open()) run.events_.flush();
  return out;
}

}  // namespace mtcd
