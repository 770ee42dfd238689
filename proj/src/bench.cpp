#include "mtcd/bench.hpp"

#include <signal.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mtcd/clock.hpp"
#include "mtcd/provisioner.hpp"
#include "mtcd/simulation.hpp"

namespace mtcd {

namespace {

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string num(double v) { return fmt::format("{}", v); }

}  // namespace

MachineSpec MachineSpec::detect() {
  MachineSpec m;
  char host[256] = {};
  ::gethostname(host, sizeof(host) - 1);
  m.hostname = host;
  utsname u{};
  if (::uname(&u) == 0) m.kernel = std::string(u.sysname) + " " + u.release + " " + u.machine;
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) m.cpu_model = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  m.cpus = std::thread::hardware_concurrency();
#if defined(__clang__)
  m.compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  m.compiler = "gcc " __VERSION__;
#endif
  return m;
}

std::string MachineSpec::csv_row() const {
  return "# machine,hostname=" + csv_safe(hostname) + ",kernel=" + csv_safe(kernel) + ",cpu=" + csv_safe(cpu_model) +
         ",cpus=" + std::to_string(cpus) + ",compiler=" + csv_safe(compiler);
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return values[rank - 1];
}

Aggregates aggregate(const std::vector<double>& values) {
  Aggregates a;
  a.count = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.count);
  double ss = 0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.stddev = std::sqrt(ss / static_cast<double>(a.count));
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  a.min = *lo;
  a.max = *hi;
  a.p50 = percentile(values, 50);
  a.p90 = percentile(values, 90);
  a.p99 = percentile(values, 99);
  return a;
}

std::vector<fs::path> emit_report(const BenchReport& report, const fs::path& out_dir, ReportFormat format) {
  fs::create_directories(out_dir);
  const std::string stem = report.benchmark + "-" + report.param_set_id;
  const std::string key = csv_safe(report.benchmark) + "," + csv_safe(report.param_set_id) + ",";
  std::vector<fs::path> written;
  auto open = [&](const fs::path& p) {
    std::ofstream out(p, std::ios::trunc | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    written.push_back(p);
    return out;
  };

  if (format == ReportFormat::kCsv) {
    const Aggregates agg = report.aggregates();
    {
      auto out = open(out_dir / (stem + "-samples.csv"));
      out << report.machine.csv_row() << "\n";
      out << "benchmark,param_set_id,sample_idx,value_ms\n";
      for (std::size_t i = 0; i < report.samples_ms.size(); ++i) {
        out << key << i << "," << num(report.samples_ms[i]) << "\n";
      }
      out << key << "mean," << num(agg.mean) << "\n";
    }
    {
      auto out = open(out_dir / (stem + "-aggregates.csv"));
      out << report.machine.csv_row() << "\n";
      out << "benchmark,param_set_id,metric,value\n";
      const std::pair<const char*, double> rows[] = {
          {"count", static_cast<double>(agg.count)}, {"mean", agg.mean}, {"stddev", agg.stddev},
          {"min", agg.min}, {"max", agg.max}, {"p50", agg.p50}, {"p90", agg.p90}, {"p99", agg.p99}};
      for (const auto& [name, v] : rows) out << key << name << "," << num(v) << "\n";
      for (const auto& [name, v] : report.derived) out << key << csv_safe(name) << "," << num(v) << "\n";
      for (const auto& [name, v] : report.parameters) out << key << "param." << csv_safe(name) << "," << csv_safe(v) << "\n";
      out << key << "partial," << (report.partial ? 1 : 0) << "\n";
    }
    return written;
  }

  std::vector<Series> series = report.series;
  if (series.empty() && !report.samples_ms.empty()) {
    Series s{"samples", "sample_idx", "value_ms", {}};
    for (std::size_t i = 0; i < report.samples_ms.size(); ++i) s.points.emplace_back(static_cast<double>(i), report.samples_ms[i]);
    series.push_back(std::move(s));
  }
  for (const auto& s : series) {
    auto out = open(out_dir / (stem + "-" + s.name + ".dat"));
    out << report.machine.csv_row() << "\n";
    out << "# " << s.x_label << " " << s.y_label << "\n";
    for (const auto& [x, y] : s.points) out << num(x) << " " << num(y) << "\n";
  }
  return written;
}

// ---------------------------------------------------------------------------

LocalStack::LocalStack(LocalStackOptions options) : options_(std::move(options)) {
  fs::create_directories(options_.work_dir);
  for (int d = 0; d < options_.dispatchers; ++d) {
    DispatcherServer::Options so;
    so.config = options_.config;
    if (options_.dispatcher_event_log) so.log_dir = options_.work_dir / ("dispatcher" + std::to_string(d));
    servers_.push_back(std::make_unique<DispatcherServer>(so));
  }
  for (auto& s : servers_) server_threads_.emplace_back([srv = s.get()] { srv->run(); });

  int n = 0;
  for (int d = 0; d < options_.dispatchers; ++d) {
    const Endpoint ep = servers_[d]->endpoint();
    for (int e = 0; e < options_.executors_per_dispatcher; ++e, ++n) {
      const std::string name = "local-e" + std::to_string(n);
      const fs::path cache = options_.work_dir / name;
      if (options_.executor_binary) {
        processes_.push_back(ChildProcess::spawn(
            {options_.executor_binary->string(), "run", "--dispatcher", ep.to_string(), "--slots",
             std::to_string(options_.slots_per_executor), "--cache-dir", cache.string(), "--address", name,
             "--backoff-base-ms", "100", "--backoff-cap-ms", "2000", "--log-level", "warn"},
            options_.work_dir / (name + ".log")));
      } else {
        AgentConfig ac;
        ac.dispatcher = ep;
        ac.slots = options_.slots_per_executor;
        ac.cache_dir = cache;
        ac.address = name;
        ac.backoff_base = std::chrono::milliseconds(100);
        ac.backoff_cap = std::chrono::milliseconds(2000);
        agents_.push_back(std::make_unique<Agent>(ac));
        agent_threads_.emplace_back([a = agents_.back().get()] { a->run(); });
      }
    }
  }
}

LocalStack::~LocalStack() { stop(); }

std::vector<Endpoint> LocalStack::endpoints() const {
  std::vector<Endpoint> out;
  for (const auto& s : servers_) out.push_back(s->endpoint());
  return out;
}

int LocalStack::total_slots() const {
  return options_.dispatchers * options_.executors_per_dispatcher * options_.slots_per_executor;
}

bool LocalStack::wait_registered(double timeout_s) {
  const double deadline = monotonic_ms() + timeout_s * 1000.0;
  for (;;) {
    std::int64_t registered = 0;
    for (auto& s : servers_) registered += s->stats().registered_executors;
    if (registered >= static_cast<std::int64_t>(executor_count())) return true;
    if (monotonic_ms() > deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

void LocalStack::stop() {
  if (stopped_) return;
  stopped_ = true;
  for (auto& p : processes_) p.signal(SIGTERM);
  for (auto& p : processes_) p.terminate(5.0);
  for (auto& a : agents_) a->stop();
  for (auto& t : agent_threads_) t.join();
  for (auto& s : servers_) s->stop();
  for (auto& t : server_threads_) t.join();
}

std::string resolve_program(const std::string& name) {
  if (name.find('/') != std::string::npos) return name;
  const char* path = std::getenv("PATH");
  std::string_view rest = path != nullptr ? path : "/usr/bin:/bin";
  while (!rest.empty()) {
    const auto colon = rest.find(':');
    const std::string dir(rest.substr(0, colon));
    const fs::path candidate = fs::path(dir.empty() ? "." : dir) / name;
    if (::access(candidate.c_str(), X_OK) == 0) return candidate.string();
    if (colon == std::string_view::npos) break;
    rest.remove_prefix(colon + 1);
  }
  return name;
}

std::vector<TaskDescriptor> sleep_tasks(std::int64_t count, double seconds, const std::string& prefix) {
  const std::string sleep = resolve_program("sleep");
  const std::string arg = fmt::format("{}", seconds);
  std::vector<TaskDescriptor> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    TaskDescriptor t;
    t.task_id = fmt::format("{}{:06d}", prefix, i);
    t.executable = sleep;
    t.args = {arg};
    tasks.push_back(std::move(t));
  }
  return tasks;
}

double sustained_throughput(std::vector<double> finish_ms) {
  if (finish_ms.size() < 2) return 0;
  std::sort(finish_ms.begin(), finish_ms.end());
  const std::size_t n = finish_ms.size();
  const auto lo = static_cast<std::size_t>(std::floor(0.1 * static_cast<double>(n)));
  auto hi = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n))) - 1;
  hi = std::max(hi, lo + 1);
  hi = std::min(hi, n - 1);
  const double span = finish_ms[hi] - finish_ms[lo];
  if (span <= 0) return 0;
  return static_cast<double>(hi - lo) / span * 1000.0;
}

namespace {

struct RealRun {
  RunOutcome outcome;
  double wall_s = 0;
};

RealRun run_workload(LocalStack& stack, std::vector<TaskDescriptor> tasks, double timeout_s,
                     const std::optional<fs::path>& events_out) {
  ClientOptions co;
  co.events_out = events_out;
  VectorTaskSource source(std::move(tasks));
  const double t0 = monotonic_ms();
  auto run = submit_all(source, stack.endpoints(), co);
  RealRun r;
  r.outcome = wait_all(*run, timeout_s);
  r.wall_s = (monotonic_ms() - t0) / 1000.0;
  return r;
}

}  // namespace

BenchReport bench_dispatch_throughput(const ThroughputOptions& o) {
  if (o.slots < 1 || o.num_tasks < 1 || o.dispatchers < 1) throw std::invalid_argument("throughput: bad parameters");
  BenchReport r;
  r.benchmark = "throughput";
  r.param_set_id = fmt::format("{}-slots{}-tasks{}-d{}", o.simulated ? "sim" : "real", o.slots, o.num_tasks, o.dispatchers);
  r.parameters = {{"slots", std::to_string(o.slots)},
                  {"num_tasks", std::to_string(o.num_tasks)},
                  {"dispatchers", std::to_string(o.dispatchers)},
                  {"mode", o.simulated ? "simulated" : "real"}};
  r.machine = MachineSpec::detect();

  if (o.simulated) {
    const int per = std::max(1, o.slots / o.dispatchers);
    const double t0 = monotonic_ms();
    const SimResult sim = simulate(uniform_sim(o.dispatchers, per, 1, o.num_tasks, 0));
    const double wall_s = (monotonic_ms() - t0) / 1000.0;
    r.derived["completed"] = static_cast<double>(sim.completed);
    r.derived["dispatcher_loop_ceiling_tasks_per_s"] = wall_s > 0 ? static_cast<double>(sim.completed) / wall_s : 0;
    r.derived["wall_s"] = wall_s;
    r.partial = sim.completed != o.num_tasks;
    return r;
  }

  LocalStackOptions so;
  so.dispatchers = o.dispatchers;
  so.executors_per_dispatcher = std::max(1, o.slots / o.dispatchers);
  so.executor_binary = o.executor_binary;
  so.work_dir = o.work_dir;
  LocalStack stack(so);
  if (!stack.wait_registered(60)) {
    r.partial = true;
    spdlog::error("executors did not register in time");
    return r;
  }
  const RealRun run = run_workload(stack, sleep_tasks(o.num_tasks, 0), o.timeout_s, o.events_out);
  stack.stop();

  std::vector<double> finish;
  for (const auto& res : run.outcome.results) {
    if (res.t_finished <= 0) continue;
    finish.push_back(res.t_finished);
    r.samples_ms.push_back(res.t_finished - res.t_dispatched);
  }
  const RunSummary& s = run.outcome.summary;
  r.partial = !s.complete;
  r.derived["completed"] = static_cast<double>(finish.size());
  r.derived["success"] = static_cast<double>(s.success);
  r.derived["makespan_s"] = s.makespan_s;
  r.derived["throughput_tasks_per_s"] = s.throughput_tasks_per_s;
  r.derived["sustained_throughput_tasks_per_s"] = sustained_throughput(finish);
  if (!finish.empty()) r.derived["per_task_overhead_ms"] = per_task_overhead(s.makespan_s, static_cast<std::int64_t>(finish.size()));
  r.derived["wall_s"] = run.wall_s;
  return r;
}

BenchReport bench_efficiency_sweep(const EfficiencyOptions& o) {
  if (o.slots < 1) throw std::invalid_argument("efficiency: slots must be >= 1");
  const std::int64_t per_point = o.tasks_per_point > 0 ? o.tasks_per_point : 10LL * o.slots;
  BenchReport r;
  r.benchmark = "efficiency";
  r.param_set_id = fmt::format("{}-slots{}-tasks{}", o.simulated ? "sim" : "real", o.slots, per_point);
  r.parameters = {{"slots", std::to_string(o.slots)},
                  {"tasks_per_point", std::to_string(per_point)},
                  {"mode", o.simulated ? "simulated" : "real"}};
  r.machine = MachineSpec::detect();

  auto add_point = [&](double t, std::int64_t w, double makespan_s, double overhead_s) {
    const EfficiencyPoint p = efficiency(o.slots, t, w, makespan_s);
    r.efficiency_points.push_back(p);
    r.samples_ms.push_back(makespan_s * 1000.0);
    const std::string tag = fmt::format("{}", t);
    r.derived["efficiency_t=" + tag] = p.efficiency;
    r.derived["model_t=" + tag] = model_efficiency(t, overhead_s);
    r.derived["makespan_s_t=" + tag] = makespan_s;
    r.derived["speedup_t=" + tag] = speedup(static_cast<double>(w) * t, makespan_s);
    r.derived["ideal_speedup_t=" + tag] = static_cast<double>(w) * t / p.ideal_makespan_s;
    r.series.push_back(Series{"t" + tag, "processors", "efficiency", {{static_cast<double>(o.slots), p.efficiency}}});
  };

  std::vector<double> lengths;
  for (double t : o.task_lengths_s) {
    if (t <= 0) {
      spdlog::warn("task length {} has an ideal makespan of 0; point skipped", t);
      continue;
    }
    lengths.push_back(t);
  }

  if (o.simulated) {
    Provisioner prov;
    const Allocation& a = prov.request_allocation(1, o.slots, 0, ProvisionMode::kSimulated);
    prov.advance_until_ready(a.allocation_id);
    r.derived["boot_s"] = a.boot_seconds();
    r.derived["overhead_ms"] = 0;
    double total_makespan = 0;
    for (double t : lengths) {
      SimConfig c = uniform_sim(1, static_cast<int>(a.total_cores()), 1, per_point, t * 1000.0);
      c.start_ms = prov.virtual_now() * 1000.0;
      const SimResult sim = simulate(c);
      r.partial = r.partial || sim.completed != per_point;
      add_point(t, per_point, sim.makespan_s, 0);
      total_makespan += sim.makespan_s;
    }
    if (total_makespan > 0) r.derived["amortized_startup_fraction"] = amortized_startup_fraction(a.boot_seconds(), total_makespan);
    prov.release(a.allocation_id);
    return r;
  }

  LocalStackOptions so;
  so.executors_per_dispatcher = o.slots;
  so.executor_binary = o.executor_binary;
  so.work_dir = o.work_dir;
  LocalStack stack(so);
  if (!stack.wait_registered(60)) {
    r.partial = true;
    spdlog::error("executors did not register in time");
    return r;
  }
  const std::int64_t w0 = o.overhead_tasks > 0 ? o.overhead_tasks : 10LL * o.slots;
  const RealRun base = run_workload(stack, sleep_tasks(w0, 0, "o"), 600, std::nullopt);
  r.partial = !base.outcome.summary.complete;
  const double overhead_ms = per_task_overhead(base.outcome.summary.makespan_s, w0);
  r.derived["overhead_ms"] = overhead_ms;
  spdlog::info("per-task overhead {:.3f} ms over {} sleep-0 tasks", overhead_ms, w0);

  int point = 0;
  for (double t : lengths) {
    const double timeout = 60 + 4.0 * t * static_cast<double>((per_point + o.slots - 1) / o.slots);
    const RealRun run = run_workload(stack, sleep_tasks(per_point, t, fmt::format("p{}-", point++)), timeout, std::nullopt);
    r.partial = r.partial || !run.outcome.summary.complete;
    add_point(t, per_point, run.outcome.summary.makespan_s, overhead_ms / 1000.0);
  }
  return r;
}

}  // namespace mtcd
