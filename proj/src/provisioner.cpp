#include "mtcd/provisioner.hpp"

#include <signal.h>

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mtcd/clock.hpp"

namespace mtcd {

BootModel::BootModel() : BootModel({{256, 125.0}, {163840, 1326.0}}) {}

BootModel::BootModel(std::vector<Anchor> anchors) : anchors_(std::move(anchors)) {
  if (anchors_.empty()) throw std::invalid_argument("boot model needs at least one anchor");
  for (std::size_t i = 0; i < anchors_.size(); ++i) {
    if (anchors_[i].cores <= 0 || anchors_[i].seconds < 0) throw std::invalid_argument("bad boot anchor");
    if (i > 0 && (anchors_[i].cores <= anchors_[i - 1].cores || anchors_[i].seconds < anchors_[i - 1].seconds)) {
      throw std::invalid_argument("boot anchors must increase in cores and not decrease in seconds");
    }
  }
}

BootModel BootModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open boot model " + path.string());
  std::vector<Anchor> anchors;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    Anchor a{};
    if (!(fields >> a.cores)) continue;
    if (!(fields >> a.seconds)) throw std::runtime_error("boot model line " + std::to_string(line_no) + ": missing seconds");
    anchors.push_back(a);
  }
  return BootModel(std::move(anchors));
}

double BootModel::boot_time(std::int64_t cores) const {
  if (cores <= 0) throw std::invalid_argument("cores must be positive");
  if (anchors_.size() == 1 || cores <= anchors_.front().cores) return anchors_.front().seconds;
  std::size_t hi = 1;
  while (hi + 1 < anchors_.size() && anchors_[hi].cores < cores) ++hi;
  const Anchor& a = anchors_[hi - 1];
  const Anchor& b = anchors_[hi];
  if (cores == b.cores) return b.seconds;
  const double frac = (std::log(static_cast<double>(cores)) - std::log(static_cast<double>(a.cores))) /
                      (std::log(static_cast<double>(b.cores)) - std::log(static_cast<double>(a.cores)));
  return a.seconds + (b.seconds - a.seconds) * frac;
}

const char* to_string(AllocationState state) {
  switch (state) {
    case AllocationState::kBooting: return "booting";
    case AllocationState::kReady: return "ready";
    case AllocationState::kReleased: return "released";
    case AllocationState::kFailed: return "failed";
  }
  return "?";
}

ProvisionMode parse_provision_mode(const std::string& s) {
  if (s == "real") return ProvisionMode::kReal;
  if (s == "simulated") return ProvisionMode::kSimulated;
  throw std::invalid_argument("unknown provisioning mode '" + s + "'");
}

Provisioner::Provisioner(ProvisionerOptions options) : options_(std::move(options)) {}

Provisioner::~Provisioner() {
  for (auto& [id, a] : allocations_) release(id);
}

int Provisioner::executors_per_pset(int cores_per_pset) const {
  return std::max(1, static_cast<int>(std::lround(cores_per_pset * options_.scale_factor)));
}

Allocation& Provisioner::request_allocation(int pset_count, int cores_per_pset, double duration_s, ProvisionMode mode) {
  if (pset_count < 1) throw std::invalid_argument("pset_count must be >= 1");
  if (cores_per_pset < 1) throw std::invalid_argument("cores_per_pset must be >= 1");
  Allocation a;
  a.allocation_id = "alloc-" + std::to_string(next_id_++);
  a.pset_count = pset_count;
  a.cores_per_pset = cores_per_pset;
  a.duration_s = duration_s;
  a.mode = mode;
  a.state = AllocationState::kBooting;
  auto [it, inserted] = allocations_.emplace(a.allocation_id, a);
  Allocation& stored = it->second;
  if (mode == ProvisionMode::kSimulated) {
    stored.t_requested = virtual_now_;
    const double boot = options_.boot.boot_time(stored.total_cores());
    stored.t_ready = virtual_now_ + boot;
    if (duration_s > 0 && boot > duration_s) {
      spdlog::warn("{}: boot time {:.0f} s exceeds the {:.0f} s allocation", stored.allocation_id, boot, duration_s);
      stored.state = AllocationState::kFailed;
    }
  } else {
    boot_real(stored);
  }
  return stored;
}

void Provisioner::advance(double seconds) {
  if (seconds < 0) throw std::invalid_argument("cannot move the clock backwards");
  virtual_now_ += seconds;
  for (auto& [id, a] : allocations_) {
    if (a.mode == ProvisionMode::kSimulated && a.state == AllocationState::kBooting && virtual_now_ >= a.t_ready) {
      a.state = AllocationState::kReady;
    }
  }
}

void Provisioner::advance_until_ready(const std::string& allocation_id) {
  const Allocation& a = allocation(allocation_id);
  if (a.state == AllocationState::kBooting && a.mode == ProvisionMode::kSimulated) {
    advance(std::max(0.0, a.t_ready - virtual_now_));
  }
}

void Provisioner::boot_real(Allocation& a) {
  if (!options_.dispatcher) throw std::invalid_argument("real mode needs a dispatcher endpoint");
  const Endpoint& ep = *options_.dispatcher;
  a.t_requested = monotonic_ms() / 1000.0;

  auto query = [&]() -> std::int64_t {
    Connection conn(connect_tcp(ep));
    conn.send(StatsRequest{});
    Message reply = conn.receive();
    const auto* stats = reply.as<StatsReply>();
    if (stats == nullptr) throw ProtocolError("expected STATS_REPLY");
    return stats->stats.registered_executors;
  };
  const std::int64_t before = query();

  const int per_pset = executors_per_pset(a.cores_per_pset);
  const int count = per_pset * a.pset_count;
  const auto dir = options_.work_dir / a.allocation_id;
  std::filesystem::create_directories(dir);
  auto& kids = children_[a.allocation_id];
  for (int i = 0; i < count; ++i) {
    const std::string name = a.allocation_id + "-e" + std::to_string(i);
    kids.push_back(ChildProcess::spawn({options_.executor_binary.string(), "run", "--dispatcher", ep.to_string(),
                                        "--slots", std::to_string(options_.slots_per_executor), "--cache-dir",
                                        (dir / name).string(), "--address", name, "--max-connect-attempts", "5"},
                                       dir / (name + ".log")));
  }
  a.executor_processes = count;

  const double limit_ms = (a.duration_s > 0 ? a.duration_s : 60.0) * 1000.0;
  const double start = monotonic_ms();
  for (;;) {
    std::int64_t now_registered = 0;
    try {
      now_registered = query();
    } catch (const std::exception& e) {
      spdlog::warn("{}: stats query failed: {}", a.allocation_id, e.what());
    }
    if (now_registered - before >= count) {
      a.state = AllocationState::kReady;
      a.t_ready = monotonic_ms() / 1000.0;
      spdlog::info("{}: {} executors registered in {:.3f} s", a.allocation_id, count, a.boot_seconds());
      return;
    }
    if (monotonic_ms() - start > limit_ms) {
      spdlog::error("{}: only {} of {} executors registered before the deadline", a.allocation_id,
                    now_registered - before, count);
      stop_children(a.allocation_id);
      a.state = AllocationState::kFailed;
      return;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void Provisioner::stop_children(const std::string& allocation_id) {
  auto it = children_.find(allocation_id);
  if (it == children_.end()) return;
  for (auto& c : it->second) c.signal(SIGTERM);
  for (auto& c : it->second) c.terminate(5.0);
  children_.erase(it);
}

void Provisioner::release(const std::string& allocation_id) {
  auto it = allocations_.find(allocation_id);
  if (it == allocations_.end()) throw std::out_of_range("unknown allocation " + allocation_id);
  Allocation& a = it->second;
  if (a.state == AllocationState::kReleased) return;
  stop_children(allocation_id);
  if (a.state != AllocationState::kFailed) a.state = AllocationState::kReleased;
}

const Allocation& Provisioner::allocation(const std::string& allocation_id) const {
  auto it = allocations_.find(allocation_id);
  if (it == allocations_.end()) throw std::out_of_range("unknown allocation " + allocation_id);
  return it->second;
}

double amortized_startup_fraction(double startup_s, double makespan_s) {
  if (startup_s < 0 || makespan_s < 0 || (startup_s == 0 && makespan_s == 0)) {
    throw std::invalid_argument("startup and makespan must be >= 0 and not both 0");
  }
  return startup_s / (startup_s + makespan_s);
}

StartupBreakdown startup_breakdown(double total_boot_s, const std::vector<std::pair<std::string, double>>& components) {
  if (!(total_boot_s > 0)) throw std::invalid_argument("total boot time must be > 0");
  StartupBreakdown b;
  for (const auto& [name, seconds] : components) {
    const double f = seconds / total_boot_s;
    b.fractions.emplace_back(name, f);
    b.coverage += f;
  }
  return b;
}

}  // namespace mtcd
