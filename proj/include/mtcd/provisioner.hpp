// Pset-granularity provisioning: allocations of whole psets with a modeled
// boot delay, either on a virtual clock or by launching local executor
// processes against a dispatcher.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtcd/net.hpp"
#include "mtcd/process.hpp"

namespace mtcd {

// Boot seconds as a function of core count, interpolated linearly in
// log(cores) between anchor points. Below the first anchor the first value
// holds; above the last, the last segment is extended.
class BootModel {
 public:
  struct Anchor {
    std::int64_t cores;
    double seconds;
  };

  BootModel();  // (256, 125) and (163840, 1326)
  explicit BootModel(std::vector<Anchor> anchors);

  // "cores seconds" per line; '#' starts a comment.
  static BootModel load(const std::filesystem::path& path);

  double boot_time(std::int64_t cores) const;
  const std::vector<Anchor>& anchors() const { return anchors_; }

 private:
  std::vector<Anchor> anchors_;
};

enum class ProvisionMode { kReal, kSimulated };
enum class AllocationState { kBooting, kReady, kReleased, kFailed };

const char* to_string(AllocationState state);
ProvisionMode parse_provision_mode(const std::string& s);

struct Allocation {
  std::string allocation_id;
  int pset_count = 1;
  int cores_per_pset = 256;
  double duration_s = 0;
  ProvisionMode mode = ProvisionMode::kSimulated;
  AllocationState state = AllocationState::kBooting;
  // Seconds: virtual time in simulated mode, monotonic time in real mode.
  double t_requested = 0;
  double t_ready = 0;
  // Real mode: executor processes launched for this allocation.
  int executor_processes = 0;

  std::int64_t total_cores() const { return static_cast<std::int64_t>(pset_count) * cores_per_pset; }
  double boot_seconds() const { return t_ready - t_requested; }
};

struct ProvisionerOptions {
  BootModel boot;
  // Real mode only.
  std::optional<Endpoint> dispatcher;
  std::filesystem::path executor_binary = "executor";
  std::filesystem::path work_dir = "provision";
  // Executor processes per pset = round(cores_per_pset * scale_factor), min 1.
  double scale_factor = 8.0 / 256.0;
  int slots_per_executor = 1;
};

class Provisioner {
 public:
  explicit Provisioner(ProvisionerOptions options = {});
  ~Provisioner();

  Allocation& request_allocation(int pset_count, int cores_per_pset, double duration_s, ProvisionMode mode);

  // Simulated mode: moves the virtual clock and applies state transitions.
  void advance(double seconds);
  void advance_until_ready(const std::string& allocation_id);
  double virtual_now() const { return virtual_now_; }

  // Idempotent. Stops member executors; aborts a boot in progress.
  void release(const std::string& allocation_id);

  const Allocation& allocation(const std::string& allocation_id) const;
  int executors_per_pset(int cores_per_pset) const;

 private:
  void boot_real(Allocation& a);
  void stop_children(const std::string& allocation_id);

  ProvisionerOptions options_;
  double virtual_now_ = 0;
  int next_id_ = 1;
  std::map<std::string, Allocation> allocations_;
  std::map<std::string, std::vector<ChildProcess>> children_;
};

double amortized_startup_fraction(double startup_s, double makespan_s);

struct StartupBreakdown {
  std::vector<std::pair<std::string, double>> fractions;
  // Share of the total explained by the listed components.
  double coverage = 0;
};

StartupBreakdown startup_breakdown(double total_boot_s, const std::vector<std::pair<std::string, double>>& components);

}  // namespace mtcd
