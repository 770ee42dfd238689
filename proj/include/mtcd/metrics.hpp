// Metric arithmetic for many-task runs: throughput, per-task overhead,
// efficiency against an ideal makespan, speedup.

#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace mtcd {

double throughput(double completed_tasks, double elapsed_s);

// Milliseconds per task.
double per_task_overhead(double makespan_s, std::int64_t num_tasks);

struct EfficiencyPoint {
  std::int64_t processors = 0;
  double task_length_s = 0;
  std::int64_t num_tasks = 0;
  double ideal_makespan_s = 0;
  double actual_makespan_s = 0;
  double efficiency = 0;
  // Set when the raw ratio exceeded 1 and was clamped.
  bool clamped = false;
};

double ideal_makespan(std::int64_t processors, double task_length_s, std::int64_t num_tasks);
EfficiencyPoint efficiency(std::int64_t processors, double task_length_s, std::int64_t num_tasks,
                           double actual_makespan_s);

double speedup(double total_busy_cpu_s, double makespan_s);

// Tasks/s needed to keep `processors` busy with tasks of the given length.
double required_throughput(double processors, double task_length_s);

// Expected efficiency for tasks of length t when each dispatch costs o seconds.
double model_efficiency(double task_length_s, double overhead_s);

struct LrmRate {
  std::string_view name;
  double tasks_per_s;
};

// Published submission rates of batch schedulers, for report context.
const std::vector<LrmRate>& lrm_reference_rates();

}  // namespace mtcd
