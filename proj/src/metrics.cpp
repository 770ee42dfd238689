#include "mtcd/metrics.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <stdexcept>

namespace mtcd {

double throughput(double completed_tasks, double elapsed_s) {
  if (!(elapsed_s > 0)) throw std::invalid_argument("elapsed_s must be > 0");
  return completed_tasks / elapsed_s;
}

double per_task_overhead(double makespan_s, std::int64_t num_tasks) {
  if (num_tasks <= 0) throw std::invalid_argument("num_tasks must be > 0");
  return makespan_s * 1000.0 / static_cast<double>(num_tasks);
}

double ideal_makespan(std::int64_t processors, double task_length_s, std::int64_t num_tasks) {
  if (processors <= 0) throw std::invalid_argument("processors must be > 0");
  const std::int64_t waves = (num_tasks + processors - 1) / processors;
  return static_cast<double>(waves) * task_length_s;
}

EfficiencyPoint efficiency(std::int64_t processors, double task_length_s, std::int64_t num_tasks,
                           double actual_makespan_s) {
  if (processors <= 0 || num_tasks <= 0 || task_length_s < 0 || !(actual_makespan_s > 0)) {
    throw std::invalid_argument("efficiency: arguments must be positive");
  }
  EfficiencyPoint p;
  p.processors = processors;
  p.task_length_s = task_length_s;
  p.num_tasks = num_tasks;
  p.ideal_makespan_s = ideal_makespan(processors, task_length_s, num_tasks);
  p.actual_makespan_s = actual_makespan_s;
  const double raw = p.ideal_makespan_s / actual_makespan_s;
  if (raw > 1.0) {
    spdlog::warn("efficiency {:.6f} above 1 (P={}, t={}, W={}); clamped", raw, processors, task_length_s, num_tasks);
    p.efficiency = 1.0;
    p.clamped = true;
  } else {
    p.efficiency = raw;
  }
  return p;
}

double speedup(double total_busy_cpu_s, double makespan_s) {
  if (!(makespan_s > 0)) throw std::invalid_argument("makespan_s must be > 0");
  return total_busy_cpu_s / makespan_s;
}

double required_throughput(double processors, double task_length_s) {
  if (!(processors > 0) || !(task_length_s > 0)) throw std::invalid_argument("arguments must be positive");
  return processors / task_length_s;
}

double model_efficiency(double task_length_s, double overhead_s) {
  const double denom = task_length_s + overhead_s;
  return denom > 0 ? task_length_s / denom : 0.0;
}

const std::vector<LrmRate>& lrm_reference_rates() {
  static const std::vector<LrmRate> rates = {
      {"PBS", 0.45}, {"Condor", 0.49}, {"Condor-J2", 22.0}, {"Cobalt", 0.037}};
  return rates;
}

}  // namespace mtcd
