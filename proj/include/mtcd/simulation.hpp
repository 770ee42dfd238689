// Virtual-clock run of the real dispatcher core and client credit balancer
// against modeled executors. Deterministic for a given configuration.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mtcd/dispatcher.hpp"

namespace mtcd {

struct SimExecutor {
  int slots = 1;
  // Task runtime is divided by this factor.
  double speed = 1.0;
  // Fixed virtual milliseconds added to every task (fork/exec, reporting).
  double overhead_ms = 0;
};

struct SimDispatcher {
  std::vector<SimExecutor> executors;
};

struct SimConfig {
  std::vector<SimDispatcher> dispatchers;
  std::int64_t num_tasks = 0;
  double task_length_ms = 0;
  double credit_multiplier = 3.0;
  std::optional<int> credit_limit_override;
  // Virtual time at which the first task is submitted (e.g. after boot).
  double start_ms = 0;
  DispatcherConfig dispatcher_config;
};

struct SimResult {
  std::int64_t completed = 0;
  double first_dispatch_ms = 0;
  double last_finish_ms = 0;
  double makespan_s = 0;
  double busy_s = 0;
  std::vector<std::int64_t> tasks_per_dispatcher;
  std::vector<int> max_outstanding;
  std::vector<std::vector<int>> outstanding_samples;
  std::vector<double> finish_ms;
};

SimResult simulate(const SimConfig& config);

// Every dispatcher gets `executors` executors with `slots_each` slots.
SimConfig uniform_sim(int dispatchers, int executors, int slots_each, std::int64_t num_tasks, double task_length_ms);

}  // namespace mtcd
