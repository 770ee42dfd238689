#pragma once

#include <chrono>
#include <cstdint>

namespace mtcd {

// Milliseconds on CLOCK_MONOTONIC; comparable across processes on one host.
inline double monotonic_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

inline std::int64_t wall_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

}  // namespace mtcd
