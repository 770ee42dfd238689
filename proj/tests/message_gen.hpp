#pragma once

#include <cstdint>
#include <iterator>
#include <random>
#include <string>

#include "mtcd/protocol.hpp"

namespace mtcd::testing {

// Random messages of every kind, seeded so failures reproduce.
class MessageGen {
 public:
  explicit MessageGen(std::uint64_t seed) : rng_(seed) {}

  std::string str(std::size_t max_len = 12) {
    static const char* pieces[] = {"a", "Z", "0", "_", "-", " ", "\"", "\\", "\n", "\t", "/", "{", "}",
                                   ",", ":", "\xc3\xa9", "\xe2\x82\xac", "\xf0\x9f\x98\x80", "\x01"};
    std::uniform_int_distribution<std::size_t> len(0, max_len);
    std::uniform_int_distribution<std::size_t> pick(0, std::size(pieces) - 1);
    std::string s;
    for (std::size_t n = len(rng_); n > 0; --n) s += pieces[pick(rng_)];
    return s;
  }
  std::int64_t i64() { return std::uniform_int_distribution<std::int64_t>(INT64_MIN, INT64_MAX)(rng_); }
  int small(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin() { return small(0, 1) == 1; }
  double real() { return std::uniform_real_distribution<double>(-1e9, 1e9)(rng_); }

  DataRef ref() {
    DataRef r{str(), str(20), coin() ? DataKind::kStatic : DataKind::kDynamic, std::nullopt};
    if (coin()) r.size_hint_bytes = static_cast<std::uint64_t>(i64());
    return r;
  }
  std::vector<DataRef> refs() {
    std::vector<DataRef> v(static_cast<std::size_t>(small(0, 3)));
    for (auto& r : v) r = ref();
    return v;
  }
  TaskDescriptor task() {
    TaskDescriptor t;
    t.task_id = str();
    t.executable = str();
    for (int i = small(0, 4); i > 0; --i) t.args.push_back(str());
    for (int i = small(0, 3); i > 0; --i) t.env[str(6)] = str();
    t.static_inputs = refs();
    t.dynamic_inputs = refs();
    t.outputs = refs();
    t.wall_time_limit_s = i64();
    if (coin()) t.retries_remaining = small(-5, 10);
    t.capture_stdout = coin();
    t.capture_stderr = coin();
    return t;
  }
  TaskResult result() {
    TaskResult r;
    r.task_id = str();
    r.exit_code = small(-200, 255);
    r.status = static_cast<TaskStatus>(small(0, 4));
    r.executor_id = str();
    r.t_submitted = real();
    r.t_dispatched = real();
    r.t_started = real();
    r.t_finished = real();
    r.wall_finished_ms = i64();
    if (coin()) r.stdout_ref = ref();
    if (coin()) r.stderr_ref = ref();
    return r;
  }

  Message message(int tag) {
    switch (tag) {
      case 1: return Register{small(0, 3), small(-1, 1024), str()};
      case 2: return RegisterAck{str(), i64()};
      case 3: return TaskDispatch{task()};
      case 4: return TaskResultReport{result()};
      case 5: return Heartbeat{str()};
      case 6: return Suspend{str(), str(30)};
      case 7: return Shutdown{str()};
      case 8: {
        Submit s;
        for (int i = small(0, 4); i > 0; --i) s.tasks.push_back(task());
        return s;
      }
      case 9: {
        SubmitAck a;
        for (int i = small(0, 4); i > 0; --i) a.accepted.push_back(str());
        for (int i = small(0, 3); i > 0; --i) a.rejected.push_back({str(), str(30)});
        return a;
      }
      case 10: return ResultNotify{result()};
      case 11: return StatsRequest{};
      case 12: {
        DispatcherStats s{i64(), i64(), i64(), i64(), i64(), i64(), i64(), real(), i64(), i64(), i64()};
        return StatsReply{s};
      }
      default: return ErrorReply{str(), str(40)};
    }
  }
  Message any() { return message(small(1, 13)); }

 private:
  std::mt19937_64 rng_;
};

}  // namespace mtcd::testing
