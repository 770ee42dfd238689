// Child process handles for helper programs (executor agents).

#pragma once

#include <sys/types.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mtcd {

class ChildProcess {
 public:
  ChildProcess() = default;
  // Starts argv[0] (PATH is searched when it has no '/'). Throws on failure.
  // When `log_file` is set, stdout and stderr are appended to it.
  static ChildProcess spawn(const std::vector<std::string>& argv,
                            const std::optional<std::filesystem::path>& log_file = std::nullopt);

  ChildProcess(ChildProcess&& other) noexcept;
  ChildProcess& operator=(ChildProcess&& other) noexcept;
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;
  // Kills and reaps a still-running child.
  ~ChildProcess();

  pid_t pid() const { return pid_; }
  bool running() const { return pid_ > 0 && !status_; }
  bool signal(int sig) const;
  // Non-blocking check; returns the wait status once the child is gone.
  std::optional<int> poll();
  // Waits up to `timeout_s` (forever when negative); nullopt on timeout.
  std::optional<int> wait(double timeout_s = -1);
  // SIGTERM, then SIGKILL after `grace_s`.
  int terminate(double grace_s = 5.0);

 private:
  pid_t pid_ = -1;
  std::optional<int> status_;
};

// Path of a program installed next to the running binary, if present.
std::optional<std::filesystem::path> sibling_program(const std::string& name);

}  // namespace mtcd
