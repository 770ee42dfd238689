#include "mtcd/process.hpp"

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "mtcd/clock.hpp"

extern char** environ;

namespace mtcd {

ChildProcess ChildProcess::spawn(const std::vector<std::string>& argv,
                                 const std::optional<std::filesystem::path>& log_file) {
  if (argv.empty()) throw std::invalid_argument("empty argv");
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  if (log_file) {
    posix_spawn_file_actions_addopen(&fa, STDOUT_FILENO, log_file->c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    posix_spawn_file_actions_adddup2(&fa, STDOUT_FILENO, STDERR_FILENO);
  }
  posix_spawnattr_t attr;
  posix_spawnattr_init(&attr);
  sigset_t empty;
  sigemptyset(&empty);
  posix_spawnattr_setsigmask(&attr, &empty);
  posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETSIGMASK);

  std::vector<std::string> store = argv;
  std::vector<char*> args;
  for (auto& a : store) args.push_back(a.data());
  args.push_back(nullptr);
  ChildProcess child;
  const int rc = posix_spawnp(&child.pid_, args[0], &fa, &attr, args.data(), environ);
  posix_spawnattr_destroy(&attr);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw std::runtime_error("cannot start " + argv[0] + ": " + std::strerror(rc));
  return child;
}

ChildProcess::ChildProcess(ChildProcess&& other) noexcept
    : pid_(std::exchange(other.pid_, -1)), status_(std::exchange(other.status_, std::nullopt)) {}

ChildProcess& ChildProcess::operator=(ChildProcess&& other) noexcept {
  if (this != &other) {
    if (running()) {
      signal(SIGKILL);
      wait();
    }
    pid_ = std::exchange(other.pid_, -1);
    status_ = std::exchange(other.status_, std::nullopt);
  }
  return *this;
}

ChildProcess::~ChildProcess() {
  if (running()) {
    signal(SIGKILL);
    wait();
  }
}

bool ChildProcess::signal(int sig) const { return running() && ::kill(pid_, sig) == 0; }

std::optional<int> ChildProcess::poll() {
  if (status_ || pid_ <= 0) return status_;
  int status = 0;
  const pid_t r = ::waitpid(pid_, &status, WNOHANG);
  if (r == pid_) status_ = status;
  return status_;
}

std::optional<int> ChildProcess::wait(double timeout_s) {
  if (status_ || pid_ <= 0) return status_;
  if (timeout_s < 0) {
    int status = 0;
    while (::waitpid(pid_, &status, 0) < 0) {
      if (errno != EINTR) return std::nullopt;
    }
    status_ = status;
    return status_;
  }
  const double deadline = monotonic_ms() + timeout_s * 1000.0;
  while (!poll()) {
    if (monotonic_ms() >= deadline) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return status_;
}

int ChildProcess::terminate(double grace_s) {
  if (!running()) return status_.value_or(0);
  signal(SIGTERM);
  if (auto st = wait(grace_s)) return *st;
  signal(SIGKILL);
  return wait().value_or(0);
}

std::optional<std::filesystem::path> sibling_program(const std::string& name) {
  std::error_code ec;
  const auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) return std::nullopt;
  auto candidate = self.parent_path() / name;
  if (::access(candidate.c_str(), X_OK) == 0) return candidate;
  return std::nullopt;
}

}  // namespace mtcd
