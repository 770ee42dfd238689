#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <cctype>
#include <cerrno>
#include <cstring>
#include <thread>

#include "mtcd/clock.hpp"
#include "mtcd/executor.hpp"

extern char** environ;

namespace mtcd {

namespace {

constexpr const char* kStdoutFile = ".mtcd-stdout";
constexpr const char* kStderrFile = ".mtcd-stderr";

// Maps an opaque task id onto a single safe path component.
std::string encode_component(std::string_view id) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (std::size_t i = 0; i < id.size(); ++i) {
    const auto c = static_cast<unsigned char>(id[i]);
    const bool plain = std::isalnum(c) || c == '_' || c == '-' || (c == '.' && i > 0);
    if (plain) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 15]);
    }
  }
  return out.empty() ? "%" : out;
}

class SpawnFileActions {
 public:
  SpawnFileActions() { posix_spawn_file_actions_init(&fa_); }
  ~SpawnFileActions() { posix_spawn_file_actions_destroy(&fa_); }
  posix_spawn_file_actions_t* get() { return &fa_; }

 private:
  posix_spawn_file_actions_t fa_;
};

class SpawnAttr {
 public:
  SpawnAttr() { posix_spawnattr_init(&attr_); }
  ~SpawnAttr() { posix_spawnattr_destroy(&attr_); }
  posix_spawnattr_t* get() { return &attr_; }

 private:
  posix_spawnattr_t attr_;
};

int decode_wait_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return -1;
}

}  // namespace

TaskRunner::TaskRunner(fs::path cache_dir, std::uint64_t cache_capacity_bytes)
    : cache_dir_(std::move(cache_dir)), log_dir_(cache_dir_ / "logs"), cache_(cache_dir_ / "cache", cache_capacity_bytes) {
  fs::create_directories(cache_dir_ / "tasks");
  fs::create_directories(log_dir_);
  devnull_ = Fd(::open("/dev/null", O_RDWR | O_CLOEXEC));
  if (!devnull_.valid()) throw std::runtime_error("cannot open /dev/null");
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    if (std::strchr(*e, '=') != nullptr) base_env_.emplace_back(*e);
  }
}

fs::path TaskRunner::sandbox_for(const std::string& task_id) const {
  return cache_dir_ / "tasks" / encode_component(task_id);
}

std::size_t TaskRunner::running() const {
  std::lock_guard lock(mu_);
  return running_.size();
}

void TaskRunner::kill_all() {
  std::lock_guard lock(mu_);
  ++kill_epoch_;
  for (pid_t pid : running_) ::kill(-pid, SIGKILL);
}

TaskRunner::Spawned TaskRunner::spawn(const TaskDescriptor& task, const fs::path& sandbox) {
  SpawnFileActions fa;
  posix_spawn_file_actions_addchdir_np(fa.get(), sandbox.c_str());
  posix_spawn_file_actions_adddup2(fa.get(), devnull_.get(), STDIN_FILENO);
  const std::string out_path = (sandbox / kStdoutFile).string();
  const std::string err_path = (sandbox / kStderrFile).string();
  if (task.capture_stdout) {
    posix_spawn_file_actions_addopen(fa.get(), STDOUT_FILENO, out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  } else {
    posix_spawn_file_actions_adddup2(fa.get(), devnull_.get(), STDOUT_FILENO);
  }
  if (task.capture_stderr) {
    posix_spawn_file_actions_addopen(fa.get(), STDERR_FILENO, err_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  } else {
    posix_spawn_file_actions_adddup2(fa.get(), devnull_.get(), STDERR_FILENO);
  }

  SpawnAttr attr;
  sigset_t empty;
  sigemptyset(&empty);
  sigset_t defaults;
  sigemptyset(&defaults);
  for (int sig : {SIGPIPE, SIGTERM, SIGINT, SIGHUP, SIGCHLD, SIGQUIT, SIGUSR1, SIGUSR2}) sigaddset(&defaults, sig);
  posix_spawnattr_setflags(attr.get(), POSIX_SPAWN_SETPGROUP | POSIX_SPAWN_SETSIGMASK | POSIX_SPAWN_SETSIGDEF);
  posix_spawnattr_setpgroup(attr.get(), 0);
  posix_spawnattr_setsigmask(attr.get(), &empty);
  posix_spawnattr_setsigdefault(attr.get(), &defaults);

  std::vector<std::string> argv_store;
  argv_store.reserve(task.args.size() + 1);
  argv_store.push_back(task.executable);
  argv_store.insert(argv_store.end(), task.args.begin(), task.args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  argv.push_back(nullptr);

  // The agent's own environment never changes, so it is captured once.
  std::vector<std::string> env_store;
  if (task.env.empty()) {
    env_store.reserve(1);
  } else {
    for (const auto& [k, v] : task.env) env_store.push_back(k + "=" + v);
  }
  env_store.push_back("MTCD_TASK_ID=" + task.task_id);
  std::vector<char*> envp;
  envp.reserve(base_env_.size() + env_store.size() + 1);
  for (auto& kv : env_store) envp.push_back(kv.data());
  for (const auto& kv : base_env_) {
    const auto eq = kv.find('=');
    const std::string_view key(kv.data(), eq);
    const bool overridden = key == "MTCD_TASK_ID" || task.env.count(std::string(key)) != 0;
    if (!overridden) envp.push_back(const_cast<char*>(kv.c_str()));
  }
  envp.push_back(nullptr);

  Spawned out;
  const bool search_path = task.executable.find('/') == std::string::npos;
  std::lock_guard lock(mu_);
  const int rc = search_path ? posix_spawnp(&out.pid, task.executable.c_str(), fa.get(), attr.get(), argv.data(), envp.data())
                             : posix_spawn(&out.pid, task.executable.c_str(), fa.get(), attr.get(), argv.data(), envp.data());
  if (rc != 0) {
    out.pid = -1;
    out.spawn_errno = rc;
  } else {
    running_.insert(out.pid);
  }
  return out;
}

std::optional<int> TaskRunner::wait_for(pid_t pid, std::int64_t limit_s) {
  const double deadline = monotonic_ms() + static_cast<double>(limit_s) * 1000.0;
  const int pidfd = static_cast<int>(::syscall(SYS_pidfd_open, pid, 0));
  bool timed_out = false;
  if (pidfd >= 0) {
    Fd guard(pidfd);
    for (;;) {
      const double left = deadline - monotonic_ms();
      if (left <= 0) {
        timed_out = true;
        break;
      }
      pollfd pfd{pidfd, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(std::min(left + 1, 2.0e9)));
      if (rc > 0) break;
      if (rc < 0 && errno != EINTR) break;
    }
  } else {
    int status = 0;
    for (;;) {
      const pid_t r = ::waitpid(pid, &status, WNOHANG);
      if (r == pid) {
        std::lock_guard lock(mu_);
        running_.erase(pid);
        return status;
      }
      if (monotonic_ms() >= deadline) {
        timed_out = true;
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
  }
  if (timed_out) ::kill(-pid, SIGKILL);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (timed_out) ::kill(-pid, SIGKILL);
  std::lock_guard lock(mu_);
  running_.erase(pid);
  if (timed_out) return std::nullopt;
  return status;
}

TaskResult TaskRunner::execute_task(const TaskDescriptor& task, const std::string& executor_id) {
  TaskResult result;
  result.task_id = task.task_id;
  result.executor_id = executor_id;
  result.t_started = monotonic_ms();

  const fs::path sandbox = sandbox_for(task.task_id);
  std::vector<fs::path> dynamic_paths;
  auto finish = [&](TaskStatus status, int exit_code) {
    result.status = status;
    result.exit_code = exit_code;
    for (const auto& p : dynamic_paths) cache_.release(p);
    if (::rmdir(sandbox.c_str()) != 0 && errno != ENOENT) {
      std::error_code ec;
      fs::remove_all(sandbox, ec);
    }
    result.t_finished = monotonic_ms();
    result.wall_finished_ms = wall_ms();
    return result;
  };

  std::uint64_t epoch;
  {
    std::lock_guard lock(mu_);
    epoch = kill_epoch_;
  }

  // Stage in.
  try {
    if (::mkdir(sandbox.c_str(), 0755) != 0) {
      // Leftover from an earlier attempt of the same task.
      std::error_code ec;
      fs::remove_all(sandbox, ec);
      fs::create_directories(sandbox);
    }
    for (const auto& ref : task.static_inputs) {
      const fs::path cached = cache_.get(ref);
      const fs::path link = sandbox / ref.logical_name;
      if (::link(cached.c_str(), link.c_str()) != 0) fs::create_symlink(cached, link);
    }
    for (const auto& ref : task.dynamic_inputs) {
      const fs::path dst = sandbox / ref.logical_name;
      dynamic_paths.push_back(dst);
      cache_.stage_dynamic(ref, dst);
    }
  } catch (const std::exception& e) {
    spdlog::warn("task {}: staging failed: {}", task.task_id, e.what());
    return finish(TaskStatus::kSystemFailure, kExitStageInFailed);
  }

  const Spawned child = spawn(task, sandbox);
  if (child.pid < 0) {
    spdlog::debug("task {}: cannot start '{}': {}", task.task_id, task.executable, std::strerror(child.spawn_errno));
    return finish(TaskStatus::kAppFailure, kExitSpawnFailed);
  }
  const std::optional<int> status = wait_for(child.pid, task.wall_time_limit_s);
  bool killed;
  {
    std::lock_guard lock(mu_);
    killed = kill_epoch_ != epoch;
  }
  if (!status) return finish(TaskStatus::kTimeout, kExitKilled);
  if (killed && WIFSIGNALED(*status) && WTERMSIG(*status) == SIGKILL) {
    return finish(TaskStatus::kLost, kExitKilled);
  }
  const int exit_code = decode_wait_status(*status);

  // Stage out: whole files, after exit, via temp name + rename.
  TaskStatus outcome = exit_code == 0 ? TaskStatus::kSuccess : TaskStatus::kAppFailure;
  int final_code = exit_code;
  for (const auto& ref : task.outputs) {
    const fs::path produced = sandbox / ref.logical_name;
    if (!fs::exists(produced)) {
      if (outcome == TaskStatus::kSuccess) {
        spdlog::warn("task {}: declared output '{}' was not produced", task.task_id, ref.logical_name);
        outcome = TaskStatus::kAppFailure;
        final_code = kExitStageOutFailed;
      }
      continue;
    }
    const fs::path target(ref.source_uri);
    const fs::path partial = target.string() + ".mtcd-partial." + encode_component(task.task_id);
    try {
      bulk_copy(produced, partial);
      fs::rename(partial, target);
    } catch (const std::exception& e) {
      std::error_code ec;
      fs::remove(partial, ec);
      spdlog::warn("task {}: persisting output '{}' failed: {}", task.task_id, ref.logical_name, e.what());
      return finish(TaskStatus::kSystemFailure, kExitStageOutFailed);
    }
  }

  auto keep_log = [&](bool wanted, const char* file, const char* name) -> std::optional<DataRef> {
    if (!wanted) return std::nullopt;
    const fs::path dst = log_dir_ / (encode_component(task.task_id) + "." + name);
    std::error_code ec;
    fs::rename(sandbox / file, dst, ec);
    if (ec) return std::nullopt;
    return DataRef{name, dst.string(), DataKind::kDynamic, fs::file_size(dst, ec)};
  };
  result.stdout_ref = keep_log(task.capture_stdout, kStdoutFile, "stdout");
  result.stderr_ref = keep_log(task.capture_stderr, kStderrFile, "stderr");
  return finish(outcome, final_code);
}

}  // namespace mtcd
