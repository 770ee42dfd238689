// Shared-filesystem microbenchmarks. Workers are forked processes that
// start together on a pipe barrier; a thread mode exists for comparison.

#include <fcntl.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include <cerrno>
#include <fstream>
#include <functional>
#include <latch>
#include <mutex>
#include <thread>

#include "mtcd/bench.hpp"

extern char** environ;

namespace mtcd {

FsOp parse_fs_op(const std::string& s) {
  if (s == "create_file") return FsOp::kCreateFile;
  if (s == "create_dir") return FsOp::kCreateDir;
  if (s == "invoke_script") return FsOp::kInvokeScript;
  if (s == "noop_task") return FsOp::kNoopTask;
  throw std::invalid_argument("unknown fs op '" + s + "'");
}

FsLayout parse_fs_layout(const std::string& s) {
  if (s == "single_dir") return FsLayout::kSingleDir;
  if (s == "many_dirs") return FsLayout::kManyDirs;
  throw std::invalid_argument("unknown layout '" + s + "'");
}

RwMode parse_rw_mode(const std::string& s) {
  if (s == "read") return RwMode::kRead;
  if (s == "read_write") return RwMode::kReadWrite;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

const char* to_string(FsOp op) {
  switch (op) {
    case FsOp::kCreateFile: return "create_file";
    case FsOp::kCreateDir: return "create_dir";
    case FsOp::kInvokeScript: return "invoke_script";
    case FsOp::kNoopTask: return "noop_task";
  }
  return "?";
}

const char* to_string(FsLayout layout) { return layout == FsLayout::kSingleDir ? "single_dir" : "many_dirs"; }
const char* to_string(RwMode mode) { return mode == RwMode::kRead ? "read" : "read_write"; }

namespace {

double now_ms() {
  timespec ts{};
  ::clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<double>(ts.tv_sec) * 1000.0 + static_cast<double>(ts.tv_nsec) / 1e6;
}

struct Record {
  std::int32_t worker;
  std::int32_t ok;  // 1 success, 0 failure, -1 ready
  double value_ms;
};

struct WorkerSamples {
  std::vector<double> values_ms;
  int failures = 0;
};

// Calls op(worker, k, value_ms) ops_per_worker times in each of n workers.
// Must not allocate in the forked case: everything op touches is prepared
// before fork.
using WorkerOp = std::function<bool(int worker, int k, double& value_ms)>;

std::vector<WorkerSamples> run_workers(int n, int ops_per_worker, bool use_threads, const WorkerOp& op) {
  std::vector<WorkerSamples> out(static_cast<std::size_t>(n));
  for (auto& w : out) w.values_ms.reserve(static_cast<std::size_t>(ops_per_worker));

  if (use_threads) {
    std::latch start(n + 1);
    std::mutex mu;
    std::vector<std::thread> threads;
    for (int w = 0; w < n; ++w) {
      threads.emplace_back([&, w] {
        start.arrive_and_wait();
        for (int k = 0; k < ops_per_worker; ++k) {
          double v = 0;
          const bool ok = op(w, k, v);
          std::lock_guard lock(mu);
          if (ok) out[w].values_ms.push_back(v);
          else ++out[w].failures;
        }
      });
    }
    start.arrive_and_wait();
    for (auto& t : threads) t.join();
    return out;
  }

  int go[2];
  int results[2];
  if (::pipe2(go, O_CLOEXEC) != 0 || ::pipe2(results, O_CLOEXEC) != 0) throw std::runtime_error("pipe failed");
  std::vector<pid_t> pids;
  for (int w = 0; w < n; ++w) {
    const pid_t pid = ::fork();
    if (pid < 0) {
      ::close(go[1]);
      for (pid_t p : pids) ::waitpid(p, nullptr, 0);
      throw std::runtime_error("fork failed");
    }
    if (pid == 0) {
      ::close(go[1]);
      ::close(results[0]);
      Record ready{w, -1, 0};
      (void)!::write(results[1], &ready, sizeof ready);
      char c;
      while (::read(go[0], &c, 1) < 0 && errno == EINTR) {
      }
      for (int k = 0; k < ops_per_worker; ++k) {
        Record rec{w, 0, 0};
        rec.ok = op(w, k, rec.value_ms) ? 1 : 0;
        (void)!::write(results[1], &rec, sizeof rec);
      }
      ::_exit(0);
    }
    pids.push_back(pid);
  }
  ::close(go[0]);
  ::close(results[1]);

  int ready = 0;
  bool released = false;
  Record rec{};
  for (;;) {
    const ssize_t got = ::read(results[0], &rec, sizeof rec);
    if (got < 0 && errno == EINTR) continue;
    if (got != static_cast<ssize_t>(sizeof rec)) break;
    if (rec.ok < 0) {
      if (++ready == n) {
        ::close(go[1]);  // EOF releases every worker at once
        released = true;
      }
      continue;
    }
    if (rec.worker < 0 || rec.worker >= n) continue;
    if (rec.ok != 0) out[rec.worker].values_ms.push_back(rec.value_ms);
    else ++out[rec.worker].failures;
  }
  if (!released) ::close(go[1]);
  ::close(results[0]);
  for (pid_t p : pids) {
    while (::waitpid(p, nullptr, 0) < 0 && errno == EINTR) {
    }
  }
  return out;
}

bool spawn_and_wait(const char* path, char* const argv[]) {
  pid_t pid;
  if (::posix_spawn(&pid, path, nullptr, nullptr, argv, environ) != 0) return false;
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) return false;
  }
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

BenchReport base_report(const std::string& name, std::string param_set_id, std::map<std::string, std::string> params) {
  BenchReport r;
  r.benchmark = name;
  r.param_set_id = std::move(param_set_id);
  r.parameters = std::move(params);
  r.machine = MachineSpec::detect();
  return r;
}

}  // namespace

BenchReport bench_fsops(const FsOpsOptions& o) {
  if (o.concurrency < 1 || o.ops_per_worker < 1) throw std::invalid_argument("fsops: concurrency must be >= 1");
  BenchReport r = base_report(
      "fsops", fmt::format("{}-{}-c{}", to_string(o.op), to_string(o.layout), o.concurrency),
      {{"op", to_string(o.op)},
       {"layout", to_string(o.layout)},
       {"concurrency", std::to_string(o.concurrency)},
       {"ops_per_worker", std::to_string(o.ops_per_worker)},
       {"workers", o.use_threads ? "threads" : "processes"}});

  const fs::path root = o.target_dir / fmt::format("fsops-{}-{}-{}", to_string(o.op), to_string(o.layout), ::getpid());
  std::error_code ec;
  fs::remove_all(root, ec);
  fs::create_directories(root);

  // Every path is built before the workers start.
  const std::string script_text = "#!/bin/sh\nexit 0\n";
  std::vector<fs::path> dirs(static_cast<std::size_t>(o.concurrency));
  std::vector<std::vector<std::string>> paths(dirs.size());
  std::vector<std::string> scripts(dirs.size());
  for (int w = 0; w < o.concurrency; ++w) {
    dirs[w] = o.layout == FsLayout::kManyDirs ? root / fmt::format("w{:05d}", w) : root;
    fs::create_directories(dirs[w]);
    for (int k = 0; k < o.ops_per_worker; ++k) {
      paths[w].push_back((dirs[w] / fmt::format("w{:05d}-{:05d}", w, k)).string());
    }
    scripts[w] = (dirs[w] / fmt::format("script-w{:05d}.sh", w)).string();
    if (o.op == FsOp::kInvokeScript) {
      std::ofstream(scripts[w]) << script_text;
      fs::permissions(scripts[w], fs::perms::owner_all | fs::perms::group_read | fs::perms::others_read);
    }
  }
  const std::string true_bin = resolve_program("true");
  char true_arg0[] = "true";
  char* true_argv[] = {true_arg0, nullptr};
  std::vector<std::vector<char*>> script_argv(dirs.size());
  for (std::size_t w = 0; w < dirs.size(); ++w) script_argv[w] = {scripts[w].data(), nullptr};

  const WorkerOp op = [&](int w, int k, double& ms) {
    const char* path = paths[w][k].c_str();
    const double t0 = now_ms();
    bool ok = false;
    switch (o.op) {
      case FsOp::kCreateFile: {
        const int fd = ::open(path, O_CREAT | O_EXCL | O_WRONLY | O_CLOEXEC, 0644);
        ok = fd >= 0;
        if (ok) ::close(fd);
        break;
      }
      case FsOp::kCreateDir:
        ok = ::mkdir(path, 0755) == 0;
        break;
      case FsOp::kInvokeScript:
        ok = spawn_and_wait(scripts[w].c_str(), script_argv[w].data());
        break;
      case FsOp::kNoopTask:
        ok = spawn_and_wait(true_bin.c_str(), true_argv);
        break;
    }
    ms = now_ms() - t0;
    return ok;
  };

  const auto workers = run_workers(o.concurrency, o.ops_per_worker, o.use_threads, op);
  int failures = 0;
  for (const auto& w : workers) {
    r.samples_ms.insert(r.samples_ms.end(), w.values_ms.begin(), w.values_ms.end());
    failures += w.failures;
  }
  if (failures > 0) spdlog::warn("fsops: {} operations failed", failures);
  const Aggregates agg = r.aggregates();
  r.derived["failures"] = failures;
  if (agg.mean > 0) r.derived["aggregate_ops_per_s"] = static_cast<double>(o.concurrency) / (agg.mean / 1000.0);
  fs::remove_all(root, ec);
  return r;
}

BenchReport bench_readwrite(const ReadWriteOptions& o) {
  if (o.concurrency < 1 || o.block_bytes == 0) throw std::invalid_argument("readwrite: bad parameters");
  BenchReport r = base_report(
      "readwrite", fmt::format("{}-size{}-block{}-c{}", to_string(o.mode), o.file_size_bytes, o.block_bytes, o.concurrency),
      {{"mode", to_string(o.mode)},
       {"file_size_bytes", std::to_string(o.file_size_bytes)},
       {"block_bytes", std::to_string(o.block_bytes)},
       {"concurrency", std::to_string(o.concurrency)},
       {"workers", o.use_threads ? "threads" : "processes"}});

  const fs::path root = o.target_dir / fmt::format("readwrite-{}", ::getpid());
  std::error_code ec;
  fs::remove_all(root, ec);
  fs::create_directories(root);

  std::vector<std::string> inputs(static_cast<std::size_t>(o.concurrency));
  std::vector<std::string> outputs(inputs.size());
  {
    std::vector<char> chunk(1 << 20);
    for (std::size_t i = 0; i < chunk.size(); ++i) chunk[i] = static_cast<char>((i * 2654435761u) >> 13);
    for (int w = 0; w < o.concurrency; ++w) {
      inputs[w] = (root / fmt::format("in-{:05d}", w)).string();
      outputs[w] = (root / fmt::format("out-{:05d}", w)).string();
      const int fd = ::open(inputs[w].c_str(), O_CREAT | O_TRUNC | O_WRONLY | O_CLOEXEC, 0644);
      if (fd < 0) throw std::runtime_error("cannot create " + inputs[w]);
      std::uint64_t left = o.file_size_bytes;
      while (left > 0) {
        const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(left, chunk.size()));
        if (::write(fd, chunk.data(), n) != static_cast<ssize_t>(n)) {
          ::close(fd);
          throw std::runtime_error("short write to " + inputs[w]);
        }
        left -= n;
      }
      ::fsync(fd);
      if (o.drop_cache) ::posix_fadvise(fd, 0, 0, POSIX_FADV_DONTNEED);
      ::close(fd);
    }
  }
  // One buffer per worker, allocated up front.
  std::vector<std::vector<char>> buffers(inputs.size(), std::vector<char>(o.block_bytes));

  const WorkerOp op = [&](int w, int, double& ms) {
    char* buf = buffers[w].data();
    const double t0 = now_ms();
    const int in = ::open(inputs[w].c_str(), O_RDONLY | O_CLOEXEC);
    if (in < 0) return false;
    int out = -1;
    if (o.mode == RwMode::kReadWrite) {
      out = ::open(outputs[w].c_str(), O_CREAT | O_TRUNC | O_WRONLY | O_CLOEXEC, 0644);
      if (out < 0) {
        ::close(in);
        return false;
      }
    }
    bool ok = true;
    std::uint64_t total = 0;
    for (;;) {
      const ssize_t n = ::read(in, buf, o.block_bytes);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) {
        ok = false;
        break;
      }
      if (n == 0) break;
      total += static_cast<std::uint64_t>(n);
      if (out >= 0) {
        ssize_t off = 0;
        while (off < n) {
          const ssize_t wr = ::write(out, buf + off, static_cast<std::size_t>(n - off));
          if (wr < 0 && errno == EINTR) continue;
          if (wr <= 0) {
            ok = false;
            break;
          }
          off += wr;
        }
        if (!ok) break;
      }
    }
    ::close(in);
    // Written bytes count once they are durable, not when they reach the page cache.
    if (out >= 0) {
      if (ok && ::fsync(out) != 0) ok = false;
      ::close(out);
    }
    ms = now_ms() - t0;
    return ok && total == o.file_size_bytes;
  };

  const auto workers = run_workers(o.concurrency, 1, o.use_threads, op);
  int failures = 0;
  double slowest = 0;
  for (const auto& w : workers) {
    for (double v : w.values_ms) {
      r.samples_ms.push_back(v);
      slowest = std::max(slowest, v);
    }
    failures += w.failures;
  }
  r.derived["failures"] = failures;
  const double ok_bytes = static_cast<double>(o.file_size_bytes) * static_cast<double>(r.samples_ms.size());
  r.derived["aggregate_mb_per_s"] = slowest > 0 ? ok_bytes / 1e6 / (slowest / 1000.0) : 0;
  fs::remove_all(root, ec);
  return r;
}

}  // namespace mtcd
