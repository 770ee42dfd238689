// Single-threaded poll() event loop that owns a Dispatcher and speaks the
// wire protocol to clients and executors.

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <unordered_map>

#include "mtcd/dispatcher.hpp"
#include "mtcd/net.hpp"

namespace mtcd {

// Appends `task_id,event,timestamp_ms` lines to a CSV file.
class CsvEventLog : public EventSink {
 public:
  explicit CsvEventLog(const std::filesystem::path& path);
  void record(std::string_view task_id, std::string_view event, double timestamp_ms) override;
  void flush();

 private:
  std::mutex mu_;
  std::ofstream out_;
};

class DispatcherServer : private Outbox {
 public:
  struct Options {
    Endpoint bind{"127.0.0.1", 0};
    DispatcherConfig config;
    std::optional<std::filesystem::path> log_dir;
  };

  explicit DispatcherServer(Options options);
  ~DispatcherServer() override;

  std::uint16_t port() const { return port_; }
  Endpoint endpoint() const { return {options_.bind.host == "0.0.0.0" ? "127.0.0.1" : options_.bind.host, port_}; }

  // Runs the loop until stop(). Call from exactly one thread.
  void run();
  // Thread-safe.
  void stop();

  // Consistent snapshot, thread-safe.
  DispatcherStats stats();
  // Runs `fn` against the core inside the state domain (thread-safe).
  template <typename Fn>
  auto with_core(Fn&& fn) {
    std::lock_guard lock(state_mu_);
    return fn(core_);
  }

 private:
  struct Conn {
    Fd fd;
    FrameDecoder decoder;
    Bytes out;
    std::size_t out_pos = 0;
    bool broken = false;
    bool close_after_flush = false;
  };

  bool send(ConnectionId to, const Message& msg) override;
  void accept_all();
  void read_conn(ConnectionId id, Conn& conn, double now);
  void handle(ConnectionId id, Conn& conn, Message msg, double now);
  void flush_conn(Conn& conn);
  void reap(double now);

  Options options_;
  Fd listen_fd_;
  Fd wake_fd_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::unique_ptr<CsvEventLog> event_log_;

  std::mutex state_mu_;
  Dispatcher core_;
  std::unordered_map<ConnectionId, std::unique_ptr<Conn>> conns_;
  ConnectionId next_conn_ = 1;
  double next_liveness_check_ = 0;
};

}  // namespace mtcd
