// Small POSIX socket layer: RAII descriptors, endpoint parsing, blocking
// framed connections.

#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <string>
#include <utility>

#include "mtcd/protocol.hpp"

namespace mtcd {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Fd& operator=(Fd&& other) noexcept {
    if (this != &other) reset(std::exchange(other.fd_, -1));
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() { return std::exchange(fd_, -1); }
  void reset(int fd = -1);

 private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const { return host + ":" + std::to_string(port); }
  bool operator==(const Endpoint&) const = default;
};

// Parses "HOST:PORT". Throws std::invalid_argument.
Endpoint parse_endpoint(std::string_view text);
std::vector<Endpoint> parse_endpoint_list(std::string_view comma_separated);

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Listening socket bound to `ep` (port 0 picks a free port).
Fd listen_tcp(const Endpoint& ep, int backlog = 1024);
std::uint16_t local_port(int fd);
// Throws NetError on failure.
Fd connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout = std::chrono::seconds(5));

void set_nonblocking(int fd, bool on);
void set_nodelay(int fd);
// Writes every byte or throws ConnectionLost.
void write_all(int fd, std::span<const std::byte> data);

class FdSource : public ByteSource {
 public:
  explicit FdSource(int fd) : fd_(fd) {}
  std::size_t read_some(std::span<std::byte> buf) override;

 private:
  int fd_;
};

// Blocking framed connection. Reads are single-threaded; send() may be
// called from several threads.
class Connection {
 public:
  Connection() = default;
  explicit Connection(Fd fd);

  bool open() const { return fd_.valid(); }
  int fd() const { return fd_.get(); }

  void send(const Message& msg);
  void send_raw(std::span<const std::byte> frame);
  Message receive();
  // Unblocks a reader in another thread.
  void shutdown_both();
  void close();

 private:
  Fd fd_;
  std::mutex write_mu_;
  FrameDecoder decoder_;
};

}  // namespace mtcd
