#include "mtcd/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace mtcd {

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host.empty() || ep.host == "*" ? "0.0.0.0"
                           : ep.host == "localhost"           ? "127.0.0.1"
                                                              : ep.host;
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;

  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw NetError("cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

}  // namespace

void Fd::reset(int fd) {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

Endpoint parse_endpoint(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon + 1 == text.size()) {
    throw std::invalid_argument("expected HOST:PORT, got '" + std::string(text) + "'");
  }
  const std::string port_text(text.substr(colon + 1));
  char* end = nullptr;
  const long port = std::strtol(port_text.c_str(), &end, 10);
  if (*end != '\0' || port < 0 || port > 65535) {
    throw std::invalid_argument("bad port in '" + std::string(text) + "'");
  }
  return Endpoint{std::string(text.substr(0, colon)), static_cast<std::uint16_t>(port)};
}

std::vector<Endpoint> parse_endpoint_list(std::string_view text) {
  std::vector<Endpoint> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const auto item = text.substr(0, comma);
    if (!item.empty()) out.push_back(parse_endpoint(item));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

Fd listen_tcp(const Endpoint& ep, int backlog) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd.valid()) throw NetError(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(ep);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw NetError(errno_text(("bind " + ep.to_string()).c_str()));
  }
  if (::listen(fd.get(), backlog) != 0) throw NetError(errno_text("listen"));
  return fd;
}

std::uint16_t local_port(int fd) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    throw NetError(errno_text("getsockname"));
  }
  return ntohs(addr.sin_port);
}

Fd connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd.valid()) throw NetError(errno_text("socket"));
  sockaddr_in addr = resolve(ep);
  set_nonblocking(fd.get(), true);
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    if (errno != EINPROGRESS) throw NetError(errno_text(("connect " + ep.to_string()).c_str()));
    pollfd pfd{fd.get(), POLLOUT, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (rc <= 0) throw NetError("connect " + ep.to_string() + ": timed out");
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      throw NetError("connect " + ep.to_string() + ": " + std::strerror(err));
    }
  }
  set_nonblocking(fd.get(), false);
  set_nodelay(fd.get());
  return fd;
}

void set_nonblocking(int fd, bool on) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK));
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

void write_all(int fd, std::span<const std::byte> data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionLost(errno_text("send"));
    }
    data = data.subspan(static_cast<std::size_t>(n));
  }
}

std::size_t FdSource::read_some(std::span<std::byte> buf) {
  for (;;) {
    const ssize_t n = ::read(fd_, buf.data(), buf.size());
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    if (errno == ECONNRESET || errno == EBADF || errno == ENOTCONN) return 0;
    throw ConnectionLost(errno_text("read"));
  }
}

Connection::Connection(Fd fd) : fd_(std::move(fd)) {}

void Connection::send(const Message& msg) {
  const Bytes frame = encode(msg);
  send_raw(frame);
}

void Connection::send_raw(std::span<const std::byte> frame) {
  std::lock_guard lock(write_mu_);
  if (!fd_.valid()) throw ConnectionLost("connection closed");
  write_all(fd_.get(), frame);
}

Message Connection::receive() {
  std::byte buf[64 << 10];
  for (;;) {
    if (auto msg = decoder_.next()) return std::move(*msg);
    if (!fd_.valid()) throw ConnectionLost("connection closed");
    FdSource source(fd_.get());
    const std::size_t n = source.read_some(buf);
    if (n == 0) {
      throw ConnectionLost(decoder_.mid_frame() ? "connection lost mid-frame" : "connection closed");
    }
    decoder_.feed(std::span(buf, n));
  }
}

void Connection::shutdown_both() {
  if (fd_.valid()) ::shutdown(fd_.get(), SHUT_RDWR);
}

void Connection::close() {
  std::lock_guard lock(write_mu_);
  fd_.reset();
}

}  // namespace mtcd
