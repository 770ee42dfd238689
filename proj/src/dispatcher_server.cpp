#include "mtcd/dispatcher_server.hpp"

#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>

#include "mtcd/clock.hpp"

namespace mtcd {

namespace {

constexpr std::size_t kMaxPendingOutput = 256u << 20;
constexpr std::size_t kReadChunk = 256u << 10;

}  // namespace

CsvEventLog::CsvEventLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open event log " + path.string());
  out_ << "task_id,event,timestamp_ms\n";
}

void CsvEventLog::record(std::string_view task_id, std::string_view event, double timestamp_ms) {
  char ts[48];
  std::snprintf(ts, sizeof(ts), "%.3f", timestamp_ms);
  std::lock_guard lock(mu_);
  out_ << task_id << ',' << event << ',' << ts << '\n';
}

void CsvEventLog::flush() {
  std::lock_guard lock(mu_);
  out_.flush();
}

DispatcherServer::DispatcherServer(Options options)
    : options_(std::move(options)),
      listen_fd_(listen_tcp(options_.bind)),
      wake_fd_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC)),
      port_(local_port(listen_fd_.get())),
      event_log_(options_.log_dir ? std::make_unique<CsvEventLog>(*options_.log_dir / "events.csv") : nullptr),
      core_(options_.config, *this, event_log_.get()) {
  set_nonblocking(listen_fd_.get(), true);
  spdlog::info("dispatcher listening on {}:{}", options_.bind.host, port_);
}

DispatcherServer::~DispatcherServer() {
  if (event_log_) event_log_->flush();
}

void DispatcherServer::stop() {
  stopping_ = true;
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_.get(), &one, sizeof(one));
}

DispatcherStats DispatcherServer::stats() {
  std::lock_guard lock(state_mu_);
  return core_.stats(monotonic_ms());
}

bool DispatcherServer::send(ConnectionId to, const Message& msg) {
  auto it = conns_.find(to);
  if (it == conns_.end() || it->second->broken) return false;
  Conn& conn = *it->second;
  encode_into(msg, conn.out);
  if (conn.out.size() - conn.out_pos > kMaxPendingOutput) {
    spdlog::warn("connection {} output backlog exceeded; dropping", to);
    conn.broken = true;
    return false;
  }
  return true;
}

void DispatcherServer::accept_all() {
  for (;;) {
    const int fd = ::accept4(listen_fd_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
        spdlog::warn("accept failed: {}", std::strerror(errno));
      }
      return;
    }
    set_nodelay(fd);
    auto conn = std::make_unique<Conn>();
    conn->fd = Fd(fd);
    conns_.emplace(next_conn_++, std::move(conn));
  }
}

void DispatcherServer::read_conn(ConnectionId id, Conn& conn, double now) {
  std::byte buf[kReadChunk];
  for (;;) {
    const ssize_t n = ::read(conn.fd.get(), buf, sizeof(buf));
    if (n == 0) {
      conn.broken = true;
      break;
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno != EAGAIN && errno != EWOULDBLOCK) conn.broken = true;
      break;
    }
    conn.decoder.feed(std::span(buf, static_cast<std::size_t>(n)));
    if (static_cast<std::size_t>(n) < sizeof(buf)) break;
  }
  try {
    while (auto msg = conn.decoder.next()) {
      handle(id, conn, std::move(*msg), now);
    }
  } catch (const ProtocolError& e) {
    spdlog::warn("protocol error on connection {}: {}", id, e.what());
    send(id, ErrorReply{"protocol_error", e.what()});
    conn.close_after_flush = true;
  }
}

void DispatcherServer::handle(ConnectionId id, Conn& conn, Message msg, double now) {
  switch (msg.kind()) {
    case MessageKind::kRegister: {
      Message reply = core_.register_executor(id, std::get<Register>(msg.payload), now);
      if (reply.kind() == MessageKind::kError) conn.close_after_flush = true;
      send(id, reply);
      break;
    }
    case MessageKind::kHeartbeat:
      core_.heartbeat(std::get<Heartbeat>(msg.payload).executor_id, now);
      break;
    case MessageKind::kTaskResult:
      core_.handle_result(std::move(std::get<TaskResultReport>(msg.payload).result), now);
      break;
    case MessageKind::kSubmit:
      send(id, core_.submit(id, std::move(std::get<Submit>(msg.payload).tasks), now));
      break;
    case MessageKind::kStatsRequest:
      send(id, StatsReply{core_.stats(now)});
      break;
    default:
      send(id, ErrorReply{"unexpected_message", std::string("dispatcher does not accept ") + to_string(msg.kind())});
      conn.close_after_flush = true;
      break;
  }
}

void DispatcherServer::flush_conn(Conn& conn) {
  while (conn.out_pos < conn.out.size()) {
    const ssize_t n = ::send(conn.fd.get(), conn.out.data() + conn.out_pos, conn.out.size() - conn.out_pos,
                             MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno != EAGAIN && errno != EWOULDBLOCK) conn.broken = true;
      return;
    }
    conn.out_pos += static_cast<std::size_t>(n);
  }
  conn.out.clear();
  conn.out_pos = 0;
  if (conn.close_after_flush) conn.broken = true;
}

void DispatcherServer::reap(double now) {
  for (ConnectionId id : core_.take_connections_to_close()) {
    if (auto it = conns_.find(id); it != conns_.end()) it->second->broken = true;
  }
  for (auto it = conns_.begin(); it != conns_.end();) {
    if (it->second->broken) {
      const ConnectionId id = it->first;
      it = conns_.erase(it);
      core_.connection_closed(id, now);
    } else {
      ++it;
    }
  }
  core_.take_connections_to_close();
}

void DispatcherServer::run() {
  std::vector<pollfd> pfds;
  std::vector<ConnectionId> ids;
  const double check_every = std::max<double>(50.0, static_cast<double>(options_.config.heartbeat_interval_ms) / 2);
  next_liveness_check_ = monotonic_ms() + check_every;

  while (!stopping_) {
    pfds.clear();
    ids.clear();
    pfds.push_back({listen_fd_.get(), POLLIN, 0});
    pfds.push_back({wake_fd_.get(), POLLIN, 0});
    {
      std::lock_guard lock(state_mu_);
      for (const auto& [id, conn] : conns_) {
        short events = POLLIN;
        if (conn->out_pos < conn->out.size()) events |= POLLOUT;
        pfds.push_back({conn->fd.get(), events, 0});
        ids.push_back(id);
      }
    }
    const double wait = std::clamp(next_liveness_check_ - monotonic_ms(), 0.0, 1000.0);
    const int rc = ::poll(pfds.data(), pfds.size(), static_cast<int>(wait));
    if (rc < 0 && errno != EINTR) {
      spdlog::error("poll failed: {}", std::strerror(errno));
      break;
    }
    const double now = monotonic_ms();

    std::lock_guard lock(state_mu_);
    if (pfds[1].revents & POLLIN) {
      std::uint64_t v;
      [[maybe_unused]] auto n = ::read(wake_fd_.get(), &v, sizeof(v));
    }
    if (pfds[0].revents & POLLIN) accept_all();
    for (std::size_t i = 2; i < pfds.size(); ++i) {
      if (pfds[i].revents == 0) continue;
      auto it = conns_.find(ids[i - 2]);
      if (it == conns_.end()) continue;
      Conn& conn = *it->second;
      if (pfds[i].revents & (POLLIN | POLLHUP | POLLERR)) read_conn(it->first, conn, now);
    }
    if (now >= next_liveness_check_) {
      core_.check_liveness(now);
      next_liveness_check_ = now + check_every;
      if (event_log_) event_log_->flush();
    }
    if (core_.has_work()) core_.schedule_step(now);
    for (auto& [id, conn] : conns_) {
      if (!conn->broken && (conn->out_pos < conn->out.size() || conn->close_after_flush)) flush_conn(*conn);
    }
    reap(now);
  }

  std::lock_guard lock(state_mu_);
  for (auto& [id, conn] : conns_) flush_conn(*conn);
  conns_.clear();
  if (event_log_) event_log_->flush();
}

}  // namespace mtcd
