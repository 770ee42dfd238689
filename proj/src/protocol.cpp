#include "mtcd/protocol.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "mtcd/serialization.hpp"

namespace mtcd {

using nlohmann::json;

namespace {

const char* data_kind_name(DataKind kind) { return kind == DataKind::kStatic ? "static" : "dynamic"; }

DataKind parse_data_kind(const std::string& text) {
  if (text == "static") return DataKind::kStatic;
  if (text == "dynamic") return DataKind::kDynamic;
  throw std::invalid_argument("unknown data kind '" + text + "'");
}

template <typename T>
void get_optional(const json& j, const char* key, std::optional<T>& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) {
    out = it->get<T>();
  } else {
    out.reset();
  }
}

template <typename T>
void get_or(const json& j, const char* key, T& out, T fallback) {
  if (auto it = j.find(key); it != j.end()) {
    out = it->get<T>();
  } else {
    out = std::move(fallback);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Records.

void to_json(json& j, const DataRef& ref) {
  j = json{{"logical_name", ref.logical_name},
           {"source_uri", ref.source_uri},
           {"kind", data_kind_name(ref.kind)}};
  if (ref.size_hint_bytes) j["size_hint_bytes"] = *ref.size_hint_bytes;
}

void from_json(const json& j, DataRef& ref) {
  j.at("logical_name").get_to(ref.logical_name);
  j.at("source_uri").get_to(ref.source_uri);
  ref.kind = parse_data_kind(j.value("kind", std::string("static")));
  get_optional(j, "size_hint_bytes", ref.size_hint_bytes);
}

void to_json(json& j, const TaskDescriptor& task) {
  j = json{{"task_id", task.task_id},
           {"executable", task.executable},
           {"args", task.args},
           {"env", task.env},
           {"static_inputs", task.static_inputs},
           {"dynamic_inputs", task.dynamic_inputs},
           {"outputs", task.outputs},
           {"wall_time_limit_s", task.wall_time_limit_s},
           {"capture_stdout", task.capture_stdout},
           {"capture_stderr", task.capture_stderr}};
  if (task.retries_remaining) j["retries_remaining"] = *task.retries_remaining;
}

void from_json(const json& j, TaskDescriptor& task) {
  j.at("task_id").get_to(task.task_id);
  j.at("executable").get_to(task.executable);
  get_or(j, "args", task.args, {});
  get_or(j, "env", task.env, {});
  get_or(j, "static_inputs", task.static_inputs, {});
  get_or(j, "dynamic_inputs", task.dynamic_inputs, {});
  get_or(j, "outputs", task.outputs, {});
  get_or<std::int64_t>(j, "wall_time_limit_s", task.wall_time_limit_s, 3600);
  get_optional(j, "retries_remaining", task.retries_remaining);
  get_or(j, "capture_stdout", task.capture_stdout, false);
  get_or(j, "capture_stderr", task.capture_stderr, false);
}

void to_json(json& j, const TaskResult& r) {
  j = json{{"task_id", r.task_id},
           {"exit_code", r.exit_code},
           {"status", to_string(r.status)},
           {"executor_id", r.executor_id},
           {"t_submitted", r.t_submitted},
           {"t_dispatched", r.t_dispatched},
           {"t_started", r.t_started},
           {"t_finished", r.t_finished},
           {"wall_finished_ms", r.wall_finished_ms}};
  if (r.stdout_ref) j["stdout_ref"] = *r.stdout_ref;
  if (r.stderr_ref) j["stderr_ref"] = *r.stderr_ref;
}

void from_json(const json& j, TaskResult& r) {
  j.at("task_id").get_to(r.task_id);
  j.at("exit_code").get_to(r.exit_code);
  auto status = parse_task_status(j.at("status").get<std::string>());
  if (!status) throw std::invalid_argument("unknown task status");
  r.status = *status;
  j.at("executor_id").get_to(r.executor_id);
  j.at("t_submitted").get_to(r.t_submitted);
  j.at("t_dispatched").get_to(r.t_dispatched);
  j.at("t_started").get_to(r.t_started);
  j.at("t_finished").get_to(r.t_finished);
  get_or<std::int64_t>(j, "wall_finished_ms", r.wall_finished_ms, 0);
  get_optional(j, "stdout_ref", r.stdout_ref);
  get_optional(j, "stderr_ref", r.stderr_ref);
}

void to_json(json& j, const DispatcherStats& s) {
  j = json{{"submitted", s.submitted},
           {"queued", s.queued},
           {"dispatched_running", s.dispatched_running},
           {"completed_ok", s.completed_ok},
           {"failed_app", s.failed_app},
           {"failed_system", s.failed_system},
           {"rescheduled", s.rescheduled},
           {"current_throughput_tasks_per_s", s.current_throughput_tasks_per_s},
           {"registered_executors", s.registered_executors},
           {"suspended_executors", s.suspended_executors},
           {"total_slots", s.total_slots}};
}

void from_json(const json& j, DispatcherStats& s) {
  j.at("submitted").get_to(s.submitted);
  j.at("queued").get_to(s.queued);
  j.at("dispatched_running").get_to(s.dispatched_running);
  j.at("completed_ok").get_to(s.completed_ok);
  j.at("failed_app").get_to(s.failed_app);
  j.at("failed_system").get_to(s.failed_system);
  j.at("rescheduled").get_to(s.rescheduled);
  j.at("current_throughput_tasks_per_s").get_to(s.current_throughput_tasks_per_s);
  j.at("registered_executors").get_to(s.registered_executors);
  j.at("suspended_executors").get_to(s.suspended_executors);
  get_or<std::int64_t>(j, "total_slots", s.total_slots, 0);
}

void validate(const TaskDescriptor& task) {
  if (task.task_id.empty()) throw std::invalid_argument("task_id must be non-empty");
  if (task.executable.empty()) throw std::invalid_argument("executable must be non-empty");
  if (task.wall_time_limit_s <= 0) throw std::invalid_argument("wall_time_limit_s must be positive");
  if (task.retries_remaining && *task.retries_remaining < 0) {
    throw std::invalid_argument("retries_remaining must be non-negative");
  }
  std::set<std::string_view> names;
  for (const auto* refs : {&task.static_inputs, &task.dynamic_inputs, &task.outputs}) {
    for (const auto& ref : *refs) {
      if (ref.logical_name.empty() || ref.logical_name.find('/') != std::string::npos ||
          ref.logical_name == "." || ref.logical_name == "..") {
        throw std::invalid_argument("invalid logical_name '" + ref.logical_name + "'");
      }
      if (!names.insert(ref.logical_name).second) {
        throw std::invalid_argument("duplicate logical_name '" + ref.logical_name + "'");
      }
    }
  }
}

const char* to_string(TaskStatus status) {
  switch (status) {
    case TaskStatus::kSuccess: return "success";
    case TaskStatus::kAppFailure: return "app_failure";
    case TaskStatus::kSystemFailure: return "system_failure";
    case TaskStatus::kTimeout: return "timeout";
    case TaskStatus::kLost: return "lost";
  }
  return "unknown";
}

std::optional<TaskStatus> parse_task_status(std::string_view text) {
  for (auto s : {TaskStatus::kSuccess, TaskStatus::kAppFailure, TaskStatus::kSystemFailure,
                 TaskStatus::kTimeout, TaskStatus::kLost}) {
    if (text == to_string(s)) return s;
  }
  return std::nullopt;
}

const char* to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::kRegister: return "REGISTER";
    case MessageKind::kRegisterAck: return "REGISTER_ACK";
    case MessageKind::kTaskDispatch: return "TASK_DISPATCH";
    case MessageKind::kTaskResult: return "TASK_RESULT";
    case MessageKind::kHeartbeat: return "HEARTBEAT";
    case MessageKind::kSuspend: return "SUSPEND";
    case MessageKind::kShutdown: return "SHUTDOWN";
    case MessageKind::kSubmit: return "SUBMIT";
    case MessageKind::kSubmitAck: return "SUBMIT_ACK";
    case MessageKind::kResultNotify: return "RESULT_NOTIFY";
    case MessageKind::kStatsRequest: return "STATS_REQUEST";
    case MessageKind::kStatsReply: return "STATS_REPLY";
    case MessageKind::kError: return "ERROR";
  }
  return "UNKNOWN";
}

// ---------------------------------------------------------------------------
// Payload <-> JSON.

namespace {

json payload_json(const Payload& payload) {
  return std::visit(
      [](const auto& body) -> json {
        using T = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<T, Register>) {
          return {{"protocol_version", body.protocol_version},
                  {"slots", body.slots},
                  {"address", body.address}};
        } else if constexpr (std::is_same_v<T, RegisterAck>) {
          return {{"executor_id", body.executor_id},
                  {"heartbeat_interval_ms", body.heartbeat_interval_ms}};
        } else if constexpr (std::is_same_v<T, TaskDispatch>) {
          return {{"task", body.task}};
        } else if constexpr (std::is_same_v<T, TaskResultReport> ||
                             std::is_same_v<T, ResultNotify>) {
          return {{"result", body.result}};
        } else if constexpr (std::is_same_v<T, Heartbeat>) {
          return {{"executor_id", body.executor_id}};
        } else if constexpr (std::is_same_v<T, Suspend>) {
          return {{"executor_id", body.executor_id}, {"reason", body.reason}};
        } else if constexpr (std::is_same_v<T, Shutdown>) {
          return {{"reason", body.reason}};
        } else if constexpr (std::is_same_v<T, Submit>) {
          return {{"tasks", body.tasks}};
        } else if constexpr (std::is_same_v<T, SubmitAck>) {
          json rejected = json::array();
          for (const auto& r : body.rejected) {
            rejected.push_back({{"task_id", r.task_id}, {"reason", r.reason}});
          }
          return {{"accepted", body.accepted}, {"rejected", std::move(rejected)}};
        } else if constexpr (std::is_same_v<T, StatsRequest>) {
          return json::object();
        } else if constexpr (std::is_same_v<T, StatsReply>) {
          return body.stats;
        } else {
          static_assert(std::is_same_v<T, ErrorReply>);
          return {{"code", body.code}, {"message", body.message}};
        }
      },
      payload);
}

Payload payload_from_json(MessageKind kind, const json& j) {
  switch (kind) {
    case MessageKind::kRegister:
      return Register{j.at("protocol_version").get<int>(), j.at("slots").get<int>(),
                      j.at("address").get<std::string>()};
    case MessageKind::kRegisterAck:
      return RegisterAck{j.at("executor_id").get<std::string>(),
                         j.at("heartbeat_interval_ms").get<std::int64_t>()};
    case MessageKind::kTaskDispatch:
      return TaskDispatch{j.at("task").get<TaskDescriptor>()};
    case MessageKind::kTaskResult:
      return TaskResultReport{j.at("result").get<TaskResult>()};
    case MessageKind::kHeartbeat:
      return Heartbeat{j.at("executor_id").get<std::string>()};
    case MessageKind::kSuspend:
      return Suspend{j.at("executor_id").get<std::string>(), j.at("reason").get<std::string>()};
    case MessageKind::kShutdown:
      return Shutdown{j.at("reason").get<std::string>()};
    case MessageKind::kSubmit:
      return Submit{j.at("tasks").get<std::vector<TaskDescriptor>>()};
    case MessageKind::kSubmitAck: {
      SubmitAck ack;
      j.at("accepted").get_to(ack.accepted);
      for (const auto& r : j.at("rejected")) {
        ack.rejected.push_back({r.at("task_id").get<std::string>(), r.at("reason").get<std::string>()});
      }
      return ack;
    }
    case MessageKind::kResultNotify:
      return ResultNotify{j.at("result").get<TaskResult>()};
    case MessageKind::kStatsRequest:
      return StatsRequest{};
    case MessageKind::kStatsReply:
      return StatsReply{j.get<DispatcherStats>()};
    case MessageKind::kError:
      return ErrorReply{j.at("code").get<std::string>(), j.at("message").get<std::string>()};
  }
  throw ProtocolError("unknown message kind");
}

bool valid_tag(std::uint8_t tag) { return tag >= 1 && tag <= 13; }

}  // namespace

void check_payload_size(std::uint64_t payload_bytes) {
  if (payload_bytes > kMaxPayloadBytes) {
    throw FrameTooLarge("payload of " + std::to_string(payload_bytes) + " bytes exceeds frame limit");
  }
}

std::string serialize_payload(const Message& msg) { return payload_json(msg.payload).dump(); }

Message parse_payload(std::uint8_t tag, std::string_view text) {
  if (!valid_tag(tag)) throw ProtocolError("unknown message tag " + std::to_string(tag));
  try {
    return Message{payload_from_json(static_cast<MessageKind>(tag), json::parse(text))};
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed payload: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ProtocolError(std::string("malformed payload: ") + e.what());
  }
}

void encode_into(const Message& msg, Bytes& out) {
  const std::string payload = serialize_payload(msg);
  check_payload_size(payload.size());
  const auto len = static_cast<std::uint32_t>(payload.size() + 1);
  const std::size_t base = out.size();
  out.resize(base + kFrameHeaderBytes + len);
  std::byte* p = out.data() + base;
  p[0] = std::byte(len >> 24);
  p[1] = std::byte(len >> 16);
  p[2] = std::byte(len >> 8);
  p[3] = std::byte(len);
  p[4] = std::byte(static_cast<std::uint8_t>(msg.kind()));
  std::memcpy(p + 5, payload.data(), payload.size());
}

Bytes encode(const Message& msg) {
  Bytes out;
  encode_into(msg, out);
  return out;
}

std::size_t SpanSource::read_some(std::span<std::byte> buf) {
  const std::size_t n = std::min(buf.size(), data_.size() - pos_);
  std::memcpy(buf.data(), data_.data() + pos_, n);
  pos_ += n;
  return n;
}

namespace {

void read_exact(ByteSource& stream, std::span<std::byte> buf, bool at_boundary) {
  std::size_t got = 0;
  while (got < buf.size()) {
    const std::size_t n = stream.read_some(buf.subspan(got));
    if (n == 0) {
      throw ConnectionLost(got == 0 && at_boundary ? "connection closed"
                                                   : "connection lost mid-frame");
    }
    got += n;
  }
}

std::uint32_t read_be32(const std::byte* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

}  // namespace

Message decode(ByteSource& stream) {
  std::byte header[kFrameHeaderBytes + 1];
  read_exact(stream, std::span(header, kFrameHeaderBytes), true);
  const std::uint32_t len = read_be32(header);
  if (len == 0) throw ProtocolError("frame without tag");
  read_exact(stream, std::span(header + kFrameHeaderBytes, 1), false);
  const auto tag = static_cast<std::uint8_t>(header[kFrameHeaderBytes]);
  if (!valid_tag(tag)) throw ProtocolError("unknown message tag " + std::to_string(tag));
  std::string payload(len - 1, '\0');
  read_exact(stream, std::as_writable_bytes(std::span(payload)), false);
  return parse_payload(tag, payload);
}

void FrameDecoder::feed(std::span<const std::byte> data) {
  if (read_pos_ > 0 && read_pos_ == buffer_.size()) {
    buffer_.clear();
    read_pos_ = 0;
  } else if (read_pos_ > (64u << 10) && read_pos_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(read_pos_));
    read_pos_ = 0;
  }
  buffer_.insert(buffer_.end(), data.begin(), data.end());
}

std::optional<Message> FrameDecoder::next() {
  const std::size_t avail = buffer_.size() - read_pos_;
  if (avail < kFrameHeaderBytes + 1) {
    if (avail >= kFrameHeaderBytes && read_be32(buffer_.data() + read_pos_) == 0) {
      throw ProtocolError("frame without tag");
    }
    return std::nullopt;
  }
  const std::byte* p = buffer_.data() + read_pos_;
  const std::uint32_t len = read_be32(p);
  if (len == 0) throw ProtocolError("frame without tag");
  const auto tag = static_cast<std::uint8_t>(p[kFrameHeaderBytes]);
  if (!valid_tag(tag)) throw ProtocolError("unknown message tag " + std::to_string(tag));
  if (len > max_frame_) throw ProtocolError("frame of " + std::to_string(len) + " bytes too large");
  if (avail < kFrameHeaderBytes + len) return std::nullopt;
  std::string_view text(reinterpret_cast<const char*>(p + kFrameHeaderBytes + 1), len - 1);
  read_pos_ += kFrameHeaderBytes + len;
  return parse_payload(tag, text);
}

}  // namespace mtcd
