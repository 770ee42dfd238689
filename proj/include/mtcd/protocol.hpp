// Wire protocol shared by client, dispatcher and executor.
//
// Every message travels as one frame:
//
//   [len: u32 big-endian][tag: u8][payload: UTF-8 JSON, keys sorted]
//
// where `len` counts the tag byte plus the payload. Connections are
// persistent and carry any number of frames back to back.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mtcd {

inline constexpr int kProtocolVersion = 1;

enum class DataKind { kStatic, kDynamic };

struct DataRef {
  std::string logical_name;
  std::string source_uri;
  DataKind kind = DataKind::kStatic;
  std::optional<std::uint64_t> size_hint_bytes;

  bool operator==(const DataRef&) const = default;
};

struct TaskDescriptor {
  std::string task_id;
  std::string executable;
  std::vector<std::string> args;
  std::map<std::string, std::string> env;
  std::vector<DataRef> static_inputs;
  std::vector<DataRef> dynamic_inputs;
  std::vector<DataRef> outputs;
  std::int64_t wall_time_limit_s = 3600;
  // Absent means "use the dispatcher's default retry budget".
  std::optional<int> retries_remaining;
  bool capture_stdout = false;
  bool capture_stderr = false;

  bool operator==(const TaskDescriptor&) const = default;
};

// Throws std::invalid_argument naming the first violated constraint.
void validate(const TaskDescriptor& task);

enum class TaskStatus { kSuccess, kAppFailure, kSystemFailure, kTimeout, kLost };

const char* to_string(TaskStatus status);
std::optional<TaskStatus> parse_task_status(std::string_view text);

// Exit codes reserved for failures that happen outside the application.
inline constexpr int kExitSpawnFailed = -127;
inline constexpr int kExitStageInFailed = -1;
inline constexpr int kExitStageOutFailed = -2;
inline constexpr int kExitKilled = -9;

struct TaskResult {
  std::string task_id;
  int exit_code = 0;
  TaskStatus status = TaskStatus::kSuccess;
  std::string executor_id;
  // Monotonic milliseconds (CLOCK_MONOTONIC, shared by all processes on a host).
  double t_submitted = 0;
  double t_dispatched = 0;
  double t_started = 0;
  double t_finished = 0;
  // Wall clock at finish, epoch milliseconds; for logs only.
  std::int64_t wall_finished_ms = 0;
  std::optional<DataRef> stdout_ref;
  std::optional<DataRef> stderr_ref;

  bool operator==(const TaskResult&) const = default;
};

struct DispatcherStats {
  std::int64_t submitted = 0;
  std::int64_t queued = 0;
  std::int64_t dispatched_running = 0;
  std::int64_t completed_ok = 0;
  std::int64_t failed_app = 0;
  std::int64_t failed_system = 0;
  std::int64_t rescheduled = 0;
  double current_throughput_tasks_per_s = 0;
  std::int64_t registered_executors = 0;
  std::int64_t suspended_executors = 0;
  // Slots of live, non-suspended executors; clients size their credit from it.
  std::int64_t total_slots = 0;

  bool operator==(const DispatcherStats&) const = default;
};

// ---------------------------------------------------------------------------
// Message payloads, one struct per kind.

struct Register {
  int protocol_version = kProtocolVersion;
  int slots = 1;
  std::string address;
  bool operator==(const Register&) const = default;
};

struct RegisterAck {
  std::string executor_id;
  std::int64_t heartbeat_interval_ms = 0;
  bool operator==(const RegisterAck&) const = default;
};

struct TaskDispatch {
  TaskDescriptor task;
  bool operator==(const TaskDispatch&) const = default;
};

struct TaskResultReport {
  TaskResult result;
  bool operator==(const TaskResultReport&) const = default;
};

struct Heartbeat {
  std::string executor_id;
  bool operator==(const Heartbeat&) const = default;
};

struct Suspend {
  std::string executor_id;
  std::string reason;
  bool operator==(const Suspend&) const = default;
};

struct Shutdown {
  std::string reason;
  bool operator==(const Shutdown&) const = default;
};

struct Submit {
  std::vector<TaskDescriptor> tasks;
  bool operator==(const Submit&) const = default;
};

struct Rejection {
  std::string task_id;
  std::string reason;
  bool operator==(const Rejection&) const = default;
};

struct SubmitAck {
  std::vector<std::string> accepted;
  std::vector<Rejection> rejected;
  bool operator==(const SubmitAck&) const = default;
};

struct ResultNotify {
  TaskResult result;
  bool operator==(const ResultNotify&) const = default;
};

struct StatsRequest {
  bool operator==(const StatsRequest&) const = default;
};

struct StatsReply {
  DispatcherStats stats;
  bool operator==(const StatsReply&) const = default;
};

struct ErrorReply {
  std::string code;
  std::string message;
  bool operator==(const ErrorReply&) const = default;
};

enum class MessageKind : std::uint8_t {
  kRegister = 1,
  kRegisterAck = 2,
  kTaskDispatch = 3,
  kTaskResult = 4,
  kHeartbeat = 5,
  kSuspend = 6,
  kShutdown = 7,
  kSubmit = 8,
  kSubmitAck = 9,
  kResultNotify = 10,
  kStatsRequest = 11,
  kStatsReply = 12,
  kError = 13,
};

const char* to_string(MessageKind kind);

// Alternative order matches the tag numbering: index + 1 == tag.
using Payload = std::variant<Register, RegisterAck, TaskDispatch, TaskResultReport, Heartbeat,
                             Suspend, Shutdown, Submit, SubmitAck, ResultNotify, StatsRequest,
                             StatsReply, ErrorReply>;

struct Message {
  Payload payload;

  Message() = default;
  template <typename T>
    requires std::is_constructible_v<Payload, T&&>
  Message(T&& body) : payload(std::forward<T>(body)) {}  // NOLINT

  MessageKind kind() const { return static_cast<MessageKind>(payload.index() + 1); }

  template <typename T>
  const T* as() const {
    return std::get_if<T>(&payload);
  }

  bool operator==(const Message&) const = default;
};

// ---------------------------------------------------------------------------
// Errors.

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The peer went away, possibly in the middle of a frame.
class ConnectionLost : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FrameTooLarge : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Codec.

using Bytes = std::vector<std::byte>;

inline constexpr std::size_t kFrameHeaderBytes = 4;
inline constexpr std::uint64_t kMaxPayloadBytes = 0xFFFFFFFEull;  // 2^32 - 2

// Throws FrameTooLarge if a payload of this size cannot be framed.
void check_payload_size(std::uint64_t payload_bytes);

// Canonical payload text for a message (sorted-key JSON).
std::string serialize_payload(const Message& msg);
Message parse_payload(std::uint8_t tag, std::string_view text);

Bytes encode(const Message& msg);
// Appends the frame to `out` instead of allocating.
void encode_into(const Message& msg, Bytes& out);

// Blocking byte source; read_some returns 0 at end of stream.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::size_t read_some(std::span<std::byte> buf) = 0;
};

class SpanSource : public ByteSource {
 public:
  explicit SpanSource(std::span<const std::byte> data) : data_(data) {}
  std::size_t read_some(std::span<std::byte> buf) override;
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

// Reads exactly one frame, retrying short reads. Throws ConnectionLost if the
// stream ends before the frame completes, ProtocolError on a bad tag/payload.
Message decode(ByteSource& stream);

// Incremental decoder for non-blocking connections: feed bytes as they
// arrive, pull complete messages out. One instance per connection.
class FrameDecoder {
 public:
  explicit FrameDecoder(std::size_t max_frame_bytes = 256u << 20) : max_frame_(max_frame_bytes) {}

  void feed(std::span<const std::byte> data);
  // Returns the next complete message, or nullopt if more bytes are needed.
  std::optional<Message> next();
  // True when buffered bytes form a partial frame.
  bool mid_frame() const { return buffer_.size() > read_pos_; }

 private:
  Bytes buffer_;
  std::size_t read_pos_ = 0;
  std::size_t max_frame_;
};

}  // namespace mtcd
