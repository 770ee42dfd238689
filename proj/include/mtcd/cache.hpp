// Node-local data cache (the ramdisk analog) and bulk block copy.
//
// Static inputs are copied once per content version and reused by every
// task on the agent. Dynamic inputs are copied fresh for each task and
// dropped when that task finishes.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "mtcd/protocol.hpp"

namespace mtcd {

namespace fs = std::filesystem;

inline constexpr std::size_t kBulkBlockBytes = 128 * 1024;

// Staging errors are retryable system failures.
class StagingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CopyStats {
  std::uint64_t bytes = 0;
  std::uint64_t blocks = 0;
  // Hex SHA-256 of the copied content, when requested.
  std::string sha256;
};

// Streams `src` to `dst` in fixed-size blocks. Throws StagingError.
CopyStats bulk_copy(const fs::path& src, const fs::path& dst, std::size_t block_bytes = kBulkBlockBytes,
                    bool compute_digest = false);

std::string sha256_file(const fs::path& path);
std::string sha256_hex(std::string_view data);

struct CacheEntry {
  std::string key;
  fs::path local_path;
  DataKind kind = DataKind::kStatic;
  std::uint64_t size_bytes = 0;
  double last_used_ms = 0;
  std::string content_sha256;
};

class Cache {
 public:
  Cache(fs::path root, std::uint64_t capacity_bytes);

  // Static: cached entry for the source's current content, copying on miss.
  // Dynamic: a fresh private copy (see release()). Throws StagingError.
  fs::path get(const DataRef& ref);

  // Copies a dynamic input directly to `dst`, accounting it against the
  // cache until release(dst).
  void stage_dynamic(const DataRef& ref, const fs::path& dst);
  void release(const fs::path& dynamic_path);

  // Identity of a source's current content: digest of URI plus the
  // (size, mtime, inode, device) fingerprint. Throws StagingError.
  static std::string content_key(const DataRef& ref);

  std::uint64_t total_bytes() const;
  std::uint64_t capacity_bytes() const { return capacity_; }
  std::uint64_t copies_performed() const { return copies_.load(); }
  std::uint64_t evictions() const { return evictions_.load(); }
  std::size_t static_entries() const;
  std::optional<CacheEntry> lookup(const std::string& key) const;
  const fs::path& root() const { return root_; }

 private:
  struct InFlight {
    bool done = false;
    std::string error;
    std::condition_variable cv;
  };

  void reserve_locked(std::uint64_t bytes, std::unique_lock<std::mutex>& lock);
  void touch_locked(const std::string& key);

  fs::path root_;
  std::uint64_t capacity_;
  mutable std::mutex mu_;
  // LRU order of static keys, most recent at the back.
  std::list<std::string> lru_;
  std::unordered_map<std::string, std::pair<CacheEntry, std::list<std::string>::iterator>> static_;
  std::map<fs::path, std::uint64_t> dynamic_;
  std::unordered_map<std::string, std::shared_ptr<InFlight>> in_flight_;
  std::uint64_t total_ = 0;
  std::uint64_t reserved_ = 0;
  std::uint64_t dynamic_seq_ = 0;
  std::atomic<std::uint64_t> copies_{0};
  std::atomic<std::uint64_t> evictions_{0};
};

}  // namespace mtcd
