#include "mtcd/cache.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <cerrno>
#include <cstring>
#include <vector>

#include "mtcd/clock.hpp"
#include "mtcd/net.hpp"

namespace mtcd {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(kDigits[md[i] >> 4]);
      out.push_back(kDigits[md[i] & 15]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string errno_text(const std::string& what) { return what + ": " + std::strerror(errno); }

// Reads until `buf` is full or EOF.
std::size_t read_block(int fd, std::byte* buf, std::size_t size) {
  std::size_t got = 0;
  while (got < size) {
    const ssize_t n = ::read(fd, buf + got, size - got);
    if (n == 0) break;
    if (n < 0) {
      if (errno == EINTR) continue;
      throw StagingError(errno_text("read"));
    }
    got += static_cast<std::size_t>(n);
  }
  return got;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  Fd fd(::open(path.c_str(), O_RDONLY | O_CLOEXEC));
  if (!fd.valid()) throw StagingError(errno_text("open " + path.string()));
  Sha256 h;
  std::vector<std::byte> buf(kBulkBlockBytes);
  for (;;) {
    const std::size_t n = read_block(fd.get(), buf.data(), buf.size());
    if (n == 0) break;
    h.update(buf.data(), n);
  }
  return h.hex();
}

CopyStats bulk_copy(const fs::path& src, const fs::path& dst, std::size_t block_bytes, bool compute_digest) {
  if (block_bytes == 0) throw std::invalid_argument("block size must be positive");
  Fd in(::open(src.c_str(), O_RDONLY | O_CLOEXEC));
  if (!in.valid()) throw StagingError(errno_text("open " + src.string()));
  Fd out(::open(dst.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644));
  if (!out.valid()) throw StagingError(errno_text("create " + dst.string()));

  std::unique_ptr<Sha256> digest = compute_digest ? std::make_unique<Sha256>() : nullptr;
  std::vector<std::byte> buf(block_bytes);
  CopyStats stats;
  for (;;) {
    const std::size_t n = read_block(in.get(), buf.data(), buf.size());
    if (n == 0) break;
    std::size_t written = 0;
    while (written < n) {
      const ssize_t w = ::write(out.get(), buf.data() + written, n - written);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw StagingError(errno_text("write " + dst.string()));
      }
      if (w == 0) throw StagingError("short write to " + dst.string());
      written += static_cast<std::size_t>(w);
    }
    if (digest) digest->update(buf.data(), n);
    stats.bytes += n;
    ++stats.blocks;
    if (n < buf.size()) break;
  }
  if (::close(out.release()) != 0) throw StagingError(errno_text("close " + dst.string()));
  if (digest) stats.sha256 = digest->hex();
  return stats;
}

// ---------------------------------------------------------------------------

Cache::Cache(fs::path root, std::uint64_t capacity_bytes) : root_(std::move(root)), capacity_(capacity_bytes) {
  fs::create_directories(root_ / "static");
  fs::create_directories(root_ / "dynamic");
}

std::string Cache::content_key(const DataRef& ref) {
  struct stat st {};
  if (::stat(ref.source_uri.c_str(), &st) != 0) throw StagingError(errno_text("stat " + ref.source_uri));
  if (!S_ISREG(st.st_mode)) throw StagingError(ref.source_uri + " is not a regular file");
  const std::string fingerprint = ref.source_uri + '\0' + std::to_string(st.st_size) + ':' +
                                  std::to_string(st.st_mtim.tv_sec) + '.' + std::to_string(st.st_mtim.tv_nsec) +
                                  ':' + std::to_string(st.st_ino) + ':' + std::to_string(st.st_dev);
  return sha256_hex(fingerprint);
}

std::uint64_t Cache::total_bytes() const {
  std::lock_guard lock(mu_);
  return total_;
}

std::size_t Cache::static_entries() const {
  std::lock_guard lock(mu_);
  return static_.size();
}

std::optional<CacheEntry> Cache::lookup(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = static_.find(key);
  if (it == static_.end()) return std::nullopt;
  return it->second.first;
}

void Cache::touch_locked(const std::string& key) {
  auto& [entry, pos] = static_.at(key);
  entry.last_used_ms = monotonic_ms();
  lru_.splice(lru_.end(), lru_, pos);
}

// Evicts LRU static entries until `bytes` more fit, then reserves them.
void Cache::reserve_locked(std::uint64_t bytes, std::unique_lock<std::mutex>&) {
  while (total_ + reserved_ + bytes > capacity_ && !lru_.empty()) {
    const std::string victim = lru_.front();
    lru_.pop_front();
    auto it = static_.find(victim);
    std::error_code ec;
    fs::remove(it->second.first.local_path, ec);
    total_ -= it->second.first.size_bytes;
    static_.erase(it);
    ++evictions_;
    spdlog::debug("cache evicted {}", victim);
  }
  if (total_ + reserved_ + bytes > capacity_) {
    throw StagingError("cache capacity " + std::to_string(capacity_) + " bytes cannot hold " +
                       std::to_string(bytes) + " more bytes");
  }
  reserved_ += bytes;
}

fs::path Cache::get(const DataRef& ref) {
  if (ref.kind == DataKind::kDynamic) {
    std::uint64_t seq;
    {
      std::lock_guard lock(mu_);
      seq = dynamic_seq_++;
    }
    fs::path dst = root_ / "dynamic" / (std::to_string(seq) + "-" + ref.logical_name);
    stage_dynamic(ref, dst);
    return dst;
  }

  const std::string key = content_key(ref);
  std::unique_lock lock(mu_);
  for (;;) {
    if (static_.count(key) != 0) {
      touch_locked(key);
      return static_.at(key).first.local_path;
    }
    auto flight = in_flight_.find(key);
    if (flight == in_flight_.end()) break;
    // Another task is copying this key; wait for it.
    std::shared_ptr<InFlight> waiting = flight->second;
    waiting->cv.wait(lock, [&] { return waiting->done; });
    if (!waiting->error.empty()) throw StagingError(waiting->error);
  }

  auto flight = std::make_shared<InFlight>();
  in_flight_.emplace(key, flight);
  std::uint64_t size = 0;
  fs::path dst = root_ / "static" / key;
  auto finish = [&](const std::string& error) {
    flight->done = true;
    flight->error = error;
    in_flight_.erase(key);
    flight->cv.notify_all();
  };
  try {
    std::error_code ec;
    size = fs::file_size(ref.source_uri, ec);
    if (ec) throw StagingError("stat " + ref.source_uri + ": " + ec.message());
    reserve_locked(size, lock);
  } catch (const StagingError& e) {
    finish(e.what());
    throw;
  }

  lock.unlock();
  CopyStats copied;
  std::string error;
  const fs::path tmp = dst.string() + ".partial";
  try {
    copied = bulk_copy(ref.source_uri, tmp, kBulkBlockBytes, true);
    ::chmod(tmp.c_str(), 0444);
    fs::rename(tmp, dst);
    ++copies_;
  } catch (const std::exception& e) {
    error = e.what();
    std::error_code ec;
    fs::remove(tmp, ec);
  }
  lock.lock();
  reserved_ -= size;
  if (!error.empty()) {
    finish(error);
    throw StagingError(error);
  }
  lru_.push_back(key);
  CacheEntry entry{key, dst, DataKind::kStatic, copied.bytes, monotonic_ms(), copied.sha256};
  total_ += copied.bytes;
  static_.emplace(key, std::make_pair(std::move(entry), std::prev(lru_.end())));
  finish("");
  return dst;
}

void Cache::stage_dynamic(const DataRef& ref, const fs::path& dst) {
  std::error_code ec;
  const std::uint64_t size = fs::file_size(ref.source_uri, ec);
  if (ec) throw StagingError("stat " + ref.source_uri + ": " + ec.message());
  {
    std::unique_lock lock(mu_);
    reserve_locked(size, lock);
  }
  CopyStats copied;
  try {
    copied = bulk_copy(ref.source_uri, dst);
  } catch (...) {
    std::lock_guard lock(mu_);
    reserved_ -= size;
    throw;
  }
  ++copies_;
  std::lock_guard lock(mu_);
  reserved_ -= size;
  total_ += copied.bytes;
  dynamic_[dst] = copied.bytes;
}

void Cache::release(const fs::path& dynamic_path) {
  std::error_code ec;
  fs::remove(dynamic_path, ec);
  std::lock_guard lock(mu_);
  if (auto it = dynamic_.find(dynamic_path); it != dynamic_.end()) {
    total_ -= it->second;
    dynamic_.erase(it);
  }
}

}  // namespace mtcd
