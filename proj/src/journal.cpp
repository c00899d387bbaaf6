#include "coem/journal.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

namespace {

constexpr std::string_view kHeaderTag = "#coem-events/1 ";

std::string header_line(const PoolConfig& cfg) {
  using text::format_double;
  return std::string(kHeaderTag) + "{\"alpha\":" + format_double(cfg.alpha) +
         ",\"theta\":" + format_double(cfg.theta) +
         ",\"min_sessions_before_prune\":" + std::to_string(cfg.min_sessions_before_prune) +
         ",\"subset_size\":" + std::to_string(cfg.subset_size) + "}\n";
}

PoolConfig parse_header(std::string_view line) {
  const auto j = nlohmann::json::parse(line.substr(kHeaderTag.size()), nullptr, false);
  if (j.is_discarded()) throw CorruptLogError(1, "unreadable header");
  PoolConfig cfg;
  try {
    cfg.alpha = j.at("alpha").get<double>();
    cfg.theta = j.at("theta").get<double>();
    cfg.min_sessions_before_prune = j.at("min_sessions_before_prune").get<std::uint64_t>();
    cfg.subset_size = j.at("subset_size").get<std::uint64_t>();
    cfg.validate();
  } catch (const std::exception& e) {
    throw CorruptLogError(1, std::string("bad header: ") + e.what());
  }
  return cfg;
}

std::int64_t wall_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

struct Loaded {
  PoolConfig config;
  bool has_header = false;
  EngineState state;
  std::vector<Event> events;
  std::uintmax_t valid_bytes = 0;  // prefix covering header + complete batches
};

Loaded load(const std::filesystem::path& path, Recovery mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot read event log " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  Loaded out;
  if (data.empty()) return out;

  std::size_t pos = 0;
  std::size_t lineno = 0;
  std::vector<Event> pending;
  std::uint64_t expected_seq = 1;

  auto torn = [&](std::size_t line, const std::string& why) {
    if (mode == Recovery::strict) throw CorruptLogError(line, why);
  };

  while (pos < data.size()) {
    ++lineno;
    const auto nl = data.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string_view line(data.data() + pos, (terminated ? nl : data.size()) - pos);
    const bool last_line = !terminated || nl + 1 == data.size();

    if (!terminated) {
      torn(lineno, "truncated line (no trailing newline)");
      break;
    }
    if (lineno == 1) {
      if (!line.starts_with(kHeaderTag)) throw CorruptLogError(1, "missing #coem-events/1 header");
      out.config = parse_header(line);
      out.has_header = true;
      out.state = EngineState(out.config);
      pos = nl + 1;
      out.valid_bytes = pos;
      continue;
    }

    Event e;
    try {
      e = decode_event(line);
    } catch (const ValidationError& err) {
      if (last_line) {
        torn(lineno, err.what());
        break;
      }
      throw CorruptLogError(lineno, err.what());
    }
    if (e.seq != expected_seq) {
      throw CorruptLogError(lineno, "expected seq " + std::to_string(expected_seq) + ", found " +
                                        std::to_string(e.seq));
    }
    if (pending.empty() ? e.batch != e.seq
                        : (e.batch != pending.front().batch ||
                           e.batch_size != pending.front().batch_size)) {
      throw CorruptLogError(lineno, "event does not continue its batch");
    }
    ++expected_seq;
    pos = nl + 1;
    pending.push_back(std::move(e));
    if (pending.size() == pending.front().batch_size) {
      try {
        apply_batch(out.state, pending);
      } catch (const ValidationError& err) {
        throw CorruptLogError(lineno, std::string("replay failed: ") + err.what());
      }
      for (auto& ev : pending) out.events.push_back(std::move(ev));
      pending.clear();
      out.valid_bytes = pos;
    }
  }
  if (!pending.empty()) {
    torn(lineno, "final batch is incomplete (" + std::to_string(pending.size()) + " of " +
                     std::to_string(pending.front().batch_size) + " events)");
  }
  return out;
}

}  // namespace

struct Journal::File {
  int fd = -1;
  explicit File(int f) : fd(f) {}
  File(const File&) = delete;
  File& operator=(const File&) = delete;
  ~File() {
    if (fd >= 0) ::close(fd);
  }
};

Journal::Journal(PoolConfig cfg) : state_(cfg), clock_(wall_clock_ms) {}
Journal::Journal(Journal&&) noexcept = default;
Journal& Journal::operator=(Journal&&) noexcept = default;
Journal::~Journal() = default;

EngineState Journal::replay_file(const std::filesystem::path& path, Recovery mode) {
  return load(path, mode).state;
}

Journal Journal::open(const std::filesystem::path& path, const PoolConfig& cfg_if_new,
                      Recovery mode) {
  cfg_if_new.validate();
  Loaded loaded;
  const bool exists = std::filesystem::exists(path);
  if (exists) loaded = load(path, mode);

  Journal j(loaded.has_header ? loaded.config : cfg_if_new);
  j.path_ = path;
  if (loaded.has_header) {
    j.state_ = std::move(loaded.state);
    j.events_ = std::move(loaded.events);
  }

  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT, 0644);
  if (fd < 0) throw StorageError("cannot open event log " + path.string() + ": " + std::strerror(errno));
  j.file_ = std::make_unique<File>(fd);

  if (!loaded.has_header) {
    if (::ftruncate(fd, 0) != 0) throw StorageError("cannot reset event log");
    j.persist(header_line(j.state_.pool.config()));
  } else if (std::filesystem::file_size(path) != loaded.valid_bytes) {
    // Drop the torn tail left by a crash mid-write.
    if (::ftruncate(fd, static_cast<off_t>(loaded.valid_bytes)) != 0 || ::fsync(fd) != 0) {
      throw StorageError("cannot truncate torn tail of " + path.string());
    }
  }
  if (::lseek(fd, 0, SEEK_END) < 0) throw StorageError("cannot seek event log");
  return j;
}

void Journal::persist(const std::string& bytes) {
  if (!file_) return;
  const off_t start = ::lseek(file_->fd, 0, SEEK_END);

  std::size_t limit = bytes.size();
  if (torn_write_) {
    std::size_t cut = 0;
    for (std::size_t n = 0; n < *torn_write_ && cut < bytes.size(); ++n) {
      cut = bytes.find('\n', cut) + 1;
    }
    const auto next = bytes.find('\n', cut);
    limit = cut + ((next == std::string::npos ? bytes.size() : next) - cut) / 2;
  }

  std::size_t written = 0;
  while (written < limit) {
    const auto n = ::write(file_->fd, bytes.data() + written, limit - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string why = std::strerror(errno);
      if (::ftruncate(file_->fd, start) != 0) poisoned_ = true;
      throw StorageError("event log write failed: " + why);
    }
    written += static_cast<std::size_t>(n);
  }
  if (torn_write_) {
    torn_write_.reset();
    poisoned_ = true;
    throw StorageError("injected crash during event log write");
  }
  if (::fsync(file_->fd) != 0) {
    const std::string why = std::strerror(errno);
    if (::ftruncate(file_->fd, start) != 0) poisoned_ = true;
    throw StorageError("event log fsync failed: " + why);
  }
}

void Journal::append_and_apply(std::vector<Event> batch) {
  if (batch.empty()) return;
  if (poisoned_) throw StorageError("journal needs to be reopened after a failed write");

  const std::uint64_t first = next_seq();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].seq != first + i) {
      throw ValidationError("batch seq " + std::to_string(batch[i].seq) + " out of order, expected " +
                            std::to_string(first + i));
    }
    if (batch[i].batch != first || batch[i].batch_size != batch.size()) {
      throw ValidationError("batch fields do not describe this batch");
    }
  }

  // Dry run: a batch the state would reject is never persisted.
  BatchEffect effect = prepare_batch(state_, batch);

  std::string bytes;
  for (const auto& e : batch) bytes += encode_event(e) + "\n";
  persist(bytes);

  if (after_persist_) {
    try {
      after_persist_();
    } catch (...) {
      // The batch is on disk but not applied; only a reopen can reconcile.
      poisoned_ = true;
      throw;
    }
  }

  commit_batch(state_, std::move(effect));
  for (auto& e : batch) events_.push_back(std::move(e));
}

void Journal::commit(std::vector<Event> batch) {
  const std::uint64_t first = next_seq();
  const std::int64_t now = clock_ ? clock_() : 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    batch[i].seq = first + i;
    batch[i].batch = first;
    batch[i].batch_size = static_cast<std::uint32_t>(batch.size());
    batch[i].timestamp_ms = now;
  }
  append_and_apply(std::move(batch));
}

}  // namespace coem
