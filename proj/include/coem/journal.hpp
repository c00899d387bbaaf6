#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coem/events.hpp"

namespace coem {

enum class Recovery {
  strict,              // any unreadable line or incomplete batch is an error
  truncate_torn_tail,  // a torn final batch (crash mid-write) is cut off
};

// Append-only event log plus the state it describes. The log is the source of
// truth: a batch is persisted with a single write and fsync before it touches
// the in-memory state, and opening a log replays it from scratch.
//
// File layout: a header line "#coem-events/1 {pool config}" followed by one
// encode_event() line per event.
//
// Single writer. Callers serialize append_and_apply().
class Journal {
 public:
  // In-memory log; nothing is persisted.
  explicit Journal(PoolConfig cfg = {});

  // Opens (or creates) a file-backed log. An existing header wins over
  // `cfg_if_new`. Throws CorruptLogError / StorageError.
  static Journal open(const std::filesystem::path& path, const PoolConfig& cfg_if_new,
                      Recovery mode = Recovery::truncate_torn_tail);

  // Replays a log file without opening it for writing. An empty (zero byte)
  // file yields a default, empty state.
  static EngineState replay_file(const std::filesystem::path& path,
                                 Recovery mode = Recovery::strict);

  Journal(Journal&&) noexcept;
  Journal& operator=(Journal&&) noexcept;
  ~Journal();

  const EngineState& state() const { return state_; }
  const std::vector<Event>& events() const { return events_; }
  std::uint64_t next_seq() const { return events_.size() + 1; }

  // Persists then applies a batch whose seq values continue the log without
  // gaps and whose batch fields describe exactly this batch. Empty batch is a
  // no-op. Rejected batches leave log and state untouched.
  void append_and_apply(std::vector<Event> batch);

  // Stamps seq, batch fields and timestamps, then append_and_apply().
  void commit(std::vector<Event> batch);

  // Test hooks for crash simulation.
  void set_after_persist_hook(std::function<void()> hook) { after_persist_ = std::move(hook); }
  // The next append writes `complete_lines` whole lines plus half of the next
  // one, then fails as if the process died. The journal refuses further writes.
  void inject_torn_write(std::size_t complete_lines) { torn_write_ = complete_lines; }
  void set_clock(std::function<std::int64_t()> clock) { clock_ = std::move(clock); }

  const std::filesystem::path& path() const { return path_; }

 private:
  struct File;

  void persist(const std::string& bytes);

  EngineState state_;
  std::vector<Event> events_;
  std::filesystem::path path_;
  std::unique_ptr<File> file_;
  std::function<void()> after_persist_;
  std::function<std::int64_t()> clock_;
  std::optional<std::size_t> torn_write_;
  bool poisoned_ = false;
};

}  // namespace coem
