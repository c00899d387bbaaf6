#include <doctest.h>

#include "coem/errors.hpp"
#include "coem/journal.hpp"
#include "scratch.hpp"

using namespace coem;

namespace {

Event added(std::uint64_t id, const std::string& text) {
  Fragment f;
  f.id = FragmentId{id};
  f.text = text;
  f.source = "s";
  return events::fragment_added(f);
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    auto nl = s.find('\n', pos);
    if (nl == std::string::npos) nl = s.size();
    out.push_back(s.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("file journal replays to the same state") {
  ScratchDir dir;
  const auto path = dir / "events.log";
  PoolConfig cfg;
  cfg.alpha = 0.1;
  std::string snapshot;
  {
    auto j = Journal::open(path, cfg);
    j.commit({added(1, "first"), added(2, "second")});
    j.commit({added(3, "third")});
    snapshot = j.state().pool.snapshot();
    CHECK(j.next_seq() == 4);
  }
  const auto lines = lines_of(slurp(path));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0].rfind("#coem-events/1 ", 0) == 0);

  const auto state = Journal::replay_file(path);
  CHECK(state.pool.snapshot() == snapshot);
  CHECK(state.pool.config().alpha == 0.1);

  // Reopening keeps the header config and appends.
  auto j = Journal::open(path, PoolConfig{});
  CHECK(j.state().pool.config().alpha == 0.1);
  CHECK(j.events().size() == 3);
  j.commit({added(4, "fourth")});
  CHECK(Journal::replay_file(path).pool.total_count() == 4);
}

TEST_CASE("empty batch is a no-op") {
  ScratchDir dir;
  auto j = Journal::open(dir / "e.log", PoolConfig{});
  const auto size = std::filesystem::file_size(dir / "e.log");
  j.commit({});
  j.append_and_apply({});
  CHECK(j.events().empty());
  CHECK(std::filesystem::file_size(dir / "e.log") == size);
}

TEST_CASE("out-of-order and malformed batches are rejected without writing") {
  ScratchDir dir;
  auto j = Journal::open(dir / "e.log", PoolConfig{});
  const auto size = std::filesystem::file_size(dir / "e.log");
  auto e = added(1, "x");
  e.seq = 2;
  e.batch = 2;
  CHECK_THROWS_AS(j.append_and_apply({e}), ValidationError);
  e.seq = 1;
  e.batch = 1;
  e.batch_size = 2;
  CHECK_THROWS_AS(j.append_and_apply({e}), ValidationError);
  // Inconsistent with state: wrong id.
  CHECK_THROWS_AS(j.commit({added(5, "x")}), ValidationError);
  CHECK(std::filesystem::file_size(dir / "e.log") == size);
  CHECK(j.state().pool.empty());
}

TEST_CASE("empty and header-only logs") {
  ScratchDir dir;
  spit(dir / "empty.log", "");
  const auto s = Journal::replay_file(dir / "empty.log");
  CHECK(s.pool.empty());
  CHECK(s.pool.config() == PoolConfig{});
  { auto j = Journal::open(dir / "h.log", PoolConfig{}); }
  CHECK(Journal::replay_file(dir / "h.log").pool.empty());
  CHECK_THROWS_AS(Journal::replay_file(dir / "absent.log"), StorageError);
}

TEST_CASE("torn tail: strict fails with the line, tolerant truncates") {
  ScratchDir dir;
  const auto path = dir / "e.log";
  {
    auto j = Journal::open(path, PoolConfig{});
    j.commit({added(1, "one")});
    j.commit({added(2, "two"), added(3, "three")});
  }
  const auto intact = slurp(path);
  SUBCASE("half a line") {
    spit(path, intact.substr(0, intact.size() - 10));
    try {
      Journal::replay_file(path, Recovery::strict);
      FAIL("expected CorruptLogError");
    } catch (const CorruptLogError& e) {
      CHECK(e.line() == 4);
    }
    const auto s = Journal::replay_file(path, Recovery::truncate_torn_tail);
    CHECK(s.pool.total_count() == 1);
    auto j = Journal::open(path, PoolConfig{});
    CHECK(j.events().size() == 1);
    CHECK(slurp(path) == intact.substr(0, intact.find("\n2\t") + 1));
    j.commit({added(2, "two again")});
    CHECK(Journal::replay_file(path, Recovery::strict).pool.total_count() == 2);
  }
  SUBCASE("incomplete batch") {
    spit(path, intact.substr(0, intact.rfind("3\t")));
    CHECK_THROWS_AS(Journal::replay_file(path, Recovery::strict), CorruptLogError);
    CHECK(Journal::replay_file(path, Recovery::truncate_torn_tail).pool.total_count() == 1);
  }
}

TEST_CASE("corruption before the tail is never tolerated") {
  ScratchDir dir;
  const auto path = dir / "e.log";
  {
    auto j = Journal::open(path, PoolConfig{});
    j.commit({added(1, "one")});
    j.commit({added(2, "two")});
    j.commit({added(3, "three")});
  }
  auto lines = lines_of(slurp(path));
  SUBCASE("garbage line") {
    lines[1] = "garbage";
  }
  SUBCASE("seq gap") {
    lines[2].replace(0, 1, "3");
  }
  std::string joined;
  for (const auto& l : lines) joined += l + "\n";
  spit(path, joined);
  try {
    Journal::replay_file(path, Recovery::truncate_torn_tail);
    FAIL("expected CorruptLogError");
  } catch (const CorruptLogError& e) {
    CHECK(e.line() >= 2);
  }
}

TEST_CASE("missing header") {
  ScratchDir dir;
  spit(dir / "e.log", "1\t{}\n");
  CHECK_THROWS_AS(Journal::replay_file(dir / "e.log"), CorruptLogError);
}

TEST_CASE("injected torn write poisons the journal and recovers on reopen") {
  ScratchDir dir;
  const auto path = dir / "e.log";
  auto j = Journal::open(path, PoolConfig{});
  j.commit({added(1, "one")});
  j.inject_torn_write(1);
  CHECK_THROWS_AS(j.commit({added(2, "two"), added(3, "three")}), StorageError);
  CHECK(j.state().pool.total_count() == 1);
  CHECK_THROWS_AS(j.commit({added(2, "two")}), StorageError);

  CHECK_THROWS_AS(Journal::replay_file(path, Recovery::strict), CorruptLogError);
  auto reopened = Journal::open(path, PoolConfig{});
  CHECK(reopened.state().pool.total_count() == 1);
}

TEST_CASE("after-persist crash leaves the batch durable") {
  ScratchDir dir;
  const auto path = dir / "e.log";
  auto j = Journal::open(path, PoolConfig{});
  j.set_after_persist_hook([] { throw std::runtime_error("crash"); });
  CHECK_THROWS_AS(j.commit({added(1, "one")}), std::runtime_error);
  CHECK(j.state().pool.empty());
  CHECK_THROWS_AS(j.commit({added(1, "one")}), StorageError);
  CHECK(Journal::open(path, PoolConfig{}).state().pool.total_count() == 1);
}

TEST_CASE("in-memory journal and clock") {
  Journal j;
  j.set_clock([] { return std::int64_t{1234}; });
  j.commit({added(1, "one")});
  CHECK(j.events().at(0).timestamp_ms == 1234);
  CHECK(j.path().empty());
}
