#include <doctest.h>

#include <algorithm>
#include <random>
#include <thread>

#include "coem/engine.hpp"
#include "coem/errors.hpp"
#include "scratch.hpp"

using namespace coem;

namespace {

struct Crash : std::runtime_error {
  Crash() : std::runtime_error("simulated crash") {}
};

// Fails while `failing` is set.
class FlakyAttributor final : public Attributor {
 public:
  bool failing = true;
  AttributionResult attribute(const AttributionRequest& req) override {
    if (failing) throw AttributionError("judge unavailable");
    return attribute_uniform(req);
  }
  AttributionStrategy strategy() const override { return AttributionStrategy::uniform; }
};

class DownGenerator final : public Generator {
 public:
  std::string generate(const GenerationRequest&) override {
    throw BackendError(BackendErrorKind::timeout, "deadline exceeded");
  }
  std::string complete(const std::string&) override {
    throw BackendError(BackendErrorKind::timeout, "deadline exceeded");
  }
};

struct Rig {
  explicit Rig(PoolConfig cfg = {}) : journal(cfg), engine(journal, gen, uniform) {}
  Journal journal;
  MockGenerator gen{0};
  UniformAttributor uniform;
  SessionEngine engine;

  const KnowledgePool& pool() const { return journal.state().pool; }
};

}  // namespace

TEST_CASE("select_subset ranks by value then id") {
  KnowledgePool pool;
  for (int i = 0; i < 5; ++i) pool.add_fragment("fact " + std::to_string(i), "s");
  const std::vector<double> w = {1.0};
  const std::vector<FragmentId> f2 = {FragmentId{2}}, f4 = {FragmentId{4}};
  pool.apply_feedback(f2, w, -1.0);
  pool.apply_feedback(f4, w, -1.0);
  pool.apply_feedback(f4, w, -1.0);

  // Oracle: full sort of (value desc, id asc).
  std::vector<std::pair<double, std::uint64_t>> all;
  for (const auto& [id, f] : pool.fragments()) all.push_back({-f.value, id.value});
  std::sort(all.begin(), all.end());
  std::vector<FragmentId> expected;
  for (std::size_t i = 0; i < 3; ++i) expected.push_back(FragmentId{all[i].second});

  CHECK(select_subset(pool, {std::nullopt, 3}) == expected);
  CHECK(expected == std::vector<FragmentId>{{1}, {3}, {5}});
  CHECK(select_subset(pool, {std::nullopt, 10}).size() == 5);
  CHECK_THROWS_AS(select_subset(pool, {std::nullopt, 0}), ValidationError);
}

TEST_CASE("select_subset prefers hint overlap") {
  KnowledgePool pool;
  pool.add_fragment("rates rise", "s");
  pool.add_fragment("oil supply tightens", "s");
  pool.add_fragment("oil prices and rates", "s");
  CHECK(select_subset(pool, {std::string("Oil RATES"), 1}) == std::vector<FragmentId>{{3}});
  CHECK(select_subset(pool, {std::string("oil"), 2}) == std::vector<FragmentId>{{2}, {3}});
}

TEST_CASE("select_subset edge cases") {
  KnowledgePool pool;
  CHECK_THROWS_AS(select_subset(pool, {}), EmptyPoolError);
  pool.add_fragment("only one", "s");
  CHECK(select_subset(pool, {}) == std::vector<FragmentId>{{1}});
}

TEST_CASE("map_rating") {
  CHECK(map_rating(Rating::like()) == 1.0);
  CHECK(map_rating(Rating::dislike()) == -1.0);
  CHECK(map_rating(Rating::score(0.5)) == 0.0);
  CHECK(map_rating(Rating::score(0.0)) == -1.0);
  CHECK_THROWS_AS(map_rating(Rating::score(1.2)), ValidationError);
  CHECK_THROWS_AS(map_rating(Rating::score(std::nan(""))), ValidationError);
  CHECK(map_rating(Rating::score(0.25), RatingMap{1.0, 0.0}) == 0.25);
  CHECK_THROWS_AS(map_rating(Rating::score(1.0), RatingMap{3.0, 0.0}), ValidationError);
  CHECK(parse_rating("like").kind == Rating::Kind::like);
  CHECK(parse_rating("0.75").scalar == 0.75);
  CHECK_THROWS_AS(parse_rating("meh"), ValidationError);
}

TEST_CASE("session output is the mock summary of the selected fragments") {
  Rig rig;
  rig.engine.add_fragment("A fact, with detail", "s");
  rig.engine.add_fragment("B fact", "s");
  rig.engine.add_fragment("C fact", "s");
  const auto s = rig.engine.run_session({});
  CHECK(s.status == SessionStatus::generated);
  CHECK(s.output_text == generate_mock({{"A fact, with detail", "B fact", "C fact"}}, 0));
  for (const auto& [id, f] : rig.pool().fragments()) CHECK(f.value == 1.0);
}

TEST_CASE("uniform like and dislike hand cases") {
  for (auto [rating, expected] : {std::pair{Rating::like(), 0.98}, std::pair{Rating::dislike(), 0.96}}) {
    Rig rig;
    for (auto t : {"a", "b", "c", "d"}) rig.engine.add_fragment(t, "s");
    const auto s = rig.engine.run_session({});
    const auto applied = rig.engine.submit_feedback(s.id, rating);
    CHECK(applied.status == SessionStatus::applied);
    REQUIRE(applied.attribution);
    CHECK(applied.attribution->weights == std::vector<double>(3, 1.0 / 3.0));
    for (auto id : s.selected) CHECK(rig.pool().at(id).value == expected);
    CHECK(rig.pool().at(FragmentId{4}).value == 1.0);
    CHECK(rig.pool().at(FragmentId{4}).session_count == 0);
    CHECK(rig.pool().iteration() == 1);
  }
}

TEST_CASE("feedback is applied once") {
  Rig rig;
  rig.engine.add_fragment("a", "s");
  const auto s = rig.engine.run_session({});
  rig.engine.submit_feedback(s.id, Rating::like());
  const auto snap = rig.pool().snapshot();
  CHECK_THROWS_AS(rig.engine.submit_feedback(s.id, Rating::dislike()), ConflictError);
  CHECK(rig.pool().snapshot() == snap);
  CHECK_THROWS_AS(rig.engine.submit_feedback(SessionId{99}, Rating::like()), NotFoundError);
  CHECK_THROWS_AS(rig.engine.submit_feedback(s.id, Rating::score(2.0)), ValidationError);
}

TEST_CASE("empty pool and backend failure leave the pool untouched") {
  Journal journal;
  DownGenerator down;
  UniformAttributor uniform;
  SessionEngine engine(journal, down, uniform);
  CHECK_THROWS_AS(engine.run_session({}), EmptyPoolError);
  engine.add_fragment("a", "s");
  const auto snap = journal.state().pool.snapshot();
  try {
    engine.run_session({});
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.kind() == BackendErrorKind::timeout);
  }
  CHECK(journal.state().pool.snapshot() == snap);
  CHECK(journal.state().sessions.empty());
  CHECK(journal.events().back().kind == EventKind::backend_error);
  CHECK(journal.state().counters.backend_errors == 1);
}

TEST_CASE("extraction adds new fragments at value 1 and skips duplicates") {
  Journal journal;
  MockGenerator gen;
  UniformAttributor uniform;
  RuleBasedExtractor extractor(Lexicon({"tariff", "freight"}));
  SessionEngine engine(journal, gen, uniform, &extractor);
  engine.add_fragment("Freight rates doubled since the spring.", "s");

  const auto s = engine.run_session({}, "Freight rates doubled since the spring. A new tariff hits steel imports. Great!");
  const auto applied = engine.submit_feedback(s.id, Rating::dislike());
  const auto& pool = journal.state().pool;
  CHECK(pool.total_count() == 2);
  const auto& added = pool.at(FragmentId{2});
  CHECK(added.text == "A new tariff hits steel imports.");
  CHECK(added.value == 1.0);
  CHECK(added.source == kExtractedSource);
  CHECK(added.created_iteration == 1);
  CHECK(pool.at(FragmentId{1}).value == 0.94);
  CHECK(journal.state().counters.fragments_extracted == 1);

  const auto s2 = engine.run_session({}, "");
  engine.submit_feedback(s2.id, Rating::like());
  CHECK(journal.state().pool.total_count() == 2);
}

TEST_CASE("fragments pruned after generation receive no feedback") {
  PoolConfig cfg;
  cfg.min_sessions_before_prune = 1;
  cfg.subset_size = 1;
  Rig rig(cfg);
  rig.engine.add_fragment("a", "s");
  rig.engine.add_fragment("b", "s");
  const auto early = rig.engine.run_session({std::nullopt, 2});
  // Drive "a" below theta through other sessions.
  while (rig.pool().at(FragmentId{1}).alive) {
    const auto s = rig.engine.run_session({std::string("a"), 1});
    rig.engine.submit_feedback(s.id, Rating::dislike());
  }
  const auto b_before = rig.pool().at(FragmentId{2}).value;
  const auto applied = rig.engine.submit_feedback(early.id, Rating::like());
  REQUIRE(applied.attribution);
  CHECK(applied.attribution->weights.size() == 1);
  CHECK(rig.pool().at(FragmentId{2}).value == b_before);
  CHECK(rig.pool().at(FragmentId{2}).session_count == 1);
}

TEST_CASE("attribution failure defers the update until retry") {
  Journal journal;
  MockGenerator gen;
  FlakyAttributor flaky;
  SessionEngine engine(journal, gen, flaky);
  engine.add_fragment("a", "s");
  const auto s = engine.run_session({});
  const auto events_before = journal.events().size();
  CHECK_THROWS_AS(engine.submit_feedback(s.id, Rating::dislike()), AttributionError);
  CHECK(journal.events().size() == events_before);
  CHECK(journal.state().pool.at(FragmentId{1}).value == 1.0);
  const auto pending = engine.session(s.id);
  REQUIRE(pending);
  CHECK(pending->feedback == -1.0);
  CHECK(pending->status == SessionStatus::generated);

  flaky.failing = false;
  const auto applied = engine.retry_feedback(s.id);
  CHECK(applied.status == SessionStatus::applied);
  CHECK(journal.state().pool.at(FragmentId{1}).value == 0.94);
  CHECK_THROWS_AS(engine.retry_feedback(s.id), NotFoundError);
}

TEST_CASE("crash at any boundary never leaves a partial session") {
  const std::vector<std::optional<FaultPoint>> points = {
      FaultPoint::after_attribution, FaultPoint::after_update, FaultPoint::after_extract,
      FaultPoint::after_prune, FaultPoint::after_persist, std::nullopt /* torn write */};
  for (const auto& point : points) {
    CAPTURE(point ? to_string(*point) : "torn_write");
    ScratchDir dir;
    const auto path = dir / "events.log";
    PoolConfig cfg;
    cfg.min_sessions_before_prune = 1;
    MockGenerator gen;
    UniformAttributor uniform;
    RuleBasedExtractor extractor(Lexicon({"tariff"}));
    SessionId victim;
    std::string before;
    {
      auto journal = Journal::open(path, cfg);
      SessionEngine engine(journal, gen, uniform, &extractor);
      for (auto t : {"a", "b", "c"}) engine.add_fragment(t, "s");
      // Push "a" near the threshold so the victim session prunes it.
      for (int i = 0; i < 9; ++i) {
        const auto s = engine.run_session({std::string("a"), 1});
        engine.submit_feedback(s.id, Rating::dislike());
      }
      REQUIRE(journal.state().pool.at(FragmentId{1}).alive);
      victim = engine.run_session({std::string("a"), 3}, "A new tariff hits steel imports today.").id;
      before = journal.state().pool.snapshot();

      if (point) {
        engine.set_fault_hook([p = *point](FaultPoint at) {
          if (at == p) throw Crash();
        });
      } else {
        journal.inject_torn_write(1);
      }
      CHECK_THROWS(engine.submit_feedback(victim, Rating::dislike()));
    }

    const auto recovered = Journal::replay_file(path, Recovery::truncate_torn_tail);
    const auto& session = recovered.sessions.at(victim);
    const bool durable = point == FaultPoint::after_persist;
    if (durable) {
      CHECK(session.status == SessionStatus::applied);
      CHECK_FALSE(recovered.pool.at(FragmentId{1}).alive);
      CHECK(recovered.pool.total_count() == 4);
    } else {
      CHECK(session.status == SessionStatus::generated);
      CHECK(recovered.pool.snapshot() == before);
    }

    // A restarted engine can finish the session exactly once.
    auto journal = Journal::open(path, cfg);
    SessionEngine engine(journal, gen, uniform, &extractor);
    if (durable) {
      CHECK_THROWS_AS(engine.submit_feedback(victim, Rating::dislike()), ConflictError);
    } else {
      engine.submit_feedback(victim, Rating::dislike());
    }
    const auto& pool = journal.state().pool;
    CHECK_FALSE(pool.at(FragmentId{1}).alive);
    CHECK(pool.total_count() == 4);
    CHECK(Journal::replay_file(path, Recovery::strict).pool == pool);
  }
}

TEST_CASE("concurrent sessions serialize through the writer") {
  ScratchDir dir;
  const auto path = dir / "events.log";
  auto journal = Journal::open(path, PoolConfig{});
  MockGenerator gen;
  UniformAttributor uniform;
  SessionEngine engine(journal, gen, uniform);
  for (int i = 0; i < 30; ++i) engine.add_fragment("fact " + std::to_string(i), "s");

  std::vector<std::thread> workers;
  std::atomic<int> conflicts{0};
  for (int w = 0; w < 4; ++w) {
    workers.emplace_back([&, w] {
      std::mt19937_64 rng(w);
      for (int i = 0; i < 40; ++i) {
        const auto s = engine.run_session({"fact " + std::to_string(rng() % 30), 3});
        const auto rating = rng() % 2 ? Rating::like() : Rating::dislike();
        try {
          engine.submit_feedback(s.id, rating);
          engine.submit_feedback(s.id, rating);
        } catch (const ConflictError&) {
          ++conflicts;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  CHECK(conflicts == 160);
  CHECK(journal.state().counters.feedback_applied == 160);
  CHECK(journal.state().pool.iteration() == 160);
  CHECK(Journal::replay_file(path).pool == journal.state().pool);
}
