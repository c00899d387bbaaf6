#include <doctest.h>

#include "coem/backend.hpp"
#include "coem/errors.hpp"
#include "coem/extraction.hpp"
#include "scratch.hpp"

using namespace coem;

TEST_CASE("rule-based example") {
  const Lexicon lex({"BTC", "halving"});
  const auto r = extract_rule_based("I think BTC halving cuts issuance. Nice weather today.", lex);
  REQUIRE(r.candidates.size() == 1);
  CHECK(r.candidates[0].text == "I think BTC halving cuts issuance.");
  CHECK(r.candidates[0].confidence == 2.0 / 6.0);
  CHECK(r.warnings.empty());
}

TEST_CASE("rule-based edge cases") {
  const Lexicon lex({"btc"});
  CHECK(extract_rule_based("", lex).candidates.empty());
  CHECK(extract_rule_based("BTC is up today.", lex).candidates.empty());
  CHECK(extract_rule_based("BTC is up today again!", lex).candidates.size() == 1);
  CHECK_THROWS_AS(extract_rule_based("BTC is up today again!", Lexicon{}), ValidationError);
  CHECK_THROWS_AS(RuleBasedExtractor(Lexicon{}), ValidationError);
}

TEST_CASE("rule-based dedups, caps confidence and is pure") {
  const Lexicon lex({"btc", "eth", "sol", "ada", "dot"});
  const std::string input = "BTC ETH SOL ADA DOT BTC.\nbtc  eth sol ada dot btc!\nNothing here matters much.";
  const auto a = extract_rule_based(input, lex);
  REQUIRE(a.candidates.size() == 1);
  CHECK(a.candidates[0].confidence == 1.0);
  const auto b = extract_rule_based(input, lex);
  CHECK(b.candidates[0].text == a.candidates[0].text);
}

TEST_CASE("multi-word terms match as phrases") {
  const Lexicon lex = Lexicon::parse("# comment\nlead time\n\n  supplier  # trailing\n");
  CHECK(lex.size() == 2);
  CHECK(extract_rule_based("The lead time grew to six weeks.", lex).candidates.size() == 1);
  CHECK(extract_rule_based("Please lead the team in time.", lex).candidates.empty());
}

TEST_CASE("lexicon file") {
  ScratchDir dir;
  spit(dir / "lex.txt", "tariff\nfreight\n");
  CHECK(Lexicon::load(dir / "lex.txt").size() == 2);
  CHECK_THROWS_AS(Lexicon::load(dir / "absent.txt"), NotFoundError);
}

TEST_CASE("judge extraction parses canned replies") {
  MockGenerator gen(0, [](const std::string&) {
    return std::string("Here you go:\n[\"Fed holds rates\", {\"text\": \"Oil supply tightens\", \"confidence\": 0.7}]");
  });
  const auto r = extract_with_judge("some expert remark", gen, "{{input}}");
  REQUIRE(r.candidates.size() == 2);
  CHECK(r.candidates[0].text == "Fed holds rates");
  CHECK(r.candidates[0].confidence == 1.0);
  CHECK(r.candidates[1].confidence == 0.7);
}

TEST_CASE("judge extraction soft-fails") {
  MockGenerator prose(0, [](const std::string&) { return std::string("Nothing notable."); });
  auto r = extract_with_judge("input", prose, "{{input}}");
  CHECK(r.candidates.empty());
  CHECK(r.warnings.size() == 1);

  MockGenerator broken(0, [](const std::string&) { return std::string("[\"unterminated]"); });
  r = extract_with_judge("input", broken, "{{input}}");
  CHECK(r.candidates.empty());
  CHECK(r.warnings.size() == 1);

  MockGenerator mixed(0, [](const std::string&) { return std::string("[42, \"ok fact\", \"OK  fact\", \"  \"]"); });
  r = extract_with_judge("input", mixed, "{{input}}");
  CHECK(r.candidates.size() == 1);
  CHECK(r.warnings.size() == 1);
}

TEST_CASE("judge extraction skips the backend on empty input") {
  int calls = 0;
  MockGenerator gen(0, [&](const std::string&) {
    ++calls;
    return std::string("[]");
  });
  CHECK(extract_with_judge("   ", gen, "{{input}}").candidates.empty());
  CHECK(calls == 0);
}

TEST_CASE("judge extraction propagates backend errors") {
  MockGenerator down(0, [](const std::string&) -> std::string {
    throw BackendError(BackendErrorKind::unavailable, "down");
  });
  CHECK_THROWS_AS(extract_with_judge("x", down, "{{input}}"), BackendError);
}
