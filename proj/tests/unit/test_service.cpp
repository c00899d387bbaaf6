#include <doctest.h>
#include <httplib.h>

#include <cstdlib>
#include <thread>

#include "coem/errors.hpp"
#include "coem/service.hpp"
#include "scratch.hpp"

using namespace coem;
using nlohmann::json;

namespace {

// A ServiceRuntime listening on a free loopback port.
class Running {
 public:
  explicit Running(ServiceConfig cfg) : runtime_(std::move(cfg)) {
    port_ = runtime_.bind();
    thread_ = std::thread([this] { runtime_.serve(); });
    httplib::Client probe("127.0.0.1", port_);
    for (int i = 0; i < 200 && !probe.Options("/"); ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  }
  ~Running() {
    runtime_.stop();
    thread_.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    if (!token.empty()) c.set_bearer_token_auth(token);
    return c;
  }

  httplib::Result get(const std::string& path) const { return client().Get(path); }
  httplib::Result post(const std::string& path, const json& body) const {
    return client().Post(path, body.dump(), "application/json");
  }

  ServiceRuntime& runtime() { return runtime_; }
  std::string token;

 private:
  ServiceRuntime runtime_;
  int port_ = 0;
  std::thread thread_;
};

ServiceConfig config_in(const ScratchDir& dir) {
  ServiceConfig cfg;
  cfg.port = 0;
  cfg.event_log = dir / "events.log";
  cfg.extractor = "none";
  return cfg;
}

json body(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

std::string error_code(const httplib::Result& r) { return body(r)["error"]["code"]; }

}  // namespace

TEST_CASE("fresh server") {
  ScratchDir dir;
  Running srv(config_in(dir));
  auto r = srv.get("/pool");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(body(r)["fragments"] == json::array());
  CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
  CHECK(body(srv.get("/pool/stats"))["retained_fraction"].is_null());
  r = srv.post("/sessions", json::object());
  CHECK(r->status == 422);
  CHECK(error_code(r) == "empty_pool");
  CHECK(srv.get("/nope")->status == 404);
}

TEST_CASE("fragments: create, dedup, validation, pagination") {
  ScratchDir dir;
  auto cfg = config_in(dir);
  cfg.page_size = 2;
  Running srv(cfg);
  auto r = srv.post("/fragments", {{"text", "Fed raises rates"}, {"source", "desk-notes"}});
  CHECK(r->status == 201);
  CHECK(body(r)["fragment"]["value"] == 1.0);
  CHECK_FALSE(body(r)["fragment"].contains("source"));
  r = srv.post("/fragments", {{"text", "  fed raises RATES"}});
  CHECK(r->status == 200);
  CHECK(body(r)["created"] == false);
  CHECK(srv.post("/fragments", {{"text", "   "}})->status == 422);
  CHECK(srv.post("/fragments", {{"text", 5}})->status == 422);
  CHECK(srv.client().Post("/fragments", "{not json", "application/json")->status == 422);

  for (auto t : {"b", "c", "d", "e"}) srv.post("/fragments", {{"text", t}});
  auto page = body(srv.get("/pool?page=3"));
  CHECK(page["total"] == 5);
  REQUIRE(page["fragments"].size() == 1);
  CHECK(page["fragments"][0]["id"] == 5);
  CHECK(body(srv.get("/pool?page_size=10"))["fragments"].size() == 5);
  CHECK(srv.get("/pool?page=x")->status == 422);
}

TEST_CASE("session and feedback end to end") {
  ScratchDir dir;
  Running srv(config_in(dir));
  for (auto t : {"Fed raises rates, again", "Oil supply tightens", "Chip demand cools"}) {
    srv.post("/fragments", {{"text", t}, {"source", "desk"}});
  }
  auto r = srv.post("/sessions", {{"topic_hint", "oil"}});
  REQUIRE(r->status == 201);
  const auto session = body(r);
  CHECK(session["status"] == "generated");
  REQUIRE(session["citations"].size() == 3);
  CHECK(session["citations"][0]["id"] == 2);
  for (const auto& c : session["citations"]) CHECK_FALSE(c.contains("source"));
  const auto id = session["session_id"].get<std::uint64_t>();
  const auto path = "/sessions/" + std::to_string(id);

  r = srv.post(path + "/feedback", {{"rating", "like"}});
  REQUIRE(r->status == 200);
  CHECK(body(r)["status"] == "applied");
  for (const auto& f : body(r)["fragments"]) CHECK(f["value"] == 0.98);

  CHECK(srv.post(path + "/feedback", {{"rating", "dislike"}})->status == 409);
  CHECK(error_code(srv.post(path + "/feedback", {{"rating", "dislike"}})) == "conflict");
  CHECK(srv.post("/sessions/99/feedback", {{"rating", "like"}})->status == 404);
  CHECK(srv.get("/sessions/99")->status == 404);
  CHECK(body(srv.get(path))["status"] == "applied");

  const auto s2 = body(srv.post("/sessions", json::object()))["session_id"].get<std::uint64_t>();
  const auto p2 = "/sessions/" + std::to_string(s2) + "/feedback";
  CHECK(srv.post(p2, {{"rating", "meh"}})->status == 422);
  CHECK(srv.post(p2, {{"rating", 1.5}})->status == 422);
  CHECK(srv.post(p2, json::object())->status == 422);
  CHECK(srv.post(p2, {{"rating", 0.5}})->status == 200);

  const auto stats = body(srv.get("/pool/stats"));
  CHECK(stats["retained_fraction"] == 1.0);
  CHECK(stats["histogram"].size() == 20);
  CHECK(stats["likes"] == 1);

  const auto metrics = body(srv.get("/metrics"));
  CHECK(metrics["sessions_generated"] == 2);
  CHECK(metrics["feedback_applied"] == 2);
  CHECK(metrics["fragments_added"] == 3);

  const auto tail = body(srv.get("/events?from=4"));
  REQUIRE(tail["events"].size() >= 3);
  CHECK(tail["events"][0]["seq"] == 4);
  CHECK(tail["events"][0]["kind"] == "session_generated");
  const auto all = srv.get("/events")->body;
  CHECK(all.find("desk") == std::string::npos);

  // The log alone rebuilds what the server holds.
  const auto live = srv.runtime().engine().read([](const EngineState& s) { return s.pool.snapshot(); });
  CHECK(Journal::replay_file(dir / "events.log").pool.snapshot() == live);
}

TEST_CASE("restart replays the log") {
  ScratchDir dir;
  std::string before;
  {
    Running srv(config_in(dir));
    srv.post("/fragments", {{"text", "a"}});
    const auto id = body(srv.post("/sessions", json::object()))["session_id"].get<int>();
    srv.post("/sessions/" + std::to_string(id) + "/feedback", {{"rating", "dislike"}});
    before = srv.get("/pool")->body;
  }
  Running again(config_in(dir));
  CHECK(again.get("/pool")->body == before);
  CHECK(again.post("/sessions/1/feedback", {{"rating", "like"}})->status == 409);
}

TEST_CASE("no user-identifying request field is persisted") {
  ScratchDir dir;
  auto cfg = config_in(dir);
  cfg.extractor = "rule_based";
  spit(dir / "lex.txt", "tariff\n");
  cfg.lexicon = dir / "lex.txt";
  Running srv(cfg);
  const json who = {{"user_id", "u-8841-zed"}, {"email", "zed@example.org"}, {"user_name", "Zed Quill"},
                    {"ip", "203.0.113.77"}};
  json frag = who;
  frag["text"] = "Steel tariff rises";
  srv.post("/fragments", frag);
  json start = who;
  start["user_input"] = "A new tariff hits steel imports today.";
  start["conversation_id"] = "conv-1";
  const auto id = body(srv.post("/sessions", start))["session_id"].get<int>();
  json fb = who;
  fb["rating"] = "like";
  CHECK(srv.post("/sessions/" + std::to_string(id) + "/feedback", fb)->status == 200);

  const auto log = slurp(dir / "events.log");
  CHECK(log.find("Steel tariff rises") != std::string::npos);
  for (auto secret : {"u-8841-zed", "zed@example.org", "Zed Quill", "203.0.113.77", "user_id", "email"}) {
    CHECK_MESSAGE(log.find(secret) == std::string::npos, secret);
  }
}

TEST_CASE("api token") {
  ScratchDir dir;
  setenv("COEM_TEST_API_TOKEN", "let-me-in", 1);
  auto cfg = config_in(dir);
  cfg.api_token_env = "COEM_TEST_API_TOKEN";
  Running srv(cfg);
  auto r = srv.get("/pool");
  CHECK(r->status == 401);
  CHECK(error_code(r) == "unauthorized");
  srv.token = "let-me-in";
  CHECK(srv.get("/pool")->status == 200);
  unsetenv("COEM_TEST_API_TOKEN");
}

TEST_CASE("backend down is 503 and leaves the pool alone") {
  ScratchDir dir;
  unsetenv("COEM_TEST_MISSING_TOKEN");
  auto cfg = config_in(dir);
  cfg.backend = "remote";
  cfg.remote.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  cfg.remote.model_name = "m";
  cfg.remote.token_env = "COEM_TEST_MISSING_TOKEN";
  Running srv(cfg);
  srv.post("/fragments", {{"text", "a"}});
  const auto before = srv.get("/pool")->body;
  auto r = srv.post("/sessions", json::object());
  CHECK(r->status == 503);
  CHECK(error_code(r) == "backend_auth");
  CHECK(srv.get("/pool")->body == before);
  CHECK(body(srv.get("/metrics"))["backend_errors"] == 1);
}

TEST_CASE("attribution failure defers feedback with 202") {
  ScratchDir dir;
  auto cfg = config_in(dir);
  cfg.attributor = AttributionStrategy::external_judge;  // the mock cannot answer as a judge
  Running srv(cfg);
  srv.post("/fragments", {{"text", "a"}});
  const auto id = body(srv.post("/sessions", json::object()))["session_id"].get<int>();
  auto r = srv.post("/sessions/" + std::to_string(id) + "/feedback", {{"rating", "like"}});
  CHECK(r->status == 202);
  CHECK(body(r)["status"] == "deferred");
  CHECK(body(srv.get("/sessions/" + std::to_string(id)))["feedback"] == 1.0);
  CHECK(body(srv.get("/pool"))["fragments"][0]["session_count"] == 0);
}

TEST_CASE("service config file") {
  ScratchDir dir;
  spit(dir / "svc.yaml",
       "version: 1\nport: 0\nevent_log: ev.log\nattributor: shapley\n"
       "backend:\n  kind: mock\n  seed: 3\nextractor:\n  kind: rule_based\n  lexicon: lex.txt\n");
  const auto cfg = load_service_config(dir / "svc.yaml");
  CHECK(cfg.event_log == dir / "ev.log");
  CHECK(cfg.lexicon == dir / "lex.txt");
  CHECK(cfg.attributor == AttributionStrategy::shapley);
  CHECK(cfg.mock_seed == 3);
  CHECK_THROWS_AS(parse_service_config("version: 1\nportt: 1\n"), ValidationError);
  CHECK_THROWS_AS(parse_service_config("version: 1\nbackend:\n  kind: psychic\n"), ValidationError);
  CHECK_THROWS_AS(parse_service_config("version: 1\nextractor:\n  kind: rule_based\n"), ValidationError);
  CHECK_THROWS_AS(parse_service_config("port: 1\n"), ValidationError);
}
