#include "coem/service.hpp"

#include <cstdlib>
#include <set>
#include <sstream>

#include <httplib.h>
#include <yaml-cpp/yaml.h>

#include "coem/errors.hpp"
#include "coem/simulator.hpp"
#include "coem/text.hpp"

namespace coem {

namespace {

using nlohmann::json;

constexpr std::size_t kMaxEventsPerPage = 1000;

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& message) {
  send(res, status, {{"error", {{"code", code}, {"message", message}}}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  auto j = json::parse(req.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError("request body must be a JSON object");
  return j;
}

std::string string_field(const json& body, const char* key, bool required) {
  if (!body.contains(key)) {
    if (required) throw ValidationError(std::string("missing field '") + key + "'");
    return {};
  }
  if (!body.at(key).is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
  return body.at(key).get<std::string>();
}

std::uint64_t query_uint(const httplib::Request& req, const char* key, std::uint64_t fallback) {
  if (!req.has_param(key)) return fallback;
  const auto raw = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(std::string("query parameter '") + key + "' must be a non-negative integer");
  }
}

json fragment_json(const Fragment& f) {
  return {{"id", f.id.value},
          {"text", f.text},
          {"value", f.value},
          {"session_count", f.session_count},
          {"feedback_count", f.feedback_count},
          {"created_iteration", f.created_iteration},
          {"alive", f.alive}};
}

json attribution_json(const std::optional<AttributionResult>& a) {
  if (!a) return nullptr;
  return {{"strategy", to_string(a->strategy)}, {"weights", a->weights}};
}

// Sources are never echoed: citations are numbered, not attributed.
json session_json(const Session& s, const KnowledgePool& pool) {
  auto citations = json::array();
  for (std::size_t i = 0; i < s.selected.size(); ++i) {
    const Fragment* f = pool.find(s.selected[i]);
    citations.push_back({{"citation", i + 1},
                         {"id", s.selected[i].value},
                         {"text", f ? f->text : ""},
                         {"value", f ? json(f->value) : json(nullptr)},
                         {"alive", f ? f->alive : false}});
  }
  return {{"session_id", s.id.value},
          {"conversation_id", s.conversation_id},
          {"status", to_string(s.status)},
          {"output", s.output_text},
          {"citations", std::move(citations)},
          {"feedback", s.feedback ? json(*s.feedback) : json(nullptr)},
          {"attribution", attribution_json(s.attribution)}};
}

template <class Fn>
httplib::Server::Handler guarded(const std::string& token, Fn fn) {
  return [token, fn](const httplib::Request& req, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    if (!token.empty() && req.get_header_value("Authorization") != "Bearer " + token) {
      send_error(res, 401, "unauthorized", "missing or wrong API token");
      return;
    }
    try {
      fn(req, res);
    } catch (const EmptyPoolError& e) {
      send_error(res, 422, "empty_pool", e.what());
    } catch (const ValidationError& e) {
      send_error(res, 422, "validation", e.what());
    } catch (const NotFoundError& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const ConflictError& e) {
      send_error(res, 409, "conflict", e.what());
    } catch (const BackendError& e) {
      send_error(res, 503, std::string("backend_") + to_string(e.kind()), e.what());
    } catch (const StorageError& e) {
      send_error(res, 503, "storage", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

SessionId parse_session_id(const httplib::Request& req) {
  const auto raw = req.matches[1].str();
  try {
    return SessionId{std::stoull(raw)};
  } catch (const std::exception&) {
    throw NotFoundError("unknown session " + raw);
  }
}

}  // namespace

void ServiceConfig::validate() const {
  pool.validate();
  if (port < 0 || port > 65535) throw ValidationError("port out of range");
  if (backend != "mock" && backend != "remote") {
    throw ValidationError("backend must be 'mock' or 'remote'");
  }
  if (backend == "remote") remote.validate();
  if (extractor != "rule_based" && extractor != "judge" && extractor != "none") {
    throw ValidationError("extractor must be 'rule_based', 'judge' or 'none'");
  }
  if (extractor == "rule_based" && lexicon.empty()) {
    throw ValidationError("rule_based extractor needs 'extractor.lexicon'");
  }
  if (page_size == 0) throw ValidationError("page_size must be positive");
}

ServiceConfig parse_service_config(const std::string& yaml) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("service config is not valid YAML: ") + e.what());
  }
  if (!root.IsMap()) throw ValidationError("service config must be a mapping");
  static const std::set<std::string> known = {"version", "host", "port", "event_log", "pool",
                                              "backend", "attributor", "extractor", "api_token_env",
                                              "page_size", "template_dir"};
  auto reject_unknown = [](const YAML::Node& node, const std::set<std::string>& allowed,
                           const std::string& where) {
    if (!node.IsMap()) throw ValidationError("'" + where + "' must be a mapping");
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.contains(key)) throw ValidationError("unknown key '" + where + key + "' in service config");
    }
  };
  reject_unknown(root, known, "");
  if (root["pool"]) {
    reject_unknown(root["pool"], {"alpha", "theta", "min_sessions_before_prune", "subset_size"}, "pool.");
  }
  if (root["backend"]) {
    reject_unknown(root["backend"], {"kind", "seed", "endpoint", "model", "timeout_ms", "max_retries",
                                     "token_env", "transcript"},
                   "backend.");
  }
  if (root["extractor"]) reject_unknown(root["extractor"], {"kind", "lexicon"}, "extractor.");
  if (!root["version"] || root["version"].as<int>() != 1) {
    throw ValidationError("service config version must be 1");
  }

  ServiceConfig cfg;
  try {
    if (root["host"]) cfg.host = root["host"].as<std::string>();
    if (root["port"]) cfg.port = root["port"].as<int>();
    if (root["event_log"]) cfg.event_log = root["event_log"].as<std::string>();
    if (root["template_dir"]) cfg.template_dir = root["template_dir"].as<std::string>();
    if (root["api_token_env"]) cfg.api_token_env = root["api_token_env"].as<std::string>();
    if (root["page_size"]) cfg.page_size = root["page_size"].as<std::size_t>();
    if (auto p = root["pool"]) {
      if (p["alpha"]) cfg.pool.alpha = p["alpha"].as<double>();
      if (p["theta"]) cfg.pool.theta = p["theta"].as<double>();
      if (p["min_sessions_before_prune"]) {
        cfg.pool.min_sessions_before_prune = p["min_sessions_before_prune"].as<std::uint64_t>();
      }
      if (p["subset_size"]) cfg.pool.subset_size = p["subset_size"].as<std::uint64_t>();
    }
    if (auto b = root["backend"]) {
      if (b["kind"]) cfg.backend = b["kind"].as<std::string>();
      if (b["seed"]) cfg.mock_seed = b["seed"].as<std::uint64_t>();
      if (b["endpoint"]) cfg.remote.endpoint = b["endpoint"].as<std::string>();
      if (b["model"]) cfg.remote.model_name = b["model"].as<std::string>();
      if (b["timeout_ms"]) cfg.remote.timeout = std::chrono::milliseconds(b["timeout_ms"].as<long>());
      if (b["max_retries"]) cfg.remote.max_retries = b["max_retries"].as<int>();
      if (b["token_env"]) cfg.remote.token_env = b["token_env"].as<std::string>();
      if (b["transcript"]) cfg.backend_transcript = b["transcript"].as<std::string>();
    }
    if (root["attributor"]) {
      cfg.attributor = parse_attribution_strategy(root["attributor"].as<std::string>());
    }
    if (auto x = root["extractor"]) {
      if (x["kind"]) cfg.extractor = x["kind"].as<std::string>();
      if (x["lexicon"]) cfg.lexicon = x["lexicon"].as<std::string>();
    }
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("service config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read service config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto cfg = parse_service_config(buf.str());
  // Relative paths resolve against the config file's directory.
  const auto base = path.parent_path();
  for (auto* p : {&cfg.event_log, &cfg.lexicon, &cfg.template_dir, &cfg.backend_transcript}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return cfg;
}

Service::Service(SessionEngine& engine, const ServiceConfig& cfg) : engine_(engine), cfg_(cfg) {
  if (!cfg_.api_token_env.empty()) {
    if (const char* t = std::getenv(cfg_.api_token_env.c_str())) api_token_ = t;
  }
}

void Service::mount(httplib::Server& server) {
  const std::string& token = api_token_;

  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.status = 204;
  });

  server.Post("/fragments", guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const auto text = string_field(body, "text", true);
    auto source = string_field(body, "source", false);
    if (source.empty()) source = "contributed";
    const auto before = engine_.read([](const EngineState& s) { return s.pool.next_id(); });
    const FragmentId id = engine_.add_fragment(text, source);
    const bool created = id.value >= before;
    engine_.read([&](const EngineState& s) {
      send(res, created ? 201 : 200, {{"created", created}, {"fragment", fragment_json(s.pool.at(id))}});
      return 0;
    });
  }));

  server.Get("/pool", guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto page = std::max<std::uint64_t>(1, query_uint(req, "page", 1));
    const auto size = std::clamp<std::uint64_t>(query_uint(req, "page_size", cfg_.page_size), 1, 1000);
    const bool include_pruned = req.get_param_value("include_pruned") == "true";
    engine_.read([&](const EngineState& s) {
      auto items = json::array();
      std::uint64_t index = 0;
      std::uint64_t total = 0;
      for (const auto& [id, f] : s.pool.fragments()) {
        if (!f.alive && !include_pruned) continue;
        ++total;
        if (index++ < (page - 1) * size || items.size() >= size) continue;
        items.push_back(fragment_json(f));
      }
      send(res, 200, {{"page", page}, {"page_size", size}, {"total", total}, {"fragments", items}});
      return 0;
    });
  }));

  server.Get("/pool/stats", guarded(token, [this](const httplib::Request&, httplib::Response& res) {
    engine_.read([&](const EngineState& s) {
      const double theta = s.pool.config().theta;
      sim::Histogram hist{};
      for (const auto& [id, f] : s.pool.fragments()) {
        if (f.alive) ++hist[sim::histogram_bin(f.value)];
      }
      auto bins = json::array();
      for (std::size_t b = 0; b < sim::kHistogramBins; ++b) {
        bins.push_back({{"bin_low", sim::histogram_bin_low(b)},
                        {"bin_high", sim::histogram_bin_high(b)},
                        {"count", hist[b]}});
      }
      send(res, 200,
           {{"theta", theta},
            {"alpha", s.pool.config().alpha},
            {"retained_fraction", s.pool.empty() ? json(nullptr) : json(s.pool.high_value_fraction(theta))},
            {"alive_count", s.pool.alive_count()},
            {"total_count", s.pool.total_count()},
            {"iteration", s.pool.iteration()},
            {"likes", s.counters.likes},
            {"dislikes", s.counters.dislikes},
            {"histogram", bins}});
      return 0;
    });
  }));

  server.Post("/sessions", guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    SelectorQuery query;
    query.k = engine_.read([](const EngineState& s) { return s.pool.config().subset_size; });
    if (body.contains("k")) {
      if (!body["k"].is_number_unsigned()) throw ValidationError("field 'k' must be a positive integer");
      query.k = body["k"].get<std::size_t>();
    }
    if (auto hint = string_field(body, "topic_hint", false); !hint.empty()) query.topic_hint = hint;
    // Only these fields are read; anything identifying the rater is dropped.
    const Session s = engine_.run_session(query, string_field(body, "user_input", false),
                                          string_field(body, "conversation_id", false));
    engine_.read([&](const EngineState& st) {
      send(res, 201, session_json(s, st.pool));
      return 0;
    });
  }));

  server.Get(R"(/sessions/(\d+))", guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_session_id(req);
    const auto s = engine_.session(id);
    if (!s) throw NotFoundError("unknown session " + to_string(id));
    engine_.read([&](const EngineState& st) {
      send(res, 200, session_json(*s, st.pool));
      return 0;
    });
  }));

  server.Post(R"(/sessions/(\d+)/feedback)",
              guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_session_id(req);
    const auto body = parse_body(req);
    if (!body.contains("rating")) throw ValidationError("missing field 'rating'");
    Rating rating;
    if (body["rating"].is_string()) {
      rating = parse_rating(body["rating"].get<std::string>());
    } else if (body["rating"].is_number()) {
      rating = Rating::score(body["rating"].get<double>());
    } else {
      throw ValidationError("field 'rating' must be 'like', 'dislike' or a number in [0, 1]");
    }
    if (!engine_.session(id)) throw NotFoundError("unknown session " + to_string(id));

    Session applied;
    try {
      applied = engine_.submit_feedback(id, rating);
    } catch (const AttributionError& e) {
      send(res, 202, {{"session_id", id.value},
                      {"status", "deferred"},
                      {"message", std::string("attribution failed, feedback kept for retry: ") + e.what()}});
      return;
    }
    engine_.read([&](const EngineState& st) {
      auto updated = json::array();
      for (auto fid : applied.selected) {
        const Fragment& f = st.pool.at(fid);
        updated.push_back({{"id", fid.value}, {"value", f.value}, {"alive", f.alive}});
      }
      auto out = session_json(applied, st.pool);
      out["fragments"] = std::move(updated);
      send(res, 200, out);
      return 0;
    });
  }));

  server.Get("/events", guarded(token, [this](const httplib::Request& req, httplib::Response& res) {
    const auto from = std::max<std::uint64_t>(1, query_uint(req, "from", 1));
    const auto limit = std::clamp<std::uint64_t>(query_uint(req, "limit", kMaxEventsPerPage), 1,
                                                 kMaxEventsPerPage);
    engine_.read_journal([&](const Journal& j) {
      const auto& log = j.events();
      auto items = json::array();
      for (std::uint64_t seq = from; seq <= log.size() && items.size() < limit; ++seq) {
        const Event& e = log[seq - 1];
        auto payload = e.payload;
        if (payload.is_object()) payload.erase("source");
        items.push_back({{"seq", e.seq},
                         {"kind", to_string(e.kind)},
                         {"batch", e.batch},
                         {"batch_size", e.batch_size},
                         {"ts", e.timestamp_ms},
                         {"payload", std::move(payload)}});
      }
      send(res, 200, {{"from", from}, {"next", j.next_seq()}, {"events", items}});
      return 0;
    });
  }));

  server.Get("/metrics", guarded(token, [this](const httplib::Request&, httplib::Response& res) {
    engine_.read([&](const EngineState& s) {
      const auto& c = s.counters;
      send(res, 200, {{"fragments_added", c.fragments_added},
                      {"fragments_extracted", c.fragments_extracted},
                      {"sessions_generated", c.sessions_generated},
                      {"feedback_applied", c.feedback_applied},
                      {"likes", c.likes},
                      {"dislikes", c.dislikes},
                      {"pruned", c.pruned},
                      {"backend_errors", c.backend_errors},
                      {"extraction_warnings", c.extraction_warnings},
                      {"alive_fragments", s.pool.alive_count()},
                      {"iteration", s.pool.iteration()}});
      return 0;
    });
  }));
}

}  // namespace coem

namespace coem {

ServiceRuntime::ServiceRuntime(ServiceConfig cfg)
    : cfg_(std::move(cfg)), journal_(Journal::open(cfg_.event_log, cfg_.pool)) {
  cfg_.validate();
  const auto templates =
      TemplateSet::load(cfg_.template_dir.empty() ? TemplateSet::default_dir() : cfg_.template_dir);

  if (cfg_.backend == "remote") {
    RemoteGenerator::Observer observer;
    if (!cfg_.backend_transcript.empty()) {
      transcript_.open(cfg_.backend_transcript, std::ios::app);
      if (!transcript_) throw StorageError("cannot open " + cfg_.backend_transcript.string());
      observer = [this](const BackendExchange& x) {
        std::lock_guard lock(transcript_mu_);
        transcript_ << nlohmann::json{{"direction", x.direction},
                                      {"attempt", x.attempt},
                                      {"status", x.status},
                                      {"body", x.body}}
                           .dump()
                    << '\n'
                    << std::flush;
      };
    }
    backend_ = std::make_unique<RemoteGenerator>(cfg_.remote, templates, std::move(observer));
  } else {
    backend_ = std::make_unique<MockGenerator>(cfg_.mock_seed);
  }

  switch (cfg_.attributor) {
    case AttributionStrategy::uniform:
      attributor_ = std::make_unique<UniformAttributor>();
      break;
    case AttributionStrategy::leave_one_out:
      output_scorer_ = std::make_unique<RegenerationScorer>(*backend_);
      attributor_ = std::make_unique<LeaveOneOutAttributor>(*output_scorer_);
      break;
    case AttributionStrategy::shapley:
      coalition_scorer_ = std::make_unique<TokenCoverageScorer>();
      attributor_ = std::make_unique<ShapleyAttributor>(*coalition_scorer_);
      break;
    case AttributionStrategy::external_judge:
      attributor_ = std::make_unique<ExternalJudgeAttributor>(*backend_,
                                                              templates.get("attribution_judge_v1"));
      break;
  }

  if (cfg_.extractor == "rule_based") {
    extractor_ = std::make_unique<RuleBasedExtractor>(Lexicon::load(cfg_.lexicon));
  } else if (cfg_.extractor == "judge") {
    extractor_ = std::make_unique<JudgeExtractor>(*backend_, templates.get("extraction_v1"));
  }

  engine_ = std::make_unique<SessionEngine>(journal_, *backend_, *attributor_, extractor_.get());
  service_ = std::make_unique<Service>(*engine_, cfg_);
  server_ = std::make_unique<httplib::Server>();
  service_->mount(*server_);
}

ServiceRuntime::~ServiceRuntime() { stop(); }

int ServiceRuntime::bind() {
  int port = cfg_.port;
  if (port == 0) {
    port = server_->bind_to_any_port(cfg_.host);
  } else if (!server_->bind_to_port(cfg_.host, port)) {
    port = -1;
  }
  if (port < 0) throw StorageError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  cfg_.port = port;
  return port;
}

void ServiceRuntime::serve() { server_->listen_after_bind(); }

void ServiceRuntime::stop() {
  if (server_) server_->stop();
}

}  // namespace coem
