#include "coem/events.hpp"

#include <charconv>

#include "coem/errors.hpp"

namespace coem {

namespace {

nlohmann::json ids_json(std::span<const FragmentId> ids) {
  auto arr = nlohmann::json::array();
  for (auto id : ids) arr.push_back(id.value);
  return arr;
}

std::vector<FragmentId> ids_from(const nlohmann::json& arr) {
  std::vector<FragmentId> out;
  out.reserve(arr.size());
  for (const auto& v : arr) out.push_back(FragmentId{v.get<std::uint64_t>()});
  return out;
}

Event make(EventKind kind, nlohmann::json payload) {
  Event e;
  e.kind = kind;
  e.payload = std::move(payload);
  return e;
}

void expect_id(FragmentId got, std::uint64_t want, const char* what) {
  if (got.value != want) {
    throw ValidationError(std::string(what) + " assigned id " + to_string(got) +
                          " but the log recorded " + std::to_string(want));
  }
}

}  // namespace

std::string to_string(SessionId id) { return std::to_string(id.value); }

const char* to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::generated: return "generated";
    case SessionStatus::rated: return "rated";
    case SessionStatus::applied: return "applied";
  }
  return "unknown";
}

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::fragment_added: return "fragment_added";
    case EventKind::session_generated: return "session_generated";
    case EventKind::feedback_applied: return "feedback_applied";
    case EventKind::fragments_extracted: return "fragments_extracted";
    case EventKind::pruned: return "pruned";
    case EventKind::backend_error: return "backend_error";
  }
  return "unknown";
}

EventKind parse_event_kind(std::string_view s) {
  for (auto k : {EventKind::fragment_added, EventKind::session_generated,
                 EventKind::feedback_applied, EventKind::fragments_extracted, EventKind::pruned,
                 EventKind::backend_error}) {
    if (s == to_string(k)) return k;
  }
  throw ValidationError("unknown event kind '" + std::string(s) + "'");
}

std::string encode_event(const Event& e) {
  nlohmann::json j = {{"kind", to_string(e.kind)},
                      {"batch", e.batch},
                      {"batch_size", e.batch_size},
                      {"ts", e.timestamp_ms},
                      {"payload", e.payload}};
  return std::to_string(e.seq) + "\t" + j.dump();
}

Event decode_event(std::string_view line) {
  const auto tab = line.find('\t');
  if (tab == std::string_view::npos) throw ValidationError("missing seq prefix");
  Event e;
  const auto [ptr, ec] = std::from_chars(line.data(), line.data() + tab, e.seq);
  if (ec != std::errc{} || ptr != line.data() + tab || e.seq == 0) {
    throw ValidationError("bad seq prefix");
  }
  const auto j = nlohmann::json::parse(line.substr(tab + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError("event body is not a JSON object");
  try {
    e.kind = parse_event_kind(j.at("kind").get<std::string>());
    e.batch = j.at("batch").get<std::uint64_t>();
    e.batch_size = j.at("batch_size").get<std::uint32_t>();
    e.timestamp_ms = j.at("ts").get<std::int64_t>();
    e.payload = j.at("payload");
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("event fields: ") + ex.what());
  }
  if (e.batch_size == 0 || e.batch > e.seq || e.seq - e.batch >= e.batch_size) {
    throw ValidationError("event batch fields inconsistent with seq");
  }
  return e;
}

BatchEffect prepare_batch(const EngineState& state, std::span<const Event> batch) {
  BatchEffect fx{state.pool, state.counters, {}, {}, state.next_session_id};
  auto& pool = fx.pool;
  auto& counters = fx.counters;
  auto& created = fx.created;
  auto& rated = fx.rated;
  auto& next_session = fx.next_session_id;

  auto session_known = [&](SessionId id) {
    if (state.sessions.contains(id)) return true;
    for (const auto& s : created) {
      if (s.id == id) return true;
    }
    return false;
  };

  try {
    for (const auto& e : batch) {
      const auto& p = e.payload;
      switch (e.kind) {
        case EventKind::fragment_added: {
          const auto before = pool.next_id();
          const auto id = pool.add_fragment(p.at("text").get<std::string>(),
                                            p.at("source").get<std::string>());
          if (pool.next_id() == before) throw ValidationError("fragment_added duplicates an alive fragment");
          expect_id(id, p.at("id").get<std::uint64_t>(), "fragment_added");
          ++counters.fragments_added;
          break;
        }
        case EventKind::session_generated: {
          Session s;
          s.id = SessionId{p.at("session_id").get<std::uint64_t>()};
          if (s.id.value < next_session || session_known(s.id)) {
            throw ValidationError("session " + to_string(s.id) + " generated twice");
          }
          s.conversation_id = p.value("conversation_id", "");
          s.selected = ids_from(p.at("selected"));
          s.output_text = p.at("output").get<std::string>();
          s.user_input = p.value("user_input", "");
          next_session = s.id.value + 1;
          created.push_back(std::move(s));
          ++counters.sessions_generated;
          break;
        }
        case EventKind::feedback_applied: {
          const SessionId sid{p.at("session_id").get<std::uint64_t>()};
          if (!session_known(sid)) throw ValidationError("feedback for unknown session " + to_string(sid));
          auto it = state.sessions.find(sid);
          if (it != state.sessions.end() && it->second.status == SessionStatus::applied) {
            throw ValidationError("feedback applied twice to session " + to_string(sid));
          }
          for (const auto& [prev, unused] : rated) {
            if (prev == sid) throw ValidationError("feedback applied twice to session " + to_string(sid));
          }
          const auto ids = ids_from(p.at("fragment_ids"));
          const auto weights = p.at("weights").get<std::vector<double>>();
          const double r = p.at("r").get<double>();
          pool.apply_feedback(ids, weights, r);
          AttributionResult attribution{weights,
                                        parse_attribution_strategy(p.at("strategy").get<std::string>())};
          rated.push_back({sid, {r, std::move(attribution)}});
          ++counters.feedback_applied;
          if (r > 0) ++counters.likes;
          if (r < 0) ++counters.dislikes;
          break;
        }
        case EventKind::fragments_extracted: {
          for (const auto& f : p.at("fragments")) {
            const auto before = pool.next_id();
            const auto id = pool.add_fragment(f.at("text").get<std::string>(), kExtractedSource);
            if (pool.next_id() == before) throw ValidationError("extracted fragment duplicates an alive fragment");
            expect_id(id, f.at("id").get<std::uint64_t>(), "fragments_extracted");
            ++counters.fragments_extracted;
          }
          counters.extraction_warnings += p.value("warnings", nlohmann::json::array()).size();
          break;
        }
        case EventKind::pruned: {
          const auto want = ids_from(p.at("ids"));
          const auto got = pool.prune();
          if (got != want) throw ValidationError("pruned set differs from the recorded one");
          counters.pruned += got.size();
          break;
        }
        case EventKind::backend_error:
          ++counters.backend_errors;
          break;
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("event payload: ") + ex.what());
  } catch (const NotFoundError& ex) {
    throw ValidationError(ex.what());
  }

  return fx;
}

void commit_batch(EngineState& state, BatchEffect&& fx) {
  state.pool = std::move(fx.pool);
  state.counters = fx.counters;
  state.next_session_id = fx.next_session_id;
  for (auto& s : fx.created) {
    const SessionId id = s.id;
    state.sessions.emplace(id, std::move(s));
  }
  for (auto& [sid, fb] : fx.rated) {
    Session& s = state.sessions.at(sid);
    s.feedback = fb.first;
    s.attribution = std::move(fb.second);
    s.status = SessionStatus::applied;
  }
}

void apply_batch(EngineState& state, std::span<const Event> batch) {
  if (batch.empty()) return;
  commit_batch(state, prepare_batch(state, batch));
}

namespace events {

Event fragment_added(const Fragment& f) {
  return make(EventKind::fragment_added, {{"id", f.id.value},
                                          {"text", f.text},
                                          {"source", f.source},
                                          {"created_iteration", f.created_iteration}});
}

Event session_generated(const Session& s) {
  return make(EventKind::session_generated, {{"session_id", s.id.value},
                                             {"conversation_id", s.conversation_id},
                                             {"selected", ids_json(s.selected)},
                                             {"output", s.output_text},
                                             {"user_input", s.user_input}});
}

Event feedback_applied(SessionId session, std::span<const FragmentId> ids,
                       const AttributionResult& attribution, double r) {
  return make(EventKind::feedback_applied, {{"session_id", session.value},
                                            {"fragment_ids", ids_json(ids)},
                                            {"weights", attribution.weights},
                                            {"strategy", to_string(attribution.strategy)},
                                            {"r", r}});
}

Event fragments_extracted(SessionId session, std::span<const ExtractedFragment> added,
                          std::span<const std::string> warnings) {
  auto arr = nlohmann::json::array();
  for (const auto& f : added) {
    arr.push_back({{"id", f.id.value}, {"text", f.text}, {"confidence", f.confidence}});
  }
  return make(EventKind::fragments_extracted,
              {{"session_id", session.value},
               {"fragments", std::move(arr)},
               {"warnings", std::vector<std::string>(warnings.begin(), warnings.end())}});
}

Event pruned(std::optional<SessionId> session, std::span<const FragmentId> ids) {
  nlohmann::json p = {{"ids", ids_json(ids)}};
  if (session) p["session_id"] = session->value;
  return make(EventKind::pruned, std::move(p));
}

Event backend_error(std::optional<SessionId> session, std::string_view kind,
                    std::string_view message) {
  nlohmann::json p = {{"kind", kind}, {"message", message}};
  if (session) p["session_id"] = session->value;
  return make(EventKind::backend_error, std::move(p));
}

}  // namespace events
}  // namespace coem
