#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "coem/attribution.hpp"
#include "coem/pool.hpp"

namespace coem {

struct SessionId {
  std::uint64_t value = 0;
  friend auto operator<=>(const SessionId&, const SessionId&) = default;
};

std::string to_string(SessionId id);

enum class SessionStatus { generated, rated, applied };

const char* to_string(SessionStatus s);

// One pass of the update loop: the selected subset, the generated output, the
// user's own input, and (once rated) the feedback and its attribution.
struct Session {
  SessionId id;
  std::string conversation_id;
  std::vector<FragmentId> selected;
  std::string output_text;
  std::string user_input;
  std::optional<double> feedback;
  std::optional<AttributionResult> attribution;
  SessionStatus status = SessionStatus::generated;
};

enum class EventKind {
  fragment_added,
  session_generated,
  feedback_applied,
  fragments_extracted,
  pruned,
  backend_error,
};

const char* to_string(EventKind k);
EventKind parse_event_kind(std::string_view s);  // ValidationError

// Line format: "<seq>\t{"kind":...,"batch":B,"batch_size":N,"ts":T,"payload":{...}}".
// A batch is the set of consecutive events starting at seq B; it is applied
// all-or-nothing.
struct Event {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::fragment_added;
  nlohmann::json payload = nlohmann::json::object();
  std::int64_t timestamp_ms = 0;
  std::uint64_t batch = 0;
  std::uint32_t batch_size = 1;
};

std::string encode_event(const Event& e);
Event decode_event(std::string_view line);  // ValidationError

struct Counters {
  std::uint64_t fragments_added = 0;
  std::uint64_t fragments_extracted = 0;
  std::uint64_t sessions_generated = 0;
  std::uint64_t feedback_applied = 0;
  std::uint64_t likes = 0;
  std::uint64_t dislikes = 0;
  std::uint64_t pruned = 0;
  std::uint64_t backend_errors = 0;
  std::uint64_t extraction_warnings = 0;
};

// Everything reconstructible from the event log.
struct EngineState {
  explicit EngineState(PoolConfig cfg = {}) : pool(cfg) {}

  KnowledgePool pool;
  std::map<SessionId, Session> sessions;
  std::uint64_t next_session_id = 1;
  Counters counters;
};

// Result of checking a batch against a state: the post-batch pool plus the
// session and counter changes still to be folded in.
struct BatchEffect {
  KnowledgePool pool;
  Counters counters;
  std::vector<Session> created;
  std::vector<std::pair<SessionId, std::pair<double, AttributionResult>>> rated;
  std::uint64_t next_session_id = 1;
};

// Throws ValidationError if any event is inconsistent with `state`.
BatchEffect prepare_batch(const EngineState& state, std::span<const Event> batch);
void commit_batch(EngineState& state, BatchEffect&& effect);

// Applies a batch all-or-nothing. Throws ValidationError (state untouched) if
// any event is inconsistent with the state, including a prune set that does
// not match what the pool would prune.
void apply_batch(EngineState& state, std::span<const Event> batch);

namespace events {

struct ExtractedFragment {
  FragmentId id;
  std::string text;
  double confidence = 0.0;
};

Event fragment_added(const Fragment& f);
Event session_generated(const Session& s);
Event feedback_applied(SessionId session, std::span<const FragmentId> ids,
                       const AttributionResult& attribution, double r);
Event fragments_extracted(SessionId session, std::span<const ExtractedFragment> added,
                          std::span<const std::string> warnings);
Event pruned(std::optional<SessionId> session, std::span<const FragmentId> ids);
Event backend_error(std::optional<SessionId> session, std::string_view kind,
                    std::string_view message);

}  // namespace events

inline constexpr const char* kExtractedSource = "extracted";

}  // namespace coem
