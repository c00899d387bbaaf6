#include "coem/engine.hpp"

#include <algorithm>
#include <charconv>
#include <unordered_set>

#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

std::vector<FragmentId> select_subset(const KnowledgePool& pool, const SelectorQuery& query) {
  if (query.k == 0) throw ValidationError("selection size k must be positive");
  if (pool.alive_count() == 0) throw EmptyPoolError("knowledge pool has no alive fragments");

  std::unordered_set<std::string> hint;
  if (query.topic_hint) {
    for (auto& t : text::tokenize(*query.topic_hint)) hint.insert(std::move(t));
  }

  struct Ranked {
    std::size_t overlap;
    double value;
    FragmentId id;
  };
  std::vector<Ranked> ranked;
  ranked.reserve(pool.alive_count());
  for (const auto& [id, f] : pool.fragments()) {
    if (!f.alive) continue;
    std::size_t overlap = 0;
    if (!hint.empty()) {
      std::unordered_set<std::string> seen;
      for (auto& t : text::tokenize(f.text)) {
        if (hint.contains(t) && seen.insert(t).second) ++overlap;
      }
    }
    ranked.push_back({overlap, f.value, id});
  }
  const std::size_t k = std::min(query.k, ranked.size());
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                    [](const Ranked& a, const Ranked& b) {
                      if (a.overlap != b.overlap) return a.overlap > b.overlap;
                      if (a.value != b.value) return a.value > b.value;
                      return a.id < b.id;
                    });
  std::vector<FragmentId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].id);
  return out;
}

Rating parse_rating(std::string_view s) {
  if (s == "like") return Rating::like();
  if (s == "dislike") return Rating::dislike();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ValidationError("rating must be 'like', 'dislike' or a number in [0, 1]");
  }
  return Rating::score(v);
}

double map_rating(const Rating& rating, const RatingMap& map) {
  switch (rating.kind) {
    case Rating::Kind::like: return 1.0;
    case Rating::Kind::dislike: return -1.0;
    case Rating::Kind::scalar: break;
  }
  if (!(rating.scalar >= 0.0 && rating.scalar <= 1.0)) {
    throw ValidationError("scalar rating must lie in [0, 1], got " +
                          text::format_double(rating.scalar));
  }
  const double r = map.scale * rating.scalar + map.offset;
  if (!(r >= -1.0 && r <= 1.0)) {
    throw ValidationError("rating map sends " + text::format_double(rating.scalar) +
                          " outside [-1, 1]");
  }
  return r;
}

const char* to_string(FaultPoint p) {
  switch (p) {
    case FaultPoint::after_attribution: return "after_attribution";
    case FaultPoint::after_update: return "after_update";
    case FaultPoint::after_extract: return "after_extract";
    case FaultPoint::after_prune: return "after_prune";
    case FaultPoint::after_persist: return "after_persist";
  }
  return "unknown";
}

SessionEngine::SessionEngine(Journal& journal, Generator& backend, Attributor& attributor,
                             Extractor* extractor, EngineOptions options)
    : journal_(journal),
      backend_(backend),
      attributor_(attributor),
      extractor_(extractor),
      options_(std::move(options)) {}

void SessionEngine::set_fault_hook(std::function<void(FaultPoint)> hook) {
  std::unique_lock lock(mu_);
  fault_hook_ = std::move(hook);
  if (fault_hook_) {
    journal_.set_after_persist_hook([this] { fault(FaultPoint::after_persist); });
  } else {
    journal_.set_after_persist_hook({});
  }
}

FragmentId SessionEngine::add_fragment(std::string_view raw, std::string_view source) {
  std::unique_lock lock(mu_);
  KnowledgePool staged = journal_.state().pool;
  const auto before = staged.next_id();
  const FragmentId id = staged.add_fragment(raw, source);
  if (staged.next_id() == before) return id;
  journal_.commit({events::fragment_added(staged.at(id))});
  return id;
}

Session SessionEngine::run_session(const SelectorQuery& query, std::string user_input,
                                   std::string conversation_id) {
  GenerationRequest req;
  req.instruction = options_.instruction;
  req.max_length = options_.max_length;
  std::vector<FragmentId> selected;
  {
    std::shared_lock lock(mu_);
    const auto& pool = journal_.state().pool;
    selected = select_subset(pool, query);
    for (auto id : selected) req.fragments.push_back(pool.at(id).text);
  }

  std::string output;
  try {
    output = backend_.generate(req);
  } catch (const std::exception& e) {
    const auto* be = dynamic_cast<const BackendError*>(&e);
    const std::string kind = be ? to_string(be->kind()) : "unavailable";
    {
      std::unique_lock lock(mu_);
      journal_.commit({events::backend_error(std::nullopt, kind, e.what())});
    }
    if (be) throw;
    throw BackendError(BackendErrorKind::unavailable, e.what());
  }

  std::unique_lock lock(mu_);
  Session s;
  s.id = SessionId{journal_.state().next_session_id};
  s.conversation_id = std::move(conversation_id);
  s.selected = std::move(selected);
  s.output_text = std::move(output);
  s.user_input = std::move(user_input);
  journal_.commit({events::session_generated(s)});
  return s;
}

std::optional<Session> SessionEngine::session(SessionId id) const {
  std::optional<Session> out;
  {
    std::shared_lock lock(mu_);
    const auto& sessions = journal_.state().sessions;
    auto it = sessions.find(id);
    if (it == sessions.end()) return std::nullopt;
    out = it->second;
  }
  if (out->status != SessionStatus::applied) {
    std::lock_guard lock(pending_mu_);
    if (auto it = pending_.find(id); it != pending_.end()) {
      out->feedback = it->second.r;
      if (it->second.attribution) {
        out->attribution = it->second.attribution;
        out->status = SessionStatus::rated;
      }
    }
  }
  return out;
}

Session SessionEngine::submit_feedback(SessionId id, const Rating& rating) {
  const double r = map_rating(rating, options_.rating_map);
  return apply_feedback_value(id, r);
}

Session SessionEngine::retry_feedback(SessionId id) {
  double r = 0.0;
  {
    std::lock_guard lock(pending_mu_);
    auto it = pending_.find(id);
    if (it == pending_.end()) throw NotFoundError("no deferred feedback for session " + to_string(id));
    r = it->second.r;
  }
  return apply_feedback_value(id, r);
}

Session SessionEngine::apply_feedback_value(SessionId id, double r) {
  AttributionRequest req;
  std::string user_input;
  {
    std::shared_lock lock(mu_);
    const auto& state = journal_.state();
    auto it = state.sessions.find(id);
    if (it == state.sessions.end()) throw NotFoundError("unknown session " + to_string(id));
    if (it->second.status == SessionStatus::applied) {
      throw ConflictError("feedback already applied to session " + to_string(id));
    }
    req.output_text = it->second.output_text;
    for (auto fid : it->second.selected) {
      const Fragment& f = state.pool.at(fid);
      if (f.alive) req.fragments.push_back({fid, f.text});
    }
    user_input = it->second.user_input;
  }
  {
    std::lock_guard lock(pending_mu_);
    pending_[id].r = r;
  }

  // Fragments pruned since generation no longer take feedback.
  AttributionResult attribution{{}, attributor_.strategy()};
  if (!req.fragments.empty()) attribution = attributor_.attribute(req);
  if (attribution.weights.size() != req.fragments.size()) {
    throw AttributionError("attributor returned " + std::to_string(attribution.weights.size()) +
                           " weights for " + std::to_string(req.fragments.size()) + " fragments");
  }
  {
    std::lock_guard lock(pending_mu_);
    pending_[id].attribution = attribution;
  }
  fault(FaultPoint::after_attribution);

  ExtractionResult extracted;
  if (extractor_ != nullptr && !text::trim(user_input).empty()) {
    extracted = extractor_->extract(user_input);
  }

  std::unique_lock lock(mu_);
  const auto& state = journal_.state();
  if (state.sessions.at(id).status == SessionStatus::applied) {
    throw ConflictError("feedback already applied to session " + to_string(id));
  }

  std::vector<FragmentId> ids;
  std::vector<double> weights;
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    if (state.pool.at(req.fragments[i].id).alive) {
      ids.push_back(req.fragments[i].id);
      weights.push_back(attribution.weights[i]);
    }
  }
  AttributionResult applied{weights, attribution.strategy};

  KnowledgePool staged = state.pool;
  staged.apply_feedback(ids, weights, r);
  fault(FaultPoint::after_update);

  std::vector<events::ExtractedFragment> added;
  for (const auto& c : extracted.candidates) {
    if (text::trim(c.text).empty() || staged.contains_text(c.text)) continue;
    const FragmentId fid = staged.add_fragment(c.text, kExtractedSource);
    added.push_back({fid, staged.at(fid).text, c.confidence});
  }
  fault(FaultPoint::after_extract);

  const auto removed = staged.prune();
  fault(FaultPoint::after_prune);

  std::vector<Event> batch;
  batch.push_back(events::feedback_applied(id, ids, applied, r));
  if (!added.empty() || !extracted.warnings.empty()) {
    batch.push_back(events::fragments_extracted(id, added, extracted.warnings));
  }
  if (!removed.empty()) batch.push_back(events::pruned(id, removed));
  journal_.commit(std::move(batch));

  {
    std::lock_guard plock(pending_mu_);
    pending_.erase(id);
  }
  return journal_.state().sessions.at(id);
}

}  // namespace coem
