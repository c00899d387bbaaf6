#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "coem/attribution.hpp"
#include "coem/backend.hpp"
#include "coem/events.hpp"
#include "coem/extraction.hpp"
#include "coem/journal.hpp"

namespace coem {

struct SelectorQuery {
  std::optional<std::string> topic_hint;
  std::size_t k = 3;
};

// Ranks alive fragments by (distinct tokens shared with the hint, value,
// ascending id) and returns the first k. Throws EmptyPoolError.
std::vector<FragmentId> select_subset(const KnowledgePool& pool, const SelectorQuery& query);

struct Rating {
  enum class Kind { like, dislike, scalar };
  Kind kind = Kind::like;
  double scalar = 0.0;

  static Rating like() { return {Kind::like, 0.0}; }
  static Rating dislike() { return {Kind::dislike, 0.0}; }
  static Rating score(double s) { return {Kind::scalar, s}; }
};

// "like", "dislike", or a decimal in [0, 1]. Throws ValidationError.
Rating parse_rating(std::string_view s);

// Affine map for scalar ratings in [0, 1]; the default sends 0 -> -1, 1 -> 1.
struct RatingMap {
  double scale = 2.0;
  double offset = -1.0;
};

// like -> 1, dislike -> -1, scalar s -> scale * s + offset. Throws
// ValidationError for scalars outside [0, 1] or results outside [-1, 1].
double map_rating(const Rating& rating, const RatingMap& map = {});

// Boundaries inside submit_feedback where a crash can be simulated.
enum class FaultPoint { after_attribution, after_update, after_extract, after_prune, after_persist };

const char* to_string(FaultPoint p);

struct EngineOptions {
  std::string instruction = "summary_v1";
  std::size_t max_length = 4000;
  RatingMap rating_map;
};

// Runs the update loop against a journal:
//   run_session:     select -> generate (logged as session_generated)
//   submit_feedback: attribute -> EMA update -> extract -> prune, committed as
//                    one event batch.
// Generation, attribution and extraction run without holding the writer lock;
// the commit is serialized.
class SessionEngine {
 public:
  SessionEngine(Journal& journal, Generator& backend, Attributor& attributor,
                Extractor* extractor = nullptr, EngineOptions options = {});

  // Logs fragment_added unless the text duplicates an alive fragment.
  FragmentId add_fragment(std::string_view text, std::string_view source);

  // Throws EmptyPoolError, BackendError (after logging backend_error).
  Session run_session(const SelectorQuery& query, std::string user_input = {},
                      std::string conversation_id = {});

  // Throws NotFoundError, ConflictError (already applied), ValidationError,
  // AttributionError (feedback kept; see retry_feedback).
  Session submit_feedback(SessionId id, const Rating& rating);
  Session retry_feedback(SessionId id);

  std::optional<Session> session(SessionId id) const;

  // Runs f(const EngineState&) under a shared lock.
  template <class F>
  auto read(F&& f) const {
    std::shared_lock lock(mu_);
    return f(journal_.state());
  }

  // Runs f(const Journal&) under a shared lock.
  template <class F>
  auto read_journal(F&& f) const {
    std::shared_lock lock(mu_);
    return f(journal_);
  }

  void set_fault_hook(std::function<void(FaultPoint)> hook);

 private:
  Session apply_feedback_value(SessionId id, double r);
  void fault(FaultPoint p) {
    if (fault_hook_) fault_hook_(p);
  }

  Journal& journal_;
  Generator& backend_;
  Attributor& attributor_;
  Extractor* extractor_;
  EngineOptions options_;
  std::function<void(FaultPoint)> fault_hook_;

  mutable std::shared_mutex mu_;  // guards journal_
  mutable std::mutex pending_mu_;
  struct Pending {
    double r = 0.0;
    std::optional<AttributionResult> attribution;
  };
  std::map<SessionId, Pending> pending_;
};

}  // namespace coem
