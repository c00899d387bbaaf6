#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace coem {

struct FragmentId {
  std::uint64_t value = 0;
  friend auto operator<=>(const FragmentId&, const FragmentId&) = default;
};

std::string to_string(FragmentId id);

struct Fragment {
  FragmentId id;
  std::string text;
  std::string source;
  double value = 1.0;
  std::uint64_t session_count = 0;
  std::uint64_t feedback_count = 0;
  std::uint64_t created_iteration = 0;
  bool alive = true;

  friend bool operator==(const Fragment&, const Fragment&) = default;
};

struct PoolConfig {
  double alpha = 0.03;
  double theta = 0.5;
  std::uint64_t min_sessions_before_prune = 5;
  std::uint64_t subset_size = 3;

  // Throws ValidationError.
  void validate() const;

  friend bool operator==(const PoolConfig&, const PoolConfig&) = default;
};

// Scored fragment collection. Values move by an exponential moving average of
// attributed feedback; new fragments start optimistic at 1. Bulk operations
// visit fragments in ascending id order.
//
// Not thread-safe; callers serialize mutation through a single writer.
class KnowledgePool {
 public:
  explicit KnowledgePool(PoolConfig config = {});

  const PoolConfig& config() const { return config_; }
  std::uint64_t iteration() const { return iteration_; }
  std::uint64_t next_id() const { return next_id_; }

  // Returns the id of the alive fragment with the same normalized text if
  // there is one, otherwise stores a new fragment at value 1.
  FragmentId add_fragment(std::string_view text, std::string_view source);

  // True when add_fragment(text) would return an existing alive fragment.
  bool contains_text(std::string_view text) const;

  // value_i <- (1 - alpha) value_i + alpha (weight_i r) for each subset member.
  // Validates everything before mutating anything. Increments iteration even
  // for an empty subset. Returns the updated values in subset order.
  std::vector<double> apply_feedback(std::span<const FragmentId> subset,
                                     std::span<const double> weights, double r);

  // Removes alive fragments with value < theta once they have taken part in at
  // least min_sessions_before_prune sessions.
  std::vector<FragmentId> prune();

  // Alive fragments with value >= theta over all fragments ever added.
  double high_value_fraction(double theta) const;

  const Fragment* find(FragmentId id) const;
  const Fragment& at(FragmentId id) const;  // NotFoundError
  const std::map<FragmentId, Fragment>& fragments() const { return fragments_; }
  std::vector<FragmentId> alive_ids() const;
  std::size_t alive_count() const { return alive_count_; }
  std::size_t total_count() const { return fragments_.size(); }
  bool empty() const { return fragments_.empty(); }

  // Line-delimited snapshot: one header record, then one record per fragment.
  void write_snapshot(std::ostream& out) const;
  std::string snapshot() const;
  static KnowledgePool read_snapshot(std::istream& in);

  friend bool operator==(const KnowledgePool& a, const KnowledgePool& b) {
    return a.config_ == b.config_ && a.iteration_ == b.iteration_ &&
           a.next_id_ == b.next_id_ && a.fragments_ == b.fragments_;
  }

 private:
  void index_alive(const Fragment& f);
  void unindex(const Fragment& f);

  PoolConfig config_;
  std::map<FragmentId, Fragment> fragments_;
  std::unordered_multimap<std::uint64_t, FragmentId> dedup_;  // fingerprint -> alive ids
  std::uint64_t iteration_ = 0;
  std::uint64_t next_id_ = 1;
  std::size_t alive_count_ = 0;
};

}  // namespace coem

template <>
struct std::hash<coem::FragmentId> {
  std::size_t operator()(const coem::FragmentId& id) const noexcept {
    return std::hash<std::uint64_t>{}(id.value);
  }
};
