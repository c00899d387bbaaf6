#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "coem/pool.hpp"

namespace coem {

class Generator;

enum class AttributionStrategy { uniform, leave_one_out, shapley, external_judge };

const char* to_string(AttributionStrategy s);
AttributionStrategy parse_attribution_strategy(std::string_view s);  // ValidationError

struct AttributedFragment {
  FragmentId id;
  std::string text;
};

struct AttributionRequest {
  std::string output_text;
  std::vector<AttributedFragment> fragments;

  // Non-empty, no duplicate ids. Throws ValidationError.
  void validate() const;
};

struct AttributionResult {
  std::vector<double> weights;  // aligned with request order, each in [0, 1]
  AttributionStrategy strategy = AttributionStrategy::uniform;
};

// Similarity in [0, 1] between the full output and the output produced
// without fragment `excluded`.
class OutputScorer {
 public:
  virtual ~OutputScorer() = default;
  virtual double similarity_without(const AttributionRequest& req, std::size_t excluded) = 0;
};

// Payoff in [0, 1] of the coalition encoded by bit i of `members`.
class CoalitionScorer {
 public:
  virtual ~CoalitionScorer() = default;
  virtual double payoff(const AttributionRequest& req, std::uint32_t members) = 0;
};

class FunctionCoalitionScorer final : public CoalitionScorer {
 public:
  explicit FunctionCoalitionScorer(std::function<double(std::uint32_t)> fn) : fn_(std::move(fn)) {}
  double payoff(const AttributionRequest&, std::uint32_t members) override { return fn_(members); }

 private:
  std::function<double(std::uint32_t)> fn_;
};

// Regenerates the output without one fragment and reports how much of that
// fragment's grounded content (its tokens present in the full output) is still
// there. A fragment whose tokens all vanish gets similarity 0, weight 1.
class RegenerationScorer final : public OutputScorer {
 public:
  explicit RegenerationScorer(Generator& generator, std::string instruction = "summary_v1")
      : generator_(generator), instruction_(std::move(instruction)) {}
  double similarity_without(const AttributionRequest& req, std::size_t excluded) override;

 private:
  Generator& generator_;
  std::string instruction_;
};

// v(S) = share of output tokens covered by the union of the members' tokens.
class TokenCoverageScorer final : public CoalitionScorer {
 public:
  double payoff(const AttributionRequest& req, std::uint32_t members) override;
};

inline constexpr std::size_t kMaxShapleyPlayers = 12;

AttributionResult attribute_uniform(const AttributionRequest& req);
AttributionResult attribute_leave_one_out(const AttributionRequest& req, OutputScorer& scorer);
AttributionResult attribute_shapley(const AttributionRequest& req, CoalitionScorer& scorer);

// Exact Shapley values over all 2^n coalitions, before any clipping.
// payoff(mask) is queried once per coalition.
std::vector<double> shapley_values(std::size_t players,
                                   const std::function<double(std::uint32_t)>& payoff);

class Attributor {
 public:
  virtual ~Attributor() = default;
  virtual AttributionResult attribute(const AttributionRequest& req) = 0;
  virtual AttributionStrategy strategy() const = 0;
};

class UniformAttributor final : public Attributor {
 public:
  AttributionResult attribute(const AttributionRequest& req) override {
    return attribute_uniform(req);
  }
  AttributionStrategy strategy() const override { return AttributionStrategy::uniform; }
};

class LeaveOneOutAttributor final : public Attributor {
 public:
  explicit LeaveOneOutAttributor(OutputScorer& scorer) : scorer_(scorer) {}
  AttributionResult attribute(const AttributionRequest& req) override {
    return attribute_leave_one_out(req, scorer_);
  }
  AttributionStrategy strategy() const override { return AttributionStrategy::leave_one_out; }

 private:
  OutputScorer& scorer_;
};

class ShapleyAttributor final : public Attributor {
 public:
  explicit ShapleyAttributor(CoalitionScorer& scorer) : scorer_(scorer) {}
  AttributionResult attribute(const AttributionRequest& req) override {
    return attribute_shapley(req, scorer_);
  }
  AttributionStrategy strategy() const override { return AttributionStrategy::shapley; }

 private:
  CoalitionScorer& scorer_;
};

// Asks a chat backend to score every fragment's contribution to the output.
// The prompt comes from a versioned template; the reply must contain a JSON
// list with one number per fragment. The user's rating is never shown to the
// judge.
class ExternalJudgeAttributor final : public Attributor {
 public:
  ExternalJudgeAttributor(Generator& backend, std::string prompt_template)
      : backend_(backend), template_(std::move(prompt_template)) {}
  AttributionResult attribute(const AttributionRequest& req) override;
  AttributionStrategy strategy() const override { return AttributionStrategy::external_judge; }

  std::string render_prompt(const AttributionRequest& req) const;

 private:
  Generator& backend_;
  std::string template_;
};

// Parses the first JSON array of numbers in `reply`. Throws AttributionError.
std::vector<double> parse_judge_scores(std::string_view reply, std::size_t expected);

struct SessionRecord {
  AttributionResult attribution;
  double feedback_r = 0.0;
  std::vector<FragmentId> fragment_ids;
};

// Empirical mean of weight * r over the records that mention `fragment`.
double estimate_value(std::span<const SessionRecord> records, FragmentId fragment);

}  // namespace coem
