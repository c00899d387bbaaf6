#include "coem/attribution.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <unordered_set>

#include <json.hpp>

#include "coem/backend.hpp"
#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

namespace {

double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

std::unordered_set<std::string> token_set(std::string_view s) {
  auto tokens = text::tokenize(s);
  return {std::make_move_iterator(tokens.begin()), std::make_move_iterator(tokens.end())};
}

}  // namespace

const char* to_string(AttributionStrategy s) {
  switch (s) {
    case AttributionStrategy::uniform: return "uniform";
    case AttributionStrategy::leave_one_out: return "leave_one_out";
    case AttributionStrategy::shapley: return "shapley";
    case AttributionStrategy::external_judge: return "external_judge";
  }
  return "unknown";
}

AttributionStrategy parse_attribution_strategy(std::string_view s) {
  if (s == "uniform") return AttributionStrategy::uniform;
  if (s == "leave_one_out") return AttributionStrategy::leave_one_out;
  if (s == "shapley") return AttributionStrategy::shapley;
  if (s == "external_judge") return AttributionStrategy::external_judge;
  throw ValidationError("unknown attribution strategy '" + std::string(s) + "'");
}

void AttributionRequest::validate() const {
  if (fragments.empty()) throw ValidationError("attribution request has no fragments");
  std::unordered_set<FragmentId> ids;
  for (const auto& f : fragments) {
    if (!ids.insert(f.id).second) {
      throw ValidationError("attribution request repeats fragment " + to_string(f.id));
    }
  }
}

AttributionResult attribute_uniform(const AttributionRequest& req) {
  req.validate();
  const double w = 1.0 / static_cast<double>(req.fragments.size());
  return {std::vector<double>(req.fragments.size(), w), AttributionStrategy::uniform};
}

AttributionResult attribute_leave_one_out(const AttributionRequest& req, OutputScorer& scorer) {
  req.validate();
  AttributionResult result{{}, AttributionStrategy::leave_one_out};
  if (req.fragments.size() == 1) {
    result.weights = {1.0};
    return result;
  }
  result.weights.reserve(req.fragments.size());
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    double sim = 0.0;
    try {
      sim = scorer.similarity_without(req, i);
    } catch (const AttributionError&) {
      throw;
    } catch (const std::exception& e) {
      throw AttributionError(std::string("scorer failed: ") + e.what(), i);
    }
    if (std::isnan(sim)) throw AttributionError("scorer returned NaN", i);
    result.weights.push_back(clip01(1.0 - sim));
  }
  return result;
}

std::vector<double> shapley_values(std::size_t players,
                                   const std::function<double(std::uint32_t)>& payoff) {
  if (players == 0) return {};
  if (players > kMaxShapleyPlayers) {
    throw ValidationError("exact Shapley supports at most " + std::to_string(kMaxShapleyPlayers) +
                          " fragments; use a sampling estimator for larger subsets");
  }
  const std::uint32_t full = (1u << players) - 1u;
  std::vector<double> table(std::size_t{full} + 1);
  for (std::uint32_t mask = 0; mask <= full; ++mask) table[mask] = payoff(mask);

  // weight[s] = s! (n - s - 1)! / n!
  std::vector<double> weight(players);
  for (std::size_t s = 0; s < players; ++s) {
    double w = 1.0 / static_cast<double>(players);
    // 1 / (n * C(n-1, s))
    double binom = 1.0;
    for (std::size_t j = 1; j <= s; ++j) {
      binom = binom * static_cast<double>(players - 1 - s + j) / static_cast<double>(j);
    }
    weight[s] = w / binom;
  }

  std::vector<double> phi(players, 0.0);
  for (std::size_t i = 0; i < players; ++i) {
    const std::uint32_t bit = 1u << i;
    for (std::uint32_t mask = 0; mask <= full; ++mask) {
      if (mask & bit) continue;
      phi[i] += weight[std::popcount(mask)] * (table[mask | bit] - table[mask]);
    }
  }
  return phi;
}

// Payoffs are measured relative to the empty coalition; Shapley values are
// invariant to that shift, so it only matters for the scorer's own range.
// Negative values (fragments that hurt the payoff) clip to 0.
AttributionResult attribute_shapley(const AttributionRequest& req, CoalitionScorer& scorer) {
  req.validate();
  const std::size_t n = req.fragments.size();
  if (n > kMaxShapleyPlayers) {
    throw ValidationError("exact Shapley supports at most " + std::to_string(kMaxShapleyPlayers) +
                          " fragments; use a sampling estimator for larger subsets");
  }
  const double empty = scorer.payoff(req, 0u);
  auto phi = shapley_values(n, [&](std::uint32_t mask) {
    return mask == 0 ? 0.0 : scorer.payoff(req, mask) - empty;
  });
  AttributionResult result{{}, AttributionStrategy::shapley};
  result.weights.reserve(n);
  for (double v : phi) result.weights.push_back(clip01(v));
  return result;
}

double RegenerationScorer::similarity_without(const AttributionRequest& req,
                                              std::size_t excluded) {
  const auto own = token_set(req.fragments.at(excluded).text);
  const auto full = token_set(req.output_text);

  std::vector<std::string> grounded;
  for (const auto& t : own) {
    if (full.contains(t)) grounded.push_back(t);
  }
  if (grounded.empty()) return 1.0;

  GenerationRequest regen;
  regen.instruction = instruction_;
  for (std::size_t j = 0; j < req.fragments.size(); ++j) {
    if (j != excluded) regen.fragments.push_back(req.fragments[j].text);
  }
  const auto without = token_set(generator_.generate(regen));
  std::size_t surviving = 0;
  for (const auto& t : grounded) {
    if (without.contains(t)) ++surviving;
  }
  return static_cast<double>(surviving) / static_cast<double>(grounded.size());
}

double TokenCoverageScorer::payoff(const AttributionRequest& req, std::uint32_t members) {
  const auto out_tokens = token_set(req.output_text);
  if (out_tokens.empty() || members == 0) return 0.0;
  std::unordered_set<std::string> covered;
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    if ((members >> i) & 1u) {
      for (auto& t : text::tokenize(req.fragments[i].text)) {
        if (out_tokens.contains(t)) covered.insert(std::move(t));
      }
    }
  }
  return static_cast<double>(covered.size()) / static_cast<double>(out_tokens.size());
}

std::string ExternalJudgeAttributor::render_prompt(const AttributionRequest& req) const {
  std::string listing;
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    listing += "[" + std::to_string(i + 1) + "] " + req.fragments[i].text + "\n";
  }
  return text::render(template_, {{"output", req.output_text},
                                  {"fragments", listing},
                                  {"count", std::to_string(req.fragments.size())}});
}

AttributionResult ExternalJudgeAttributor::attribute(const AttributionRequest& req) {
  req.validate();
  std::string reply;
  try {
    reply = backend_.complete(render_prompt(req));
  } catch (const std::exception& e) {
    throw AttributionError(std::string("judge backend failed: ") + e.what());
  }
  return {parse_judge_scores(reply, req.fragments.size()), AttributionStrategy::external_judge};
}

std::vector<double> parse_judge_scores(std::string_view reply, std::size_t expected) {
  const auto open = reply.find('[');
  const auto close = open == std::string_view::npos ? open : reply.find(']', open);
  if (close == std::string_view::npos) {
    throw AttributionError("judge reply contains no score list");
  }
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(reply.substr(open, close - open + 1));
  } catch (const nlohmann::json::exception&) {
    throw AttributionError("judge score list is not valid JSON");
  }
  if (parsed.size() != expected) {
    throw AttributionError("judge returned " + std::to_string(parsed.size()) + " scores for " +
                           std::to_string(expected) + " fragments");
  }
  std::vector<double> scores;
  scores.reserve(expected);
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    if (!parsed[i].is_number()) throw AttributionError("judge score is not a number", i);
    scores.push_back(clip01(parsed[i].get<double>()));
  }
  return scores;
}

double estimate_value(std::span<const SessionRecord> records, FragmentId fragment) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (const auto& rec : records) {
    if (rec.attribution.weights.size() != rec.fragment_ids.size()) {
      throw ValidationError("session record has mismatched weights and fragment ids");
    }
    for (std::size_t i = 0; i < rec.fragment_ids.size(); ++i) {
      if (rec.fragment_ids[i] == fragment) {
        sum += rec.attribution.weights[i] * rec.feedback_r;
        ++hits;
      }
    }
  }
  if (hits == 0) {
    throw NotFoundError("fragment " + to_string(fragment) + " appears in no session record");
  }
  return sum / static_cast<double>(hits);
}

}  // namespace coem
