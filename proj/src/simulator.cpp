#include "coem/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <future>

#include "coem/backend.hpp"
#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem::sim {

namespace {

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ValidationError(std::string(name) + " must lie in [0, 1], got " + text::format_double(v));
  }
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

std::string pseudo_word(std::mt19937_64& rng) {
  static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
  std::string w = "w";
  for (int i = 0; i < 6; ++i) w.push_back(kAlphabet[uniform_index(rng, 36)]);
  return w;
}

}  // namespace

void Mixture::validate() const {
  require_unit(high_fraction, "high_fraction");
  require_unit(high_min, "high_min");
  require_unit(high_max, "high_max");
  require_unit(low_min, "low_min");
  require_unit(low_max, "low_max");
  if (high_min > high_max || low_min > low_max) {
    throw ValidationError("mixture ranges must have min <= max");
  }
}

void RaterModel::validate() const {
  if (!(noise >= 0.0 && noise < 0.5)) {
    throw ValidationError("rater noise must lie in [0, 0.5), got " + text::format_double(noise));
  }
  if (!std::isfinite(like_bias)) throw ValidationError("like_bias must be finite");
}

void SimulationConfig::validate() const {
  if (n_fragments == 0) throw ValidationError("fragments must be positive");
  pool.validate();
  rater.validate();
  mixture.validate();
  require_unit(high_threshold, "high_threshold");
  if (attributor == AttributionStrategy::external_judge) {
    throw ValidationError("the simulator runs on the mock backend; external_judge needs a live model");
  }
}

std::size_t histogram_bin(double value) {
  const double scaled = (std::clamp(value, -1.0, 1.0) + 1.0) * (kHistogramBins / 2.0);
  const double idx = std::ceil(scaled - 1e-9) - 1.0;
  return static_cast<std::size_t>(std::clamp(idx, 0.0, double(kHistogramBins - 1)));
}

double histogram_bin_low(std::size_t bin) {
  return -1.0 + 2.0 * static_cast<double>(bin) / kHistogramBins;
}

double histogram_bin_high(std::size_t bin) {
  return -1.0 + 2.0 * static_cast<double>(bin + 1) / kHistogramBins;
}

bool operator==(const AlphaResult& a, const AlphaResult& b) {
  return a.alpha == b.alpha && a.retained_fraction == b.retained_fraction &&
         a.precision_vs_oracle == b.precision_vs_oracle &&
         a.recall_vs_oracle == b.recall_vs_oracle && a.likes == b.likes &&
         a.dislikes == b.dislikes;
}

bool operator==(const SimulationReport& a, const SimulationReport& b) {
  return report_to_json(a) == report_to_json(b);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::string synthetic_fragment_text(std::size_t i, std::mt19937_64& rng) {
  std::string w1 = pseudo_word(rng);
  std::string w2 = pseudo_word(rng);
  return "topic" + std::to_string(i) + " " + w1 + " " + w2;
}

SyntheticDomain build_domain(const SimulationConfig& cfg, std::mt19937_64& rng) {
  const auto& m = cfg.mixture;
  const auto n_high = static_cast<std::size_t>(
      std::llround(m.high_fraction * static_cast<double>(cfg.n_fragments)));
  SyntheticDomain domain;
  domain.high_threshold = cfg.high_threshold;
  domain.true_values.reserve(cfg.n_fragments);
  for (std::size_t i = 0; i < cfg.n_fragments; ++i) {
    const bool high = i < n_high;
    const double lo = high ? m.high_min : m.low_min;
    const double hi = high ? m.high_max : m.low_max;
    domain.true_values.push_back(lo + (hi - lo) * uniform01(rng));
  }
  // Fisher-Yates so high fragments are not clustered by id.
  for (std::size_t i = cfg.n_fragments; i > 1; --i) {
    std::swap(domain.true_values[i - 1], domain.true_values[uniform_index(rng, i)]);
  }
  return domain;
}

Rating simulate_rating(std::span<const double> selected, const RaterModel& rater,
                       std::mt19937_64& rng) {
  if (selected.empty()) throw ValidationError("simulate_rating needs at least one true value");
  double mean = 0.0;
  for (double v : selected) mean += v;
  mean /= static_cast<double>(selected.size());
  const double p_like = std::clamp(mean + rater.like_bias, 0.0, 1.0);
  bool like = uniform01(rng) < p_like;
  if (uniform01(rng) < rater.noise) like = !like;
  return like ? Rating::like() : Rating::dislike();
}

void score_pool(SimulationReport& report, const KnowledgePool& pool, const SyntheticDomain& domain) {
  const double theta = pool.config().theta;
  Confusion c;
  Histogram hist{};
  std::uint64_t unrated = 0;
  for (const auto& [id, f] : pool.fragments()) {
    const std::size_t idx = id.value - 1;
    const bool retained = f.alive && f.value >= theta;
    if (f.alive) ++hist[histogram_bin(f.value)];
    if (f.feedback_count == 0) ++unrated;
    if (idx >= domain.true_values.size()) continue;  // not part of the synthetic corpus
    const bool high = domain.truly_high(idx);
    if (retained && high) ++c.true_positive;
    if (retained && !high) ++c.false_positive;
    if (!retained && high) ++c.false_negative;
    if (!retained && !high) ++c.true_negative;
  }
  auto ratio = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  report.confusion = c;
  report.value_histogram = hist;
  report.unrated_count = unrated;
  report.alive_count = pool.alive_count();
  report.total_count = pool.total_count();
  report.retained_fraction = pool.empty() ? 1.0 : pool.high_value_fraction(theta);
  report.precision_vs_oracle = ratio(c.true_positive, c.true_positive + c.false_positive);
  report.recall_vs_oracle = ratio(c.true_positive, c.true_positive + c.false_negative);
  report.agreement = report.precision_vs_oracle;
  report.oracle_high_fraction =
      ratio(c.true_positive + c.false_negative,
            c.true_positive + c.false_negative + c.false_positive + c.true_negative);
}

SimulationOutcome simulate(const SimulationConfig& cfg,
                           const std::optional<std::filesystem::path>& event_log) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);

  if (event_log) std::filesystem::remove(*event_log);
  SimulationOutcome out{{}, build_domain(cfg, rng),
                        event_log ? Journal::open(*event_log, cfg.pool) : Journal(cfg.pool)};
  out.journal.set_clock([] { return std::int64_t{0}; });

  MockGenerator backend(cfg.seed);
  RegenerationScorer regen(backend);
  TokenCoverageScorer coverage;
  UniformAttributor uniform;
  LeaveOneOutAttributor loo(regen);
  ShapleyAttributor shapley(coverage);
  Attributor* attributor = &uniform;
  if (cfg.attributor == AttributionStrategy::leave_one_out) attributor = &loo;
  if (cfg.attributor == AttributionStrategy::shapley) attributor = &shapley;

  // Simulated raters contribute no free text, so there is nothing to extract.
  SessionEngine engine(out.journal, backend, *attributor, nullptr);

  for (std::size_t i = 0; i < cfg.n_fragments; ++i) {
    engine.add_fragment(synthetic_fragment_text(i, rng), "synthetic");
  }

  std::size_t sessions_run = 0;
  std::vector<double> selected_values;
  for (std::size_t s = 0; s < cfg.n_sessions; ++s) {
    auto alive = out.journal.state().pool.alive_ids();
    if (alive.empty()) break;
    const std::size_t k = std::min<std::size_t>(cfg.pool.subset_size, alive.size());
    std::string hint;
    for (std::size_t j = 0; j < k; ++j) {
      std::swap(alive[j], alive[j + uniform_index(rng, alive.size() - j)]);
      hint += "topic" + std::to_string(alive[j].value - 1) + " ";
    }

    const Session session = engine.run_session(SelectorQuery{hint, k});
    selected_values.clear();
    for (auto id : session.selected) selected_values.push_back(out.domain.true_values.at(id.value - 1));
    engine.submit_feedback(session.id, simulate_rating(selected_values, cfg.rater, rng));
    ++sessions_run;
  }

  auto& report = out.report;
  report.config = cfg;
  report.sessions_run = sessions_run;
  report.likes = out.journal.state().counters.likes;
  report.dislikes = out.journal.state().counters.dislikes;
  score_pool(report, out.journal.state().pool, out.domain);
  return out;
}

SimulationReport run_simulation(const SimulationConfig& cfg) { return simulate(cfg).report; }

SimulationReport sweep_alpha(const SimulationConfig& cfg, std::span<const double> alphas) {
  if (alphas.empty()) throw ValidationError("sweep needs at least one alpha");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0 && alphas[i] < 1.0)) {
      throw ValidationError("sweep alpha " + text::format_double(alphas[i]) + " outside (0, 1)");
    }
    if (i > 0 && !(alphas[i] > alphas[i - 1])) {
      throw ValidationError("sweep alphas must be strictly ascending");
    }
  }
  cfg.validate();

  std::vector<std::future<SimulationReport>> runs;
  for (double alpha : alphas) {
    SimulationConfig c = cfg;
    c.pool.alpha = alpha;
    runs.push_back(std::async(std::launch::async, [c] { return run_simulation(c); }));
  }
  std::vector<SimulationReport> reports;
  for (auto& r : runs) reports.push_back(r.get());

  SimulationReport out = reports.front();
  for (const auto& r : reports) {
    out.per_alpha_results.push_back({r.config.pool.alpha, r.retained_fraction,
                                     r.precision_vs_oracle, r.recall_vs_oracle, r.likes,
                                     r.dislikes});
  }
  return out;
}

}  // namespace coem::sim
