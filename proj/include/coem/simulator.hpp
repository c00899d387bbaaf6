#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coem/attribution.hpp"
#include "coem/engine.hpp"
#include "coem/journal.hpp"
#include "coem/pool.hpp"

namespace coem::sim {

// Two-component mixture of latent fragment values.
struct Mixture {
  double high_fraction = 0.75;
  double high_min = 0.8;
  double high_max = 1.0;
  double low_min = 0.0;
  double low_max = 0.3;

  void validate() const;
};

struct SyntheticDomain {
  std::vector<double> true_values;  // each in [0, 1]
  double high_threshold = 0.5;

  bool truly_high(std::size_t i) const { return true_values.at(i) >= high_threshold; }
};

// P(like) = clip(mean true value of the subset + like_bias, 0, 1), then the
// rating flips with probability `noise`.
struct RaterModel {
  double noise = 0.0;
  double like_bias = 0.0;

  void validate() const;
};

struct SimulationConfig {
  std::uint64_t seed = 42;
  std::size_t n_fragments = 200;
  std::size_t n_sessions = 2000;
  PoolConfig pool;
  RaterModel rater;
  Mixture mixture;
  double high_threshold = 0.5;
  AttributionStrategy attributor = AttributionStrategy::leave_one_out;

  void validate() const;  // ValidationError
};

inline constexpr std::size_t kHistogramBins = 20;
using Histogram = std::array<std::uint64_t, kHistogramBins>;

// Bins are right-closed over [-1, 1]: (-0.1, 0] is bin 9, and -1 lands in bin 0.
std::size_t histogram_bin(double value);
double histogram_bin_low(std::size_t bin);
double histogram_bin_high(std::size_t bin);

struct Confusion {
  std::uint64_t true_positive = 0;   // retained, truly high
  std::uint64_t false_positive = 0;  // retained, truly low
  std::uint64_t false_negative = 0;  // dropped, truly high
  std::uint64_t true_negative = 0;   // dropped, truly low
};

struct AlphaResult {
  double alpha = 0.0;
  double retained_fraction = 0.0;
  double precision_vs_oracle = 0.0;
  double recall_vs_oracle = 0.0;
  std::uint64_t likes = 0;
  std::uint64_t dislikes = 0;
};

struct SimulationReport {
  SimulationConfig config;
  std::size_t sessions_run = 0;
  double retained_fraction = 0.0;
  double precision_vs_oracle = 0.0;
  double recall_vs_oracle = 0.0;
  double agreement = 0.0;             // share of retained fragments that are truly high
  double oracle_high_fraction = 0.0;  // share of fragments the oracle calls high
  Confusion confusion;
  std::uint64_t likes = 0;
  std::uint64_t dislikes = 0;
  std::uint64_t alive_count = 0;
  std::uint64_t total_count = 0;
  std::uint64_t unrated_count = 0;
  Histogram value_histogram{};  // alive fragments
  std::vector<AlphaResult> per_alpha_results;

  friend bool operator==(const SimulationReport&, const SimulationReport&);
};

bool operator==(const AlphaResult&, const AlphaResult&);

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
double uniform01(std::mt19937_64& rng);

SyntheticDomain build_domain(const SimulationConfig& cfg, std::mt19937_64& rng);

// Text for synthetic fragment i: "topic<i>" followed by two pseudo-words.
std::string synthetic_fragment_text(std::size_t i, std::mt19937_64& rng);

Rating simulate_rating(std::span<const double> selected_true_values, const RaterModel& rater,
                       std::mt19937_64& rng);

struct SimulationOutcome {
  SimulationReport report;
  SyntheticDomain domain;
  Journal journal;
};

// Full run with the mock backend and an in-memory journal. Each session picks
// k random alive fragments as the "related" set (passed to the selector as a
// topic hint), generates, rates, and submits feedback. With `event_log` the
// journal is file-backed (the file is created or replaced).
SimulationOutcome simulate(const SimulationConfig& cfg,
                           const std::optional<std::filesystem::path>& event_log = std::nullopt);
SimulationReport run_simulation(const SimulationConfig& cfg);

// One run per alpha, same base seed. alphas must be strictly ascending in (0, 1).
SimulationReport sweep_alpha(const SimulationConfig& cfg, std::span<const double> alphas);

// Recomputes report metrics from a pool and domain.
void score_pool(SimulationReport& report, const KnowledgePool& pool, const SyntheticDomain& domain);

// "bin_low,bin_high,count" with kHistogramBins rows. Throws ValidationError on
// an empty histogram, StorageError on I/O failure.
void export_histogram(const SimulationReport& report, const std::filesystem::path& path);

// Declarative config (YAML, "version: 1") and JSON report.
SimulationConfig load_config(const std::filesystem::path& path);
SimulationConfig parse_config(const std::string& yaml);
std::string config_to_yaml(const SimulationConfig& cfg);
nlohmann::json report_to_json(const SimulationReport& report);
void write_report(const SimulationReport& report, const std::filesystem::path& path);

}  // namespace coem::sim
