#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "coem/errors.hpp"
#include "coem/simulator.hpp"
#include "coem/text.hpp"

namespace coem::sim {

namespace {

constexpr int kConfigVersion = 1;

void reject_unknown(const YAML::Node& node, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!known.contains(key)) throw ValidationError("unknown key '" + where + key + "' in config");
  }
}

template <class T>
void read(const YAML::Node& node, const char* key, T& out, const std::string& where) {
  if (!node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    throw ValidationError("config key '" + where + key + "' has the wrong type");
  }
}

void read_range(const YAML::Node& node, const char* key, double& lo, double& hi) {
  if (!node[key]) return;
  const auto seq = node[key];
  if (!seq.IsSequence() || seq.size() != 2) {
    throw ValidationError(std::string("config key 'domain.") + key + "' must be [min, max]");
  }
  lo = seq[0].as<double>();
  hi = seq[1].as<double>();
}

}  // namespace

SimulationConfig parse_config(const std::string& yaml) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml);
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("config is not valid YAML: ") + e.what());
  }
  if (!root.IsMap()) throw ValidationError("config must be a mapping");
  reject_unknown(root, {"version", "seed", "fragments", "sessions", "pool", "rater", "domain",
                        "attributor"},
                 "");
  int version = 0;
  read(root, "version", version, "");
  if (version != kConfigVersion) {
    throw ValidationError("config version must be " + std::to_string(kConfigVersion));
  }

  SimulationConfig cfg;
  read(root, "seed", cfg.seed, "");
  read(root, "fragments", cfg.n_fragments, "");
  read(root, "sessions", cfg.n_sessions, "");
  if (auto pool = root["pool"]) {
    reject_unknown(pool, {"alpha", "theta", "min_sessions_before_prune", "subset_size"}, "pool.");
    read(pool, "alpha", cfg.pool.alpha, "pool.");
    read(pool, "theta", cfg.pool.theta, "pool.");
    read(pool, "min_sessions_before_prune", cfg.pool.min_sessions_before_prune, "pool.");
    read(pool, "subset_size", cfg.pool.subset_size, "pool.");
  }
  if (auto rater = root["rater"]) {
    reject_unknown(rater, {"noise", "like_bias"}, "rater.");
    read(rater, "noise", cfg.rater.noise, "rater.");
    read(rater, "like_bias", cfg.rater.like_bias, "rater.");
  }
  if (auto domain = root["domain"]) {
    reject_unknown(domain, {"high_fraction", "high_range", "low_range", "high_threshold"},
                   "domain.");
    read(domain, "high_fraction", cfg.mixture.high_fraction, "domain.");
    read_range(domain, "high_range", cfg.mixture.high_min, cfg.mixture.high_max);
    read_range(domain, "low_range", cfg.mixture.low_min, cfg.mixture.low_max);
    read(domain, "high_threshold", cfg.high_threshold, "domain.");
  }
  if (root["attributor"]) {
    cfg.attributor = parse_attribution_strategy(root["attributor"].as<std::string>());
  }
  cfg.validate();
  return cfg;
}

SimulationConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_to_yaml(const SimulationConfig& cfg) {
  using text::format_double;
  std::ostringstream out;
  out << "version: " << kConfigVersion << "\n"
      << "seed: " << cfg.seed << "\n"
      << "fragments: " << cfg.n_fragments << "\n"
      << "sessions: " << cfg.n_sessions << "\n"
      << "pool:\n"
      << "  alpha: " << format_double(cfg.pool.alpha) << "\n"
      << "  theta: " << format_double(cfg.pool.theta) << "\n"
      << "  min_sessions_before_prune: " << cfg.pool.min_sessions_before_prune << "\n"
      << "  subset_size: " << cfg.pool.subset_size << "\n"
      << "rater:\n"
      << "  noise: " << format_double(cfg.rater.noise) << "\n"
      << "  like_bias: " << format_double(cfg.rater.like_bias) << "\n"
      << "domain:\n"
      << "  high_fraction: " << format_double(cfg.mixture.high_fraction) << "\n"
      << "  high_range: [" << format_double(cfg.mixture.high_min) << ", "
      << format_double(cfg.mixture.high_max) << "]\n"
      << "  low_range: [" << format_double(cfg.mixture.low_min) << ", "
      << format_double(cfg.mixture.low_max) << "]\n"
      << "  high_threshold: " << format_double(cfg.high_threshold) << "\n"
      << "attributor: " << to_string(cfg.attributor) << "\n";
  return out.str();
}

nlohmann::json report_to_json(const SimulationReport& r) {
  auto hist = nlohmann::json::array();
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    hist.push_back({{"bin_low", histogram_bin_low(b)},
                    {"bin_high", histogram_bin_high(b)},
                    {"count", r.value_histogram[b]}});
  }
  nlohmann::json j = {
      {"format", "coem-sim-report/1"},
      {"sessions_run", r.sessions_run},
      {"retained_fraction", r.retained_fraction},
      {"precision_vs_oracle", r.precision_vs_oracle},
      {"recall_vs_oracle", r.recall_vs_oracle},
      {"agreement", r.agreement},
      {"oracle_high_fraction", r.oracle_high_fraction},
      {"confusion",
       {{"true_positive", r.confusion.true_positive},
        {"false_positive", r.confusion.false_positive},
        {"false_negative", r.confusion.false_negative},
        {"true_negative", r.confusion.true_negative}}},
      {"like_dislike_counts", {{"likes", r.likes}, {"dislikes", r.dislikes}}},
      {"alive_count", r.alive_count},
      {"total_count", r.total_count},
      {"unrated_count", r.unrated_count},
      {"value_histogram", hist},
  };
  const auto& c = r.config;
  j["config"] = {{"version", kConfigVersion},
                 {"seed", c.seed},
                 {"fragments", c.n_fragments},
                 {"sessions", c.n_sessions},
                 {"pool",
                  {{"alpha", c.pool.alpha},
                   {"theta", c.pool.theta},
                   {"min_sessions_before_prune", c.pool.min_sessions_before_prune},
                   {"subset_size", c.pool.subset_size}}},
                 {"rater", {{"noise", c.rater.noise}, {"like_bias", c.rater.like_bias}}},
                 {"domain",
                  {{"high_fraction", c.mixture.high_fraction},
                   {"high_range", {c.mixture.high_min, c.mixture.high_max}},
                   {"low_range", {c.mixture.low_min, c.mixture.low_max}},
                   {"high_threshold", c.high_threshold}}},
                 {"attributor", to_string(c.attributor)}};
  if (!r.per_alpha_results.empty()) {
    auto rows = nlohmann::json::array();
    for (const auto& a : r.per_alpha_results) {
      rows.push_back({{"alpha", a.alpha},
                      {"retained_fraction", a.retained_fraction},
                      {"precision_vs_oracle", a.precision_vs_oracle},
                      {"recall_vs_oracle", a.recall_vs_oracle},
                      {"likes", a.likes},
                      {"dislikes", a.dislikes}});
    }
    j["per_alpha_results"] = std::move(rows);
  }
  return j;
}

void write_report(const SimulationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw StorageError("cannot write report to " + path.string());
  out << report_to_json(report).dump(2) << "\n";
  if (!out) throw StorageError("failed writing report to " + path.string());
}

void export_histogram(const SimulationReport& report, const std::filesystem::path& path) {
  std::uint64_t total = 0;
  for (auto c : report.value_histogram) total += c;
  if (total == 0) throw ValidationError("histogram is empty: the pool has no alive fragments");
  std::ofstream out(path);
  if (!out) throw StorageError("cannot write histogram to " + path.string());
  out << "bin_low,bin_high,count\n";
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    out << histogram_bin_low(b) << "," << histogram_bin_high(b) << ","
        << report.value_histogram[b] << "\n";
  }
  if (!out) throw StorageError("failed writing histogram to " + path.string());
}

}  // namespace coem::sim
