#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "coem/errors.hpp"
#include "coem/journal.hpp"
#include "coem/service.hpp"
#include "coem/simulator.hpp"
#include "coem/text.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct SimFlags {
  std::string config;
  std::optional<double> alpha;
  std::optional<double> theta;
  std::optional<std::size_t> sessions;
  std::optional<std::size_t> fragments;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise;
  std::optional<std::string> attributor;
  std::string out;
  std::string histogram;
};

void add_sim_flags(CLI::App* cmd, SimFlags& f, bool with_alpha) {
  cmd->add_option("--config", f.config, "YAML simulation config; flags override its values");
  if (with_alpha) cmd->add_option("--alpha", f.alpha, "EMA learning rate in (0, 1)");
  cmd->add_option("--theta", f.theta, "pruning threshold");
  cmd->add_option("--sessions", f.sessions, "number of feedback sessions");
  cmd->add_option("--fragments", f.fragments, "synthetic pool size");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--noise", f.noise, "rater flip probability");
  cmd->add_option("--attributor", f.attributor, "uniform | leave_one_out | shapley");
  cmd->add_option("--out", f.out, "write the JSON report here");
  cmd->add_option("--histogram", f.histogram, "write the value histogram CSV here");
}

coem::sim::SimulationConfig resolve(const SimFlags& f) {
  auto cfg = f.config.empty() ? coem::sim::SimulationConfig{} : coem::sim::load_config(f.config);
  if (f.alpha) cfg.pool.alpha = *f.alpha;
  if (f.theta) cfg.pool.theta = *f.theta;
  if (f.sessions) cfg.n_sessions = *f.sessions;
  if (f.fragments) cfg.n_fragments = *f.fragments;
  if (f.seed) cfg.seed = *f.seed;
  if (f.noise) cfg.rater.noise = *f.noise;
  if (f.attributor) cfg.attributor = coem::parse_attribution_strategy(*f.attributor);
  // Round-trip through the parser so flag values get the same validation.
  return coem::sim::parse_config(coem::sim::config_to_yaml(cfg));
}

void echo_config(const coem::sim::SimulationConfig& cfg) {
  std::cout << "# effective config\n" << coem::sim::config_to_yaml(cfg) << "# end config\n";
}

void write_outputs(const coem::sim::SimulationReport& report, const SimFlags& f) {
  if (!f.out.empty()) coem::sim::write_report(report, f.out);
  if (!f.histogram.empty()) coem::sim::export_histogram(report, f.histogram);
}

int cmd_simulate(const SimFlags& f) {
  const auto cfg = resolve(f);
  echo_config(cfg);
  const auto report = coem::sim::run_simulation(cfg);
  write_outputs(report, f);
  std::printf("sessions_run=%zu\n", report.sessions_run);
  std::printf("retained_fraction=%.6f\n", report.retained_fraction);
  std::printf("precision=%.6f\n", report.precision_vs_oracle);
  std::printf("recall=%.6f\n", report.recall_vs_oracle);
  std::printf("likes=%llu dislikes=%llu\n", static_cast<unsigned long long>(report.likes),
              static_cast<unsigned long long>(report.dislikes));
  return kExitOk;
}

std::vector<double> parse_alphas(const std::string& list) {
  std::vector<double> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = coem::text::trim(item);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw coem::ValidationError("--alphas: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw coem::ValidationError("--alphas is empty");
  return out;
}

int cmd_sweep(const SimFlags& f, const std::string& alphas_flag) {
  const auto alphas = parse_alphas(alphas_flag);
  auto cfg = resolve(f);
  cfg.pool.alpha = alphas.front();
  echo_config(cfg);
  const auto report = coem::sim::sweep_alpha(cfg, alphas);
  write_outputs(report, f);
  std::printf("%-8s %-18s %-10s %-10s %-7s %-7s\n", "alpha", "retained_fraction", "precision",
              "recall", "likes", "dislikes");
  for (const auto& r : report.per_alpha_results) {
    std::printf("%-8g %-18.6f %-10.6f %-10.6f %-7llu %-7llu\n", r.alpha, r.retained_fraction,
                r.precision_vs_oracle, r.recall_vs_oracle, static_cast<unsigned long long>(r.likes),
                static_cast<unsigned long long>(r.dislikes));
  }
  return kExitOk;
}

struct ServeFlags {
  std::string config;
  std::optional<std::string> host;
  std::optional<int> port;
  std::optional<std::string> event_log;
};

int cmd_serve(const ServeFlags& f) {
  auto cfg = f.config.empty() ? coem::ServiceConfig{} : coem::load_service_config(f.config);
  if (f.host) cfg.host = *f.host;
  if (f.port) cfg.port = *f.port;
  if (f.event_log) cfg.event_log = *f.event_log;
  if (f.config.empty()) cfg.extractor = "none";
  cfg.validate();

  // Block termination signals in every thread; one watcher waits for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  coem::ServiceRuntime runtime(cfg);
  const int port = runtime.bind();
  std::printf("listening on http://%s:%d (event log %s, %zu events replayed)\n", cfg.host.c_str(),
              port, cfg.event_log.c_str(), runtime.journal().events().size());
  std::fflush(stdout);

  std::thread watcher([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    runtime.stop();
  });
  runtime.serve();
  pthread_kill(watcher.native_handle(), SIGTERM);  // no-op if a signal already arrived
  watcher.join();
  return kExitOk;
}

void print_stats(const coem::EngineState& state) {
  const auto& pool = state.pool;
  std::printf("fragments=%zu alive=%zu iteration=%llu\n", pool.total_count(), pool.alive_count(),
              static_cast<unsigned long long>(pool.iteration()));
  if (!pool.empty()) {
    std::printf("retained_fraction=%.6f\n", pool.high_value_fraction(pool.config().theta));
  }
  std::printf("sessions=%zu likes=%llu dislikes=%llu pruned=%llu\n", state.sessions.size(),
              static_cast<unsigned long long>(state.counters.likes),
              static_cast<unsigned long long>(state.counters.dislikes),
              static_cast<unsigned long long>(state.counters.pruned));
}

void write_snapshot(const coem::KnowledgePool& pool, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw coem::StorageError("cannot write " + path);
  pool.write_snapshot(out);
  out.flush();
  if (!out) throw coem::StorageError("write failed for " + path);
}

int cmd_pool(const std::string& log, const std::string& snapshot_out, bool list) {
  // Tolerates a torn tail like the server does on boot, without touching the file.
  const auto state = coem::Journal::replay_file(log, coem::Recovery::truncate_torn_tail);
  print_stats(state);
  if (list) {
    for (const auto& [id, f] : state.pool.fragments()) {
      std::printf("%s\t%s\t%.6f\t%llu\t%s\n", coem::to_string(id).c_str(), f.alive ? "alive" : "pruned",
                  f.value, static_cast<unsigned long long>(f.session_count), f.text.c_str());
    }
  }
  if (!snapshot_out.empty()) write_snapshot(state.pool, snapshot_out);
  return kExitOk;
}

int cmd_replay(const std::string& log, const std::string& snapshot_out) {
  const auto state = coem::Journal::replay_file(log, coem::Recovery::strict);
  write_snapshot(state.pool, snapshot_out);
  print_stats(state);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coem: knowledge-pool engine"};
  app.require_subcommand(1);

  SimFlags sim_flags;
  auto* simulate = app.add_subcommand("simulate", "run one simulated rating loop");
  add_sim_flags(simulate, sim_flags, true);

  SimFlags sweep_flags;
  std::string alphas;
  auto* sweep = app.add_subcommand("sweep", "run the simulation for several learning rates");
  add_sim_flags(sweep, sweep_flags, false);
  sweep->add_option("--alphas", alphas, "comma-separated, strictly ascending")->required();

  ServeFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  serve->add_option("--config", serve_flags.config, "YAML service config");
  serve->add_option("--host", serve_flags.host, "bind address");
  serve->add_option("--port", serve_flags.port, "port (0 picks a free one)");
  serve->add_option("--event-log", serve_flags.event_log, "event log path");

  std::string pool_log, pool_snapshot;
  bool pool_list = false;
  auto* pool = app.add_subcommand("pool", "inspect or export the pool recorded in an event log");
  pool->add_option("--log", pool_log, "event log")->required();
  pool->add_option("--snapshot-out", pool_snapshot, "write a snapshot here");
  pool->add_flag("--list", pool_list, "print every fragment");

  std::string replay_log, replay_snapshot;
  auto* replay = app.add_subcommand("replay", "rebuild the pool from an event log, strictly");
  replay->add_option("--log", replay_log, "event log")->required();
  replay->add_option("--snapshot-out", replay_snapshot, "snapshot output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim_flags);
    if (sweep->parsed()) return cmd_sweep(sweep_flags, alphas);
    if (serve->parsed()) return cmd_serve(serve_flags);
    if (pool->parsed()) return cmd_pool(pool_log, pool_snapshot, pool_list);
    if (replay->parsed()) return cmd_replay(replay_log, replay_snapshot);
  } catch (const coem::CorruptLogError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const coem::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}
