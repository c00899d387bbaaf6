#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>

#include "coem/attribution.hpp"
#include "coem/backend.hpp"
#include "coem/engine.hpp"
#include "coem/extraction.hpp"
#include "coem/journal.hpp"

namespace httplib {
class Server;
}

namespace coem {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path event_log = "coem-events.log";
  PoolConfig pool;

  std::string backend = "mock";  // mock | remote
  std::uint64_t mock_seed = 0;
  BackendConfig remote;
  std::filesystem::path template_dir;  // empty: TemplateSet::default_dir()
  std::filesystem::path backend_transcript;  // optional JSON-lines mirror of remote calls

  AttributionStrategy attributor = AttributionStrategy::uniform;
  std::string extractor = "rule_based";  // rule_based | judge | none
  std::filesystem::path lexicon;         // required for rule_based

  // When set and the named variable is non-empty, every request needs
  // "Authorization: Bearer <token>".
  std::string api_token_env;
  std::size_t page_size = 100;

  void validate() const;
};

// YAML file with "version: 1"; see docs/schema.md. Throws ValidationError.
ServiceConfig load_service_config(const std::filesystem::path& path);
ServiceConfig parse_service_config(const std::string& yaml);

// HTTP routes over a SessionEngine. JSON bodies; errors are
// {"error": {"code": "...", "message": "..."}} with 401/404/409/422/503.
class Service {
 public:
  Service(SessionEngine& engine, const ServiceConfig& cfg);
  void mount(httplib::Server& server);

 private:
  SessionEngine& engine_;
  ServiceConfig cfg_;
  std::string api_token_;
};

// Owns everything the `serve` command needs: journal (replayed on boot),
// backend, attributor, extractor, engine and HTTP server.
class ServiceRuntime {
 public:
  explicit ServiceRuntime(ServiceConfig cfg);
  ~ServiceRuntime();

  // Binds cfg.port (0 picks a free port) and returns the bound port.
  int bind();
  void serve();  // blocks until stop()
  void stop();

  SessionEngine& engine() { return *engine_; }
  const Journal& journal() const { return journal_; }
  const ServiceConfig& config() const { return cfg_; }

 private:
  ServiceConfig cfg_;
  Journal journal_;
  std::unique_ptr<Generator> backend_;
  std::unique_ptr<OutputScorer> output_scorer_;
  std::unique_ptr<CoalitionScorer> coalition_scorer_;
  std::unique_ptr<Attributor> attributor_;
  std::unique_ptr<Extractor> extractor_;
  std::unique_ptr<SessionEngine> engine_;
  std::unique_ptr<Service> service_;
  std::unique_ptr<httplib::Server> server_;
  std::mutex transcript_mu_;
  std::ofstream transcript_;
};

}  // namespace coem
