#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace coem {

struct GenerationRequest {
  std::vector<std::string> fragments;
  std::string instruction = "summary_v1";  // prompt template id
  std::size_t max_length = 4000;

  void validate() const;  // ValidationError
};

// The general model: writes a summary with viewpoints over a fragment subset,
// and answers free-form prompts for the judge attributor and the extractor.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string generate(const GenerationRequest& req) = 0;
  virtual std::string complete(const std::string& prompt) = 0;
};

// Deterministic stand-in. generate() emits a fixed header line and then one
// "[i] <first clause>" line per fragment, in request order. complete() answers
// through a caller-provided responder, or with a digest of the prompt.
class MockGenerator final : public Generator {
 public:
  using Responder = std::function<std::string(const std::string& prompt)>;

  explicit MockGenerator(std::uint64_t seed = 0, Responder responder = {})
      : seed_(seed), responder_(std::move(responder)) {}

  std::string generate(const GenerationRequest& req) override;
  std::string complete(const std::string& prompt) override;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  Responder responder_;
};

std::string generate_mock(const GenerationRequest& req, std::uint64_t seed);

// Versioned prompt templates loaded from a directory of "<id>.txt" files.
class TemplateSet {
 public:
  TemplateSet() = default;
  static TemplateSet load(const std::filesystem::path& dir);  // throws Error
  static std::filesystem::path default_dir();

  const std::string& get(const std::string& id) const;  // NotFoundError
  bool contains(const std::string& id) const { return templates_.contains(id); }
  void set(std::string id, std::string body) { templates_[std::move(id)] = std::move(body); }

 private:
  std::map<std::string, std::string> templates_;
};

struct BackendConfig {
  std::string endpoint;  // full URL of the chat-completion route
  std::string model_name;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::string token_env = "COEM_BACKEND_TOKEN";
  std::chrono::milliseconds backoff_initial{500};
  double temperature = 0.2;

  void validate() const;
};

// One request or response mirrored by the remote adapter. Bodies never carry
// the auth token; it is replaced with "[REDACTED]" if it ever shows up.
struct BackendExchange {
  std::string direction;  // "request" | "response" | "error"
  int attempt = 0;
  int status = 0;
  nlohmann::json body;
};

// Chat-completion client:
//   POST <endpoint>  {"model", "messages":[{"role","content"}...], "temperature"}
//   200 -> {"choices":[{"message":{"role","content"}}]}
// 401/403 fail immediately, 408/429/5xx and transport errors retry with
// exponential backoff, an unparseable 200 fails immediately.
class RemoteGenerator final : public Generator {
 public:
  using Observer = std::function<void(const BackendExchange&)>;

  RemoteGenerator(BackendConfig cfg, TemplateSet templates, Observer observer = {});

  std::string generate(const GenerationRequest& req) override;
  std::string complete(const std::string& prompt) override;

  std::string render_generation_prompt(const GenerationRequest& req) const;

 private:
  std::string chat(const std::string& prompt);

  BackendConfig cfg_;
  TemplateSet templates_;
  Observer observer_;
};

}  // namespace coem
