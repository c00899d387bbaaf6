#include "coem/backend.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "coem/errors.hpp"
#include "coem/text.hpp"

#ifndef COEM_DEFAULT_TEMPLATE_DIR
#define COEM_DEFAULT_TEMPLATE_DIR "templates"
#endif

namespace coem {

void GenerationRequest::validate() const {
  if (fragments.empty()) throw ValidationError("generation request has no fragments");
  if (max_length == 0) throw ValidationError("max_length must be positive");
}

std::string generate_mock(const GenerationRequest& req, std::uint64_t seed) {
  req.validate();
  std::string out = "MOCK-SUMMARY v1 seed=" + std::to_string(seed) +
                    " template=" + req.instruction +
                    " fragments=" + std::to_string(req.fragments.size()) + "\n";
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    out += "[" + std::to_string(i + 1) + "] " + text::first_clause(req.fragments[i]) + "\n";
  }
  if (out.size() > req.max_length) out.resize(req.max_length);
  return out;
}

std::string MockGenerator::generate(const GenerationRequest& req) {
  return generate_mock(req, seed_);
}

std::string MockGenerator::complete(const std::string& prompt) {
  if (responder_) return responder_(prompt);
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(text::fnv1a(prompt, seed_ ^ 0xcbf29ce484222325ULL)));
  return std::string("MOCK-REPLY v1 digest=") + buf;
}

std::filesystem::path TemplateSet::default_dir() {
  if (const char* env = std::getenv("COEM_TEMPLATE_DIR")) return env;
  return COEM_DEFAULT_TEMPLATE_DIR;
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw NotFoundError("template directory not found: " + dir.string());
  }
  TemplateSet set;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path());
    std::stringstream body;
    body << in.rdbuf();
    set.templates_[entry.path().stem().string()] = body.str();
  }
  return set;
}

const std::string& TemplateSet::get(const std::string& id) const {
  auto it = templates_.find(id);
  if (it == templates_.end()) throw NotFoundError("unknown prompt template '" + id + "'");
  return it->second;
}

void BackendConfig::validate() const {
  if (endpoint.empty()) throw ValidationError("backend endpoint is empty");
  if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
    throw ValidationError("backend endpoint must be an http:// or https:// URL");
  }
  if (model_name.empty()) throw ValidationError("backend model name is empty");
  if (timeout.count() <= 0) throw ValidationError("backend timeout must be positive");
  if (max_retries < 0) throw ValidationError("max_retries must be non-negative");
}

}  // namespace coem
