#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "coem/backend.hpp"
#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

namespace {

struct SplitUrl {
  std::string base;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint is not a URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

std::string redact(std::string s, const std::string& secret) {
  if (secret.empty()) return s;
  std::size_t pos = 0;
  while ((pos = s.find(secret, pos)) != std::string::npos) {
    s.replace(pos, secret.size(), "[REDACTED]");
    pos += 10;
  }
  return s;
}

nlohmann::json redact(const nlohmann::json& j, const std::string& secret) {
  auto dumped = redact(j.dump(), secret);
  return nlohmann::json::parse(dumped, nullptr, false);
}

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

RemoteGenerator::RemoteGenerator(BackendConfig cfg, TemplateSet templates, Observer observer)
    : cfg_(std::move(cfg)), templates_(std::move(templates)), observer_(std::move(observer)) {
  cfg_.validate();
}

std::string RemoteGenerator::render_generation_prompt(const GenerationRequest& req) const {
  std::string listing;
  for (std::size_t i = 0; i < req.fragments.size(); ++i) {
    listing += "[" + std::to_string(i + 1) + "] " + req.fragments[i] + "\n";
  }
  return text::render(templates_.get(req.instruction),
                      {{"fragments", listing},
                       {"count", std::to_string(req.fragments.size())},
                       {"max_length", std::to_string(req.max_length)}});
}

std::string RemoteGenerator::generate(const GenerationRequest& req) {
  req.validate();
  auto out = chat(render_generation_prompt(req));
  if (out.size() > req.max_length) out.resize(req.max_length);
  return out;
}

std::string RemoteGenerator::complete(const std::string& prompt) { return chat(prompt); }

std::string RemoteGenerator::chat(const std::string& prompt) {
  const char* raw_token = std::getenv(cfg_.token_env.c_str());
  if (raw_token == nullptr || *raw_token == '\0') {
    throw BackendError(BackendErrorKind::auth,
                       "environment variable " + cfg_.token_env + " is not set");
  }
  const std::string token = raw_token;
  const auto url = split_url(cfg_.endpoint);

  httplib::Client client(url.base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  client.set_bearer_token_auth(token);

  const nlohmann::json body = {
      {"model", cfg_.model_name},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
      {"temperature", cfg_.temperature}};
  const std::string payload = body.dump();

  auto observe = [&](const char* direction, int attempt, int status, const nlohmann::json& j) {
    if (observer_) observer_(BackendExchange{direction, attempt, status, redact(j, token)});
  };

  BackendErrorKind last_kind = BackendErrorKind::unavailable;
  std::string last_message = "no attempt made";
  auto delay = cfg_.backoff_initial;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
    observe("request", attempt, 0, body);
    auto res = client.Post(url.path, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      last_kind = (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
                   err == httplib::Error::Write)
                      ? BackendErrorKind::timeout
                      : BackendErrorKind::unavailable;
      last_message = httplib::to_string(err);
      observe("error", attempt, 0, {{"error", last_message}});
      continue;
    }
    nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    observe("response", attempt, res->status,
            reply.is_discarded() ? nlohmann::json(res->body) : reply);

    if (res->status == 401 || res->status == 403) {
      throw BackendError(BackendErrorKind::auth, "backend rejected credentials (HTTP " +
                                                     std::to_string(res->status) + ")");
    }
    if (retryable_status(res->status)) {
      last_kind = BackendErrorKind::transient;
      last_message = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendError(BackendErrorKind::unavailable,
                         "backend answered HTTP " + std::to_string(res->status));
    }
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw BackendError(BackendErrorKind::malformed,
                         "response has no choices[0].message.content string");
    }
  }
  throw BackendError(last_kind, last_message + " after " + std::to_string(cfg_.max_retries + 1) +
                                    " attempts");
}

}  // namespace coem
