#include "coem/pool.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

namespace {

constexpr const char* kSnapshotFormat = "coem-snapshot/1";

std::string json_quote(std::string_view s) { return nlohmann::json(std::string(s)).dump(); }

double require_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw ValidationError(std::string("snapshot record missing numeric field '") + key + "'");
  }
  return j.at(key).get<double>();
}

std::uint64_t require_uint(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
    throw ValidationError(std::string("snapshot record missing unsigned field '") + key + "'");
  }
  return j.at(key).get<std::uint64_t>();
}

}  // namespace

std::string to_string(FragmentId id) { return std::to_string(id.value); }

void PoolConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ValidationError("alpha must lie in (0, 1), got " + text::format_double(alpha));
  }
  if (!(theta >= -1.0 && theta <= 1.0)) {
    throw ValidationError("theta must lie in [-1, 1], got " + text::format_double(theta));
  }
  if (min_sessions_before_prune < 1) {
    throw ValidationError("min_sessions_before_prune must be positive");
  }
  if (subset_size < 1) throw ValidationError("subset_size must be positive");
}

KnowledgePool::KnowledgePool(PoolConfig config) : config_(config) { config_.validate(); }

void KnowledgePool::index_alive(const Fragment& f) {
  dedup_.emplace(text::fnv1a(text::normalize(f.text)), f.id);
  ++alive_count_;
}

void KnowledgePool::unindex(const Fragment& f) {
  auto [b, e] = dedup_.equal_range(text::fnv1a(text::normalize(f.text)));
  for (auto it = b; it != e; ++it) {
    if (it->second == f.id) {
      dedup_.erase(it);
      break;
    }
  }
  --alive_count_;
}

bool KnowledgePool::contains_text(std::string_view raw) const {
  const std::string key = text::normalize(raw);
  auto [b, e] = dedup_.equal_range(text::fnv1a(key));
  for (auto it = b; it != e; ++it) {
    if (text::normalize(fragments_.at(it->second).text) == key) return true;
  }
  return false;
}

FragmentId KnowledgePool::add_fragment(std::string_view raw, std::string_view source) {
  const std::string body = text::trim(raw);
  if (body.empty()) throw ValidationError("fragment text is empty after trimming");

  const std::string key = text::normalize(body);
  auto [b, e] = dedup_.equal_range(text::fnv1a(key));
  for (auto it = b; it != e; ++it) {
    if (text::normalize(fragments_.at(it->second).text) == key) return it->second;
  }

  Fragment f;
  f.id = FragmentId{next_id_++};
  f.text = body;
  f.source = std::string(source);
  f.created_iteration = iteration_;
  index_alive(f);
  const FragmentId id = f.id;
  fragments_.emplace(id, std::move(f));
  return id;
}

std::vector<double> KnowledgePool::apply_feedback(std::span<const FragmentId> subset,
                                                  std::span<const double> weights, double r) {
  if (subset.size() != weights.size()) {
    throw ValidationError("subset has " + std::to_string(subset.size()) + " ids but " +
                          std::to_string(weights.size()) + " weights");
  }
  if (!(r >= -1.0 && r <= 1.0)) {
    throw ValidationError("feedback r must lie in [-1, 1], got " + text::format_double(r));
  }
  std::unordered_set<FragmentId> seen;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const Fragment* f = find(subset[i]);
    if (f == nullptr) throw NotFoundError("unknown fragment id " + to_string(subset[i]));
    if (!f->alive) throw NotFoundError("fragment " + to_string(subset[i]) + " has been pruned");
    if (!seen.insert(subset[i]).second) {
      throw ValidationError("fragment " + to_string(subset[i]) + " appears twice in subset");
    }
    if (!(weights[i] >= 0.0 && weights[i] <= 1.0)) {
      throw ValidationError("attribution weight " + std::to_string(i) + " outside [0, 1]: " +
                            text::format_double(weights[i]));
    }
  }

  const double alpha = config_.alpha;
  std::vector<double> updated;
  updated.reserve(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    Fragment& f = fragments_.at(subset[i]);
    f.value = (1.0 - alpha) * f.value + alpha * (weights[i] * r);
    ++f.session_count;
    ++f.feedback_count;
    updated.push_back(f.value);
  }
  ++iteration_;
  return updated;
}

std::vector<FragmentId> KnowledgePool::prune() {
  std::vector<FragmentId> removed;
  for (auto& [id, f] : fragments_) {
    if (f.alive && f.value < config_.theta &&
        f.session_count >= config_.min_sessions_before_prune) {
      unindex(f);
      f.alive = false;
      removed.push_back(id);
    }
  }
  return removed;
}

double KnowledgePool::high_value_fraction(double theta) const {
  if (fragments_.empty()) throw ValidationError("high_value_fraction of an empty pool");
  std::size_t high = 0;
  for (const auto& [id, f] : fragments_) {
    if (f.alive && f.value >= theta) ++high;
  }
  return static_cast<double>(high) / static_cast<double>(fragments_.size());
}

const Fragment* KnowledgePool::find(FragmentId id) const {
  auto it = fragments_.find(id);
  return it == fragments_.end() ? nullptr : &it->second;
}

const Fragment& KnowledgePool::at(FragmentId id) const {
  const Fragment* f = find(id);
  if (f == nullptr) throw NotFoundError("unknown fragment id " + to_string(id));
  return *f;
}

std::vector<FragmentId> KnowledgePool::alive_ids() const {
  std::vector<FragmentId> out;
  out.reserve(alive_count_);
  for (const auto& [id, f] : fragments_) {
    if (f.alive) out.push_back(id);
  }
  return out;
}

// Records are written by hand so doubles carry exactly 17 significant digits.
void KnowledgePool::write_snapshot(std::ostream& out) const {
  using text::format_double;
  out << "{\"record\":\"header\",\"format\":\"" << kSnapshotFormat << "\""
      << ",\"alpha\":" << format_double(config_.alpha)
      << ",\"theta\":" << format_double(config_.theta)
      << ",\"min_sessions_before_prune\":" << config_.min_sessions_before_prune
      << ",\"subset_size\":" << config_.subset_size << ",\"iteration\":" << iteration_
      << ",\"next_id\":" << next_id_ << "}\n";
  for (const auto& [id, f] : fragments_) {
    out << "{\"record\":\"fragment\",\"id\":" << id.value << ",\"text\":" << json_quote(f.text)
        << ",\"source\":" << json_quote(f.source) << ",\"value\":" << format_double(f.value)
        << ",\"session_count\":" << f.session_count
        << ",\"feedback_count\":" << f.feedback_count
        << ",\"created_iteration\":" << f.created_iteration
        << ",\"alive\":" << (f.alive ? "true" : "false") << "}\n";
  }
}

std::string KnowledgePool::snapshot() const {
  std::ostringstream out;
  write_snapshot(out);
  return out.str();
}

KnowledgePool KnowledgePool::read_snapshot(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("snapshot is empty");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("snapshot header: ") + e.what());
  }
  if (header.value("record", "") != "header" || header.value("format", "") != kSnapshotFormat) {
    throw ValidationError("snapshot header has wrong record type or format");
  }
  PoolConfig cfg;
  cfg.alpha = require_double(header, "alpha");
  cfg.theta = require_double(header, "theta");
  cfg.min_sessions_before_prune = require_uint(header, "min_sessions_before_prune");
  cfg.subset_size = require_uint(header, "subset_size");

  KnowledgePool pool(cfg);
  pool.iteration_ = require_uint(header, "iteration");
  pool.next_id_ = require_uint(header, "next_id");

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("snapshot line " + std::to_string(lineno) + ": " + e.what());
    }
    if (rec.value("record", "") != "fragment") {
      throw ValidationError("snapshot line " + std::to_string(lineno) + ": expected fragment");
    }
    Fragment f;
    f.id = FragmentId{require_uint(rec, "id")};
    f.text = rec.at("text").get<std::string>();
    f.source = rec.at("source").get<std::string>();
    f.value = require_double(rec, "value");
    f.session_count = require_uint(rec, "session_count");
    f.feedback_count = require_uint(rec, "feedback_count");
    f.created_iteration = require_uint(rec, "created_iteration");
    f.alive = rec.at("alive").get<bool>();
    if (f.id.value == 0 || f.id.value >= pool.next_id_) {
      throw ValidationError("snapshot line " + std::to_string(lineno) + ": id out of range");
    }
    if (f.alive) pool.index_alive(f);
    const FragmentId id = f.id;
    if (!pool.fragments_.emplace(id, std::move(f)).second) {
      throw ValidationError("snapshot line " + std::to_string(lineno) + ": duplicate id");
    }
  }
  return pool;
}

}  // namespace coem
