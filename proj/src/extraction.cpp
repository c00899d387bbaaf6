#include "coem/extraction.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "coem/backend.hpp"
#include "coem/errors.hpp"
#include "coem/text.hpp"

namespace coem {

Lexicon::Lexicon(const std::vector<std::string>& terms) {
  for (const auto& term : terms) {
    auto tokens = text::tokenize(term);
    if (tokens.empty()) continue;
    longest_ = std::max(longest_, tokens.size());
    terms_.insert(std::move(tokens));
  }
}

Lexicon Lexicon::parse(std::string_view contents) {
  std::vector<std::string> terms;
  std::istringstream in{std::string(contents)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto term = text::trim(line);
    if (!term.empty()) terms.push_back(std::move(term));
  }
  return Lexicon(terms);
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot read lexicon file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::size_t Lexicon::count_matches(const std::vector<std::string>& tokens) const {
  std::size_t matches = 0;
  std::vector<std::string> window;
  for (std::size_t start = 0; start < tokens.size(); ++start) {
    window.clear();
    for (std::size_t len = 1; len <= longest_ && start + len <= tokens.size(); ++len) {
      window.push_back(tokens[start + len - 1]);
      if (terms_.contains(window)) ++matches;
    }
  }
  return matches;
}

RuleBasedExtractor::RuleBasedExtractor(Lexicon lexicon) : lexicon_(std::move(lexicon)) {
  if (lexicon_.empty()) throw ValidationError("rule-based extractor needs a non-empty lexicon");
}

ExtractionResult extract_rule_based(std::string_view input, const Lexicon& lexicon) {
  if (lexicon.empty()) throw ValidationError("rule-based extraction needs a non-empty lexicon");
  ExtractionResult result;
  std::unordered_set<std::string> seen;

  std::size_t start = 0;
  while (start < input.size()) {
    std::size_t end = input.find_first_of(".!?\n", start);
    if (end == std::string_view::npos) end = input.size();
    std::size_t stop = end;
    while (stop < input.size() && (input[stop] == '.' || input[stop] == '!' || input[stop] == '?')) {
      ++stop;
    }
    const std::string sentence = text::trim(input.substr(start, stop - start));
    start = std::max(stop, end + 1);

    const auto tokens = text::tokenize(sentence);
    if (tokens.size() < kMinSentenceTokens) continue;
    const auto matches = lexicon.count_matches(tokens);
    if (matches == 0) continue;
    std::string key;
    for (const auto& t : tokens) key += t + ' ';
    if (!seen.insert(key).second) continue;
    const double confidence =
        std::min(1.0, static_cast<double>(matches) / static_cast<double>(tokens.size()));
    result.candidates.push_back({sentence, confidence});
  }
  return result;
}

ExtractionResult extract_with_judge(std::string_view input, Generator& backend,
                                    const std::string& prompt_template) {
  ExtractionResult result;
  if (text::trim(input).empty()) return result;

  const std::string reply =
      backend.complete(text::render(prompt_template, {{"input", std::string(input)}}));

  const auto open = reply.find('[');
  const auto close = reply.rfind(']');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    result.warnings.push_back("extraction reply contains no list");
    return result;
  }
  const auto parsed =
      nlohmann::json::parse(reply.substr(open, close - open + 1), nullptr, false);
  if (parsed.is_discarded() || !parsed.is_array()) {
    result.warnings.push_back("extraction reply list is not valid JSON");
    return result;
  }

  std::unordered_set<std::string> seen;
  for (const auto& item : parsed) {
    std::string body;
    double confidence = 1.0;
    if (item.is_string()) {
      body = item.get<std::string>();
    } else if (item.is_object() && item.contains("text") && item["text"].is_string()) {
      body = item["text"].get<std::string>();
      if (item.contains("confidence") && item["confidence"].is_number()) {
        confidence = std::clamp(item["confidence"].get<double>(), 0.0, 1.0);
      }
    } else {
      result.warnings.push_back("skipped extraction item that is neither string nor object");
      continue;
    }
    body = text::trim(body);
    if (body.empty() || !seen.insert(text::normalize(body)).second) continue;
    result.candidates.push_back({std::move(body), confidence});
  }
  return result;
}

}  // namespace coem
