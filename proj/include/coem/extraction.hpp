#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace coem {

class Generator;

struct Candidate {
  std::string text;
  double confidence = 0.0;  // metadata only; new fragments still start at 1
};

struct ExtractionResult {
  std::vector<Candidate> candidates;
  std::vector<std::string> warnings;
};

// Lowercased terms; multi-word terms match as contiguous token runs.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(const std::vector<std::string>& terms);

  // One term per line; '#' starts a comment; blank lines ignored.
  static Lexicon load(const std::filesystem::path& path);
  static Lexicon parse(std::string_view contents);

  bool empty() const { return terms_.empty(); }
  std::size_t size() const { return terms_.size(); }

  // Number of term occurrences in a tokenized sentence.
  std::size_t count_matches(const std::vector<std::string>& tokens) const;

 private:
  std::set<std::vector<std::string>> terms_;
  std::size_t longest_ = 0;
};

inline constexpr std::size_t kMinSentenceTokens = 5;

// Splits on . ! ? and newlines; keeps sentences with at least one lexicon term
// and at least kMinSentenceTokens tokens. confidence = matches / tokens.
ExtractionResult extract_rule_based(std::string_view user_input, const Lexicon& lexicon);

// Prompts the backend with the extraction template and parses a JSON list of
// strings or {"text", "confidence"} objects. Malformed replies soft-fail to an
// empty result with a warning. Backend errors propagate.
ExtractionResult extract_with_judge(std::string_view user_input, Generator& backend,
                                    const std::string& prompt_template);

class Extractor {
 public:
  virtual ~Extractor() = default;
  virtual ExtractionResult extract(std::string_view user_input) = 0;
};

class RuleBasedExtractor final : public Extractor {
 public:
  explicit RuleBasedExtractor(Lexicon lexicon);
  ExtractionResult extract(std::string_view user_input) override {
    return extract_rule_based(user_input, lexicon_);
  }

 private:
  Lexicon lexicon_;
};

class JudgeExtractor final : public Extractor {
 public:
  JudgeExtractor(Generator& backend, std::string prompt_template)
      : backend_(backend), template_(std::move(prompt_template)) {}
  ExtractionResult extract(std::string_view user_input) override {
    return extract_with_judge(user_input, backend_, template_);
  }

 private:
  Generator& backend_;
  std::string template_;
};

}  // namespace coem
