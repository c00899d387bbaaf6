#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Small text helpers shared by the pool (dedup keys), the selector
// (token overlap), the extractor and the attribution scorers.
namespace coem::text {

std::string trim(std::string_view s);

// Lowercased (ASCII), whitespace-collapsed, trimmed. This is the dedup key.
std::string normalize(std::string_view s);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Lowercased runs of alphanumerics. Bytes >= 0x80 count as word characters so
// UTF-8 text is not shredded.
std::vector<std::string> tokenize(std::string_view s);

// Text up to the first clause delimiter (, ; : . ! ? or newline), trimmed.
// Falls back to the whole trimmed text when the first clause is empty.
std::string first_clause(std::string_view s);

// Replaces every {{key}} in tmpl. Unknown placeholders are left untouched.
std::string render(std::string_view tmpl,
                   const std::vector<std::pair<std::string, std::string>>& vars);

// "%.17g"; round-trips every finite double.
std::string format_double(double v);

}  // namespace coem::text
