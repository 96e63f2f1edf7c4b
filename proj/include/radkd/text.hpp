#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace radkd {

/// Trims and collapses every whitespace run to a single space.
std::string normalize_whitespace(std::string_view s);

std::string to_lower(std::string_view s);

std::string join(std::span<const std::string> parts, std::string_view sep);

/// Lowercased alphanumeric words; everything else separates tokens. Used by
/// the student tokenizer, the mock teacher's marker rules and the
/// term-frequency embedder.
std::vector<std::string> word_tokens(std::string_view s);

}  // namespace radkd
