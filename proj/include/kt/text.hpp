#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kt {

/// Byte range [begin, end) of one token inside the source text.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const TokenSpan&) const = default;
};

namespace utf8 {

/// Decodes the code point starting at `pos`. Invalid or truncated sequences
/// decode to U+FFFD and consume one byte.
char32_t decode(std::string_view text, std::size_t pos, std::size_t& length);

void append(std::string& out, char32_t cp);

std::size_t count_code_points(std::string_view text);

bool is_whitespace(char32_t cp);

/// Han, kana, Hangul and full-width CJK forms: each such code point is its own token.
bool is_cjk(char32_t cp);

}  // namespace utf8

/// Re-encodes `raw` as valid UTF-8, replacing malformed bytes with U+FFFD and
/// dropping control characters other than '\n' and '\t'.
std::string sanitize_text(std::string_view raw);

/// Splits text into tokens: maximal runs of non-whitespace, non-CJK code points
/// form one token; every CJK code point is a token of its own.
std::vector<TokenSpan> tokenize(std::string_view text);

std::string_view trim(std::string_view text);

std::string to_lower_ascii(std::string_view text);

}  // namespace kt
