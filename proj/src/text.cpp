#include "kt/text.hpp"

#include <algorithm>
#include <cctype>

namespace kt {
namespace utf8 {

namespace {
constexpr char32_t kReplacement = 0xFFFD;

bool is_continuation(unsigned char byte) { return (byte & 0xC0) == 0x80; }
}  // namespace

char32_t decode(std::string_view text, std::size_t pos, std::size_t& length) {
  const auto lead = static_cast<unsigned char>(text[pos]);
  length = 1;
  if (lead < 0x80) return lead;

  std::size_t need = 0;
  char32_t cp = 0;
  char32_t min_value = 0;
  if ((lead & 0xE0) == 0xC0) {
    need = 1;
    cp = lead & 0x1F;
    min_value = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    need = 2;
    cp = lead & 0x0F;
    min_value = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    need = 3;
    cp = lead & 0x07;
    min_value = 0x10000;
  } else {
    return kReplacement;
  }
  for (std::size_t i = 1; i <= need; ++i) {
    if (pos + i >= text.size()) return kReplacement;
    const auto byte = static_cast<unsigned char>(text[pos + i]);
    if (!is_continuation(byte)) return kReplacement;
    cp = (cp << 6) | (byte & 0x3F);
  }
  if (cp < min_value || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return kReplacement;
  length = need + 1;
  return cp;
}

void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::size_t count_code_points(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t len = 0;
    decode(text, pos, len);
    pos += len;
    ++n;
  }
  return n;
}

bool is_whitespace(char32_t cp) {
  switch (cp) {
    case U' ':
    case U'\t':
    case U'\n':
    case U'\v':
    case U'\f':
    case U'\r':
    case 0x85:
    case 0xA0:
    case 0x1680:
    case 0x2028:
    case 0x2029:
    case 0x202F:
    case 0x205F:
    case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

bool is_cjk(char32_t cp) {
  return (cp >= 0x2E80 && cp <= 0x2FDF)     // radicals
         || (cp >= 0x3001 && cp <= 0x303F)  // CJK symbols and punctuation
         || (cp >= 0x3040 && cp <= 0x30FF)  // hiragana, katakana
         || (cp >= 0x3100 && cp <= 0x31FF)  // bopomofo, kanbun
         || (cp >= 0x3400 && cp <= 0x4DBF)  // ext A
         || (cp >= 0x4E00 && cp <= 0x9FFF)  // unified ideographs
         || (cp >= 0xAC00 && cp <= 0xD7AF)  // hangul syllables
         || (cp >= 0xF900 && cp <= 0xFAFF)  // compatibility ideographs
         || (cp >= 0xFF00 && cp <= 0xFFEF)  // full-width forms
         || (cp >= 0x20000 && cp <= 0x3134F);
}

}  // namespace utf8

std::string sanitize_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t pos = 0; pos < raw.size();) {
    std::size_t len = 0;
    const char32_t cp = utf8::decode(raw, pos, len);
    const bool control = (cp < 0x20 && cp != U'\n' && cp != U'\t') || cp == 0x7F ||
                         (cp >= 0x80 && cp <= 0x9F);
    if (!control) {
      if (cp == 0xFFFD || len > 1) {
        utf8::append(out, cp);
      } else {
        out.push_back(raw[pos]);
      }
    }
    pos += len;
  }
  return out;
}

std::vector<TokenSpan> tokenize(std::string_view text) {
  std::vector<TokenSpan> tokens;
  std::size_t run_start = 0;
  bool in_run = false;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t len = 0;
    const char32_t cp = utf8::decode(text, pos, len);
    const bool space = utf8::is_whitespace(cp);
    const bool cjk = !space && utf8::is_cjk(cp);
    if (in_run && (space || cjk)) {
      tokens.push_back({run_start, pos});
      in_run = false;
    }
    if (cjk) {
      tokens.push_back({pos, pos + len});
    } else if (!space && !in_run) {
      run_start = pos;
      in_run = true;
    }
    pos += len;
  }
  if (in_run) tokens.push_back({run_start, text.size()});
  return tokens;
}

std::string_view trim(std::string_view text) {
  std::size_t begin = 0;
  std::size_t end = text.size();
  while (begin < end) {
    std::size_t len = 0;
    if (!utf8::is_whitespace(utf8::decode(text, begin, len))) break;
    begin += len;
  }
  while (end > begin) {
    // step back to the lead byte of the last code point
    std::size_t lead = end - 1;
    while (lead > begin && (static_cast<unsigned char>(text[lead]) & 0xC0) == 0x80) --lead;
    std::size_t len = 0;
    if (!utf8::is_whitespace(utf8::decode(text, lead, len)) || lead + len != end) break;
    end = lead;
  }
  return text.substr(begin, end - begin);
}

std::string to_lower_ascii(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

}  // namespace kt
