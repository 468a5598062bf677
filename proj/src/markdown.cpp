#include <cctype>
#include <regex>
#include <sstream>

#include "kt/ingest.hpp"

namespace kt {

namespace {

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

std::size_t leading_spaces(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  return i;
}

bool is_rule_line(std::string_view line) {
  const std::string_view t = trim(line);
  if (t.size() < 3) return false;
  const char c = t[0];
  if (c != '-' && c != '*' && c != '_' && c != '=') return false;
  int marks = 0;
  for (char ch : t) {
    if (ch == c) {
      ++marks;
    } else if (ch != ' ') {
      return false;
    }
  }
  return marks >= 3;
}

std::string strip_block_markers(std::string_view line) {
  std::size_t i = leading_spaces(line);
  // blockquotes, possibly nested
  while (i < line.size() && line[i] == '>') {
    ++i;
    while (i < line.size() && line[i] == ' ') ++i;
  }
  std::string_view rest = line.substr(i);

  // ATX heading
  std::size_t hashes = 0;
  while (hashes < rest.size() && rest[hashes] == '#') ++hashes;
  if (hashes >= 1 && hashes <= 6 && (hashes == rest.size() || rest[hashes] == ' ')) {
    rest = trim(rest.substr(hashes));
    while (!rest.empty() && rest.back() == '#') rest.remove_suffix(1);
    return std::string(trim(rest));
  }

  // bullet or ordered list marker
  if (rest.size() >= 2 && (rest[0] == '-' || rest[0] == '*' || rest[0] == '+') &&
      rest[1] == ' ') {
    rest = rest.substr(2);
  } else {
    std::size_t digits = 0;
    while (digits < rest.size() && std::isdigit(static_cast<unsigned char>(rest[digits]))) {
      ++digits;
    }
    if (digits > 0 && digits + 1 < rest.size() && (rest[digits] == '.' || rest[digits] == ')') &&
        rest[digits + 1] == ' ') {
      rest = rest.substr(digits + 2);
    }
  }
  if (starts_with(rest, "[ ] ") || starts_with(rest, "[x] ") || starts_with(rest, "[X] ")) {
    rest = rest.substr(4);
  }
  return std::string(rest);
}

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || (static_cast<unsigned char>(c) >= 0x80);
}

std::string strip_inline(const std::string& line) {
  static const std::regex image(R"(!\[([^\]]*)\]\([^)]*\))");
  static const std::regex link(R"(\[([^\]]+)\]\([^)]*\))");
  static const std::regex ref_link(R"(\[([^\]]+)\]\[[^\]]*\])");
  static const std::regex autolink(R"(<((?:https?|mailto):[^>\s]+)>)");
  static const std::regex html_tag(R"(</?[A-Za-z][A-Za-z0-9-]*(?:\s[^<>]*)?/?>)");

  std::string s = std::regex_replace(line, image, "$1");
  s = std::regex_replace(s, link, "$1");
  s = std::regex_replace(s, ref_link, "$1");
  s = std::regex_replace(s, autolink, "$1");
  s = std::regex_replace(s, html_tag, "");

  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '`' || c == '*') continue;
    if (c == '~' && i + 1 < s.size() && s[i + 1] == '~') {
      ++i;
      continue;
    }
    if (c == '_') {
      const bool word_before = i > 0 && is_word_char(s[i - 1]);
      const bool word_after = i + 1 < s.size() && is_word_char(s[i + 1]);
      if (!(word_before && word_after)) continue;
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::string strip_markdown(std::string_view markdown) {
  std::istringstream in{std::string(markdown)};
  std::string out;
  std::string line;
  bool in_fence = false;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string_view view = std::string_view(line).substr(leading_spaces(line));
    if (starts_with(view, "```") || starts_with(view, "~~~")) {
      in_fence = !in_fence;
      continue;
    }
    std::string text;
    if (in_fence) {
      text = line;
    } else if (!is_rule_line(line)) {
      text = strip_inline(strip_block_markers(line));
    }
    if (!first) out.push_back('\n');
    out += text;
    first = false;
  }
  return out;
}

}  // namespace kt
