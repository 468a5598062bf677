#include "kt/agents.hpp"

#include <spdlog/spdlog.h>

#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "kt/default_prompts.hpp"
#include "kt/text.hpp"

namespace kt {

namespace {

constexpr std::array<std::string_view, 1> kFilterPlaceholders{"snippet"};
constexpr std::array<std::string_view, 2> kRefinePlaceholders{"query", "history"};
constexpr std::array<std::string_view, 3> kDivergentPlaceholders{"query", "snippets", "m"};
constexpr std::array<std::string_view, 2> kJudgePlaceholders{"query", "snippet"};
constexpr std::array<std::string_view, 2> kAnswerPlaceholders{"query", "snippets"};

bool is_identifier(std::string_view name) {
  if (name.empty()) return false;
  if (!(std::isalpha(static_cast<unsigned char>(name[0])) || name[0] == '_')) return false;
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

CompletionRequest make_request(const AgentConfig& cfg, std::string prompt,
                               std::map<std::string, std::string> bindings) {
  CompletionRequest req;
  req.model = cfg.model_name;
  req.messages.push_back({MessageRole::user, std::move(prompt)});
  req.temperature = cfg.temperature;
  req.max_output_tokens = cfg.max_output_tokens;
  req.timeout = cfg.timeout;
  req.role = cfg.role;
  req.bindings = std::move(bindings);
  return req;
}

std::string call(InferenceBackend& backend, const AgentConfig& cfg,
                 std::map<std::string, std::string> bindings) {
  std::string prompt = render_template(cfg.prompt_template, bindings);
  return backend.complete(make_request(cfg, std::move(prompt), std::move(bindings)));
}

void require_role(const AgentConfig& cfg, AgentRole role) {
  if (cfg.role != role) {
    throw std::invalid_argument("agent config for role '" + std::string(to_string(cfg.role)) +
                                "' used as '" + std::string(to_string(role)) + "'");
  }
}

std::string strip_list_marker(std::string_view line) {
  line = trim(line);
  if (line.starts_with("- ") || line.starts_with("* ") || line.starts_with("+ ")) {
    line.remove_prefix(2);
  } else if (line.starts_with("\xE2\x80\xA2")) {  // bullet
    line.remove_prefix(3);
  } else {
    std::size_t digits = 0;
    while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits]))) {
      ++digits;
    }
    if (digits > 0 && digits < line.size() && (line[digits] == '.' || line[digits] == ')')) {
      line.remove_prefix(digits + 1);
    } else if (digits > 0 && line.substr(digits).starts_with("\xE3\x80\x81")) {  // 、
      line.remove_prefix(digits + 3);
    }
  }
  return std::string(trim(line));
}

}  // namespace

// Drops <think>...</think> spans; an unterminated <think> runs to the end.
std::string strip_reasoning(std::string_view text) {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t open = text.find("<think>", pos);
    if (open == std::string_view::npos) {
      out.append(text.substr(pos));
      break;
    }
    out.append(text.substr(pos, open - pos));
    const std::size_t close = text.find("</think>", open);
    if (close == std::string_view::npos) break;
    pos = close + 8;
  }
  return out;
}

std::span<const std::string_view> required_placeholders(AgentRole role) {
  switch (role) {
    case AgentRole::filter:
      return kFilterPlaceholders;
    case AgentRole::query_refine:
      return kRefinePlaceholders;
    case AgentRole::divergent:
      return kDivergentPlaceholders;
    case AgentRole::judge:
      return kJudgePlaceholders;
    case AgentRole::answer:
      return kAnswerPlaceholders;
  }
  return {};
}

void validate_agent_config(const AgentConfig& cfg) {
  for (std::string_view name : required_placeholders(cfg.role)) {
    const std::string token = "{" + std::string(name) + "}";
    if (cfg.prompt_template.find(token) == std::string::npos) {
      throw TemplateError("prompt template for '" + std::string(to_string(cfg.role)) +
                          "' is missing placeholder " + token);
    }
  }
  if (!std::isfinite(cfg.temperature) || cfg.temperature < 0.0) {
    throw std::invalid_argument("temperature must be a finite value >= 0");
  }
  if (cfg.max_output_tokens < 1) throw std::invalid_argument("max_output_tokens must be >= 1");
  if (cfg.timeout.count() <= 0) throw std::invalid_argument("timeout must be positive");
  if (cfg.model_name.empty()) throw std::invalid_argument("model_name must not be empty");
}

std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& bindings) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const std::size_t open = tmpl.find('{', pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const std::size_t close = tmpl.find('}', open + 1);
    if (close == std::string_view::npos) {
      out.append(tmpl.substr(open));
      break;
    }
    const std::string_view name = tmpl.substr(open + 1, close - open - 1);
    if (!is_identifier(name)) {
      out.push_back('{');
      pos = open + 1;
      continue;
    }
    const auto it = bindings.find(std::string(name));
    if (it == bindings.end()) {
      throw TemplateError("unbound placeholder {" + std::string(name) + "}");
    }
    out.append(it->second);
    pos = close + 1;
  }
  return out;
}

std::string_view default_prompt(AgentRole role) {
  switch (role) {
    case AgentRole::filter:
      return prompts::kFilter;
    case AgentRole::query_refine:
      return prompts::kQueryRefine;
    case AgentRole::divergent:
      return prompts::kDivergent;
    case AgentRole::judge:
      return prompts::kJudge;
    case AgentRole::answer:
      return prompts::kAnswer;
  }
  return {};
}

AgentConfig default_agent_config(AgentRole role, const std::string& model_name) {
  AgentConfig cfg;
  cfg.role = role;
  cfg.model_name = model_name;
  cfg.prompt_template = std::string(default_prompt(role));
  switch (role) {
    case AgentRole::filter:
      cfg.temperature = 0.0;
      cfg.max_output_tokens = 8;
      break;
    case AgentRole::judge:
      cfg.temperature = 0.0;
      cfg.max_output_tokens = 256;
      break;
    case AgentRole::query_refine:
      cfg.temperature = 0.7;
      cfg.max_output_tokens = 256;
      break;
    case AgentRole::divergent:
      cfg.temperature = 0.7;
      cfg.max_output_tokens = 512;
      break;
    case AgentRole::answer:
      cfg.temperature = 0.3;
      cfg.max_output_tokens = 4096;
      break;
  }
  return cfg;
}

AgentRegistry::AgentRegistry(const std::string& chat_model) {
  for (AgentRole role : kAllAgentRoles) {
    configs_[role] = std::make_shared<const AgentConfig>(default_agent_config(role, chat_model));
  }
}

std::shared_ptr<const AgentConfig> AgentRegistry::get(AgentRole role) const {
  std::lock_guard lock(mutex_);
  return configs_.at(role);
}

void AgentRegistry::set(AgentConfig cfg) {
  validate_agent_config(cfg);
  auto next = std::make_shared<const AgentConfig>(std::move(cfg));
  std::lock_guard lock(mutex_);
  configs_[next->role] = std::move(next);
}

void AgentRegistry::load_prompt_overrides(const std::filesystem::path& dir) {
  for (AgentRole role : kAllAgentRoles) {
    const auto path = dir / (std::string(to_string(role)) + ".txt");
    std::ifstream in(path);
    if (!in) continue;
    std::ostringstream text;
    text << in.rdbuf();
    AgentConfig cfg = *get(role);
    cfg.prompt_template = text.str();
    set(std::move(cfg));
  }
}

// ---------------------------------------------------------------------------

std::optional<YesNoReply> parse_yes_no(std::string_view reply) {
  const std::string cleaned = strip_reasoning(reply);
  std::string_view t = trim(cleaned);
  if (t.empty()) return std::nullopt;

  const char first = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
  if (first != 'Y' && first != 'N') return std::nullopt;

  YesNoReply out;
  out.yes = first == 'Y';
  const std::string lower = to_lower_ascii(t.substr(0, 4));
  std::size_t skip = 1;
  auto whole_word = [&](std::string_view word) {
    return lower.starts_with(word) &&
           (t.size() == word.size() || !std::isalpha(static_cast<unsigned char>(t[word.size()])));
  };
  if (whole_word("yes")) {
    skip = 3;
  } else if (whole_word("no")) {
    skip = 2;
  } else if (t.size() > 1 && std::isalpha(static_cast<unsigned char>(t[1]))) {
    skip = 0;  // e.g. "Not relevant": keep the word in the reason
  }
  std::string_view rest = t.substr(skip);
  auto is_separator = [](std::string_view s) {
    static constexpr std::string_view kDashes[] = {"\xE2\x80\x94", "\xE2\x80\x93",
                                                   "\xEF\xBC\x9A"};  // U+2014, U+2013, U+FF1A
    for (auto d : kDashes) {
      if (s.starts_with(d)) return d.size();
    }
    if (!s.empty() && (s[0] == ':' || s[0] == '-' || s[0] == '.' || s[0] == ',' || s[0] == ';' ||
                       s[0] == ')' || s[0] == ' ' || s[0] == '\t' || s[0] == '\n')) {
      return std::size_t{1};
    }
    return std::size_t{0};
  };
  if (skip > 0) {
    for (std::size_t n; (n = is_separator(rest)) > 0;) rest.remove_prefix(n);
  }
  out.remainder = std::string(trim(rest));
  return out;
}

FilterVerdict filter_snippet(InferenceBackend& backend, const AgentConfig& cfg,
                             const std::string& snippet_text) {
  require_role(cfg, AgentRole::filter);
  std::string reply;
  try {
    reply = call(backend, cfg, {{"snippet", snippet_text}});
  } catch (const BackendError& e) {
    spdlog::warn("filter agent unavailable, keeping snippet: {}", e.what());
    return {FilterDecision::keep, std::string("filter agent unavailable: ") + e.what()};
  }
  const auto parsed = parse_yes_no(reply);
  if (!parsed) {
    spdlog::warn("filter agent reply not Y/N, keeping snippet: '{}'", reply);
    return {FilterDecision::keep, "unparseable filter reply: " + reply};
  }
  return {parsed->yes ? FilterDecision::keep : FilterDecision::drop, std::nullopt};
}

std::vector<ChatMessage> truncate_history(std::span<const ChatMessage> history,
                                          std::size_t window) {
  const std::size_t start = history.size() > window ? history.size() - window : 0;
  return {history.begin() + static_cast<std::ptrdiff_t>(start), history.end()};
}

std::string refine_query(InferenceBackend& backend, const AgentConfig& cfg, const std::string& query,
                         std::span<const ChatMessage> history, std::size_t window) {
  require_role(cfg, AgentRole::query_refine);
  std::string history_text;
  for (const ChatMessage& m : truncate_history(history, window)) {
    history_text += std::string(to_string(m.role)) + ": " + m.content + "\n";
  }
  if (history_text.empty()) history_text = "(none)";

  std::string reply;
  try {
    reply = call(backend, cfg, {{"query", query}, {"history", history_text}});
  } catch (const BackendError& e) {
    spdlog::warn("query refinement unavailable, using original query: {}", e.what());
    return query;
  }
  const std::string cleaned = strip_reasoning(reply);
  const std::string_view refined = trim(cleaned);
  return refined.empty() ? query : std::string(refined);
}

std::vector<std::string> parse_divergent_queries(std::string_view reply,
                                                 const std::string& refined_query, int m) {
  std::vector<std::string> out;
  if (m <= 0) return out;
  const std::string cleaned = strip_reasoning(reply);
  std::set<std::string> seen{to_lower_ascii(trim(refined_query))};
  std::istringstream lines(cleaned);
  for (std::string line; std::getline(lines, line);) {
    std::string q = strip_list_marker(line);
    if (q.empty()) continue;
    if (!seen.insert(to_lower_ascii(q)).second) continue;
    out.push_back(std::move(q));
    if (static_cast<int>(out.size()) == m) break;
  }
  return out;
}

std::vector<std::string> divergent_queries(InferenceBackend& backend, const AgentConfig& cfg,
                                           const std::string& refined_query,
                                           std::span<const std::string> snippets, int m) {
  require_role(cfg, AgentRole::divergent);
  if (m < 1) throw std::invalid_argument("divergent query count m must be >= 1");
  std::string snippet_text;
  for (std::size_t i = 0; i < snippets.size(); ++i) {
    snippet_text += "[" + std::to_string(i + 1) + "] " + snippets[i] + "\n";
  }
  if (snippet_text.empty()) snippet_text = "(none)";
  try {
    const std::string reply = call(
        backend, cfg,
        {{"query", refined_query}, {"snippets", snippet_text}, {"m", std::to_string(m)}});
    return parse_divergent_queries(reply, refined_query, m);
  } catch (const BackendError& e) {
    spdlog::warn("divergent thinking agent unavailable: {}", e.what());
    return {};
  }
}

Judgement judge_snippet(InferenceBackend& backend, const AgentConfig& cfg,
                        const std::string& query, const std::string& snippet_text) {
  require_role(cfg, AgentRole::judge);
  std::string reply;
  try {
    reply = call(backend, cfg, {{"query", query}, {"snippet", snippet_text}});
  } catch (const BackendError& e) {
    spdlog::warn("judge agent unavailable, keeping snippet: {}", e.what());
    return {true, "(judge unavailable)", std::string(e.what())};
  }
  const auto parsed = parse_yes_no(reply);
  if (!parsed) {
    spdlog::warn("judge reply not Y/N, keeping snippet: '{}'", reply);
    return {true, std::string(trim(strip_reasoning(reply))), "unparseable judge reply"};
  }
  return {parsed->yes, parsed->remainder, std::nullopt};
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::string_view kOpenTag = "<think>";
constexpr std::string_view kCloseTag = "</think>";

// Length of the longest suffix of `text` that is a proper prefix of `tag`.
std::size_t partial_tag_suffix(std::string_view text, std::string_view tag) {
  for (std::size_t n = std::min(text.size(), tag.size() - 1); n > 0; --n) {
    if (text.substr(text.size() - n) == tag.substr(0, n)) return n;
  }
  return 0;
}
}  // namespace

void ThinkSplitter::emit(std::vector<StreamSegment>& out, std::string_view text) const {
  if (text.empty()) return;
  const StreamKind kind = in_think_ ? StreamKind::reasoning : StreamKind::answer;
  if (!out.empty() && out.back().kind == kind) {
    out.back().text.append(text);
  } else {
    out.push_back({kind, std::string(text)});
  }
}

std::vector<StreamSegment> ThinkSplitter::feed(std::string_view fragment) {
  pending_.append(fragment);
  std::vector<StreamSegment> out;
  std::string_view view = pending_;
  for (;;) {
    const std::string_view tag = in_think_ ? kCloseTag : kOpenTag;
    const std::size_t hit = view.find(tag);
    if (hit == std::string_view::npos) {
      const std::size_t keep = partial_tag_suffix(view, tag);
      emit(out, view.substr(0, view.size() - keep));
      pending_ = std::string(view.substr(view.size() - keep));
      return out;
    }
    emit(out, view.substr(0, hit));
    in_think_ = !in_think_;
    view.remove_prefix(hit + tag.size());
  }
}

std::vector<StreamSegment> ThinkSplitter::finish() {
  std::vector<StreamSegment> out;
  emit(out, pending_);
  pending_.clear();
  return out;
}

std::string format_context(std::span<const ContextSnippet> snippets) {
  if (snippets.empty()) return "(no reference passages)";
  std::string out;
  for (std::size_t i = 0; i < snippets.size(); ++i) {
    if (i > 0) out += "\n\n";
    out += "[" + std::to_string(i + 1) + "] (source: " + snippets[i].provenance + ")\n" +
           snippets[i].text;
  }
  return out;
}

AnswerResult generate_answer(InferenceBackend& backend, const AgentConfig& cfg,
                             const std::string& query, std::span<const ContextSnippet> snippets,
                             const AnswerSink& sink,
                             const std::optional<std::string>& prompt_override) {
  require_role(cfg, AgentRole::answer);
  std::map<std::string, std::string> bindings{{"query", query},
                                              {"snippets", format_context(snippets)},
                                              {"snippet_count", std::to_string(snippets.size())}};
  std::string prompt =
      prompt_override ? *prompt_override : render_template(cfg.prompt_template, bindings);

  AnswerResult result;
  result.no_context = snippets.empty();
  ThinkSplitter splitter;
  auto deliver = [&](const std::vector<StreamSegment>& segments) {
    for (const StreamSegment& s : segments) {
      if (s.kind == StreamKind::reasoning) {
        result.reasoning += s.text;
        if (sink) sink({AnswerEvent::Type::reasoning, s.text});
      } else {
        result.answer += s.text;
        if (sink) sink({AnswerEvent::Type::answer, s.text});
      }
    }
  };

  try {
    bool streamed = false;
    const std::string full =
        backend.complete(make_request(cfg, std::move(prompt), std::move(bindings)),
                         [&](std::string_view fragment) {
                           streamed = true;
                           deliver(splitter.feed(fragment));
                         });
    if (!streamed) deliver(splitter.feed(full));
    deliver(splitter.finish());
  } catch (const BackendError& e) {
    deliver(splitter.finish());
    result.error = e.what();
    if (sink) sink({AnswerEvent::Type::error, e.what()});
  }
  return result;
}

}  // namespace kt
