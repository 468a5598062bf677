#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kt/backend.hpp"
#include "kt/ingest.hpp"

namespace kt {

struct AgentConfig {
  AgentRole role = AgentRole::filter;
  std::string model_name;
  std::string prompt_template;
  double temperature = 0.0;
  int max_output_tokens = 512;
  std::chrono::milliseconds timeout{120000};
};

class TemplateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Placeholders that the template for `role` must contain.
std::span<const std::string_view> required_placeholders(AgentRole role);

/// Throws TemplateError naming the first missing placeholder, or
/// std::invalid_argument for out-of-range generation parameters.
void validate_agent_config(const AgentConfig& cfg);

/// Substitutes `{name}` placeholders in one pass; substituted values are never
/// rescanned. An unbound `{identifier}` is a TemplateError. Braces that do not
/// enclose an identifier are copied through.
std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string>& bindings);

/// Built-in prompt template for a role (shipped under assets/prompts).
std::string_view default_prompt(AgentRole role);

/// Defaults: filter/judge at temperature 0.0, refine/divergent 0.7, answer 0.3.
AgentConfig default_agent_config(AgentRole role, const std::string& model_name);

/// One active configuration per role. Readers get an immutable snapshot, so an
/// update never affects a call already in flight.
class AgentRegistry {
 public:
  explicit AgentRegistry(const std::string& chat_model = "deepseek-r1:7b");

  std::shared_ptr<const AgentConfig> get(AgentRole role) const;
  /// Validates, then atomically replaces the role's configuration.
  void set(AgentConfig cfg);

  /// Replaces each role's template with `<dir>/<role>.txt` when that file exists.
  void load_prompt_overrides(const std::filesystem::path& dir);

 private:
  mutable std::mutex mutex_;
  std::map<AgentRole, std::shared_ptr<const AgentConfig>> configs_;
};

// --- agent operations ------------------------------------------------------

struct FilterVerdict {
  FilterDecision decision = FilterDecision::keep;
  /// Set when the model reply could not be parsed or the backend failed.
  std::optional<std::string> warning;
};

struct Judgement {
  bool helpful = true;
  std::string reason;
  std::optional<std::string> warning;
};

/// Reply parse for the Y/N agents: 'Y'/'N' from the first non-space character
/// (a leading "yes"/"no" word counts as a whole), remainder trimmed of
/// separators. nullopt when the reply starts with anything else.
/// Removes <think>...</think> spans; an unterminated <think> runs to the end.
std::string strip_reasoning(std::string_view text);

struct YesNoReply {
  bool yes = false;
  std::string remainder;
};
std::optional<YesNoReply> parse_yes_no(std::string_view reply);

FilterVerdict filter_snippet(InferenceBackend& backend, const AgentConfig& cfg,
                             const std::string& snippet_text);

/// Keeps the last `window` messages.
std::vector<ChatMessage> truncate_history(std::span<const ChatMessage> history,
                                          std::size_t window);

std::string refine_query(InferenceBackend& backend, const AgentConfig& cfg, const std::string& query,
                         std::span<const ChatMessage> history, std::size_t window = 6);

/// Splits a model reply into candidate queries: one per line, list markers
/// removed, deduplicated case-insensitively, the refined query itself dropped,
/// at most `m` kept.
std::vector<std::string> parse_divergent_queries(std::string_view reply,
                                                 const std::string& refined_query, int m);

std::vector<std::string> divergent_queries(InferenceBackend& backend, const AgentConfig& cfg,
                                           const std::string& refined_query,
                                           std::span<const std::string> snippets, int m);

Judgement judge_snippet(InferenceBackend& backend, const AgentConfig& cfg,
                        const std::string& query, const std::string& snippet_text);

// --- answer streaming ------------------------------------------------------

enum class StreamKind { reasoning, answer };

struct StreamSegment {
  StreamKind kind;
  std::string text;
};

/// Splits streamed model output into reasoning (inside <think>...</think>) and
/// answer text. Tags may be split across fragments; tags themselves are not
/// emitted.
class ThinkSplitter {
 public:
  std::vector<StreamSegment> feed(std::string_view fragment);
  std::vector<StreamSegment> finish();

 private:
  void emit(std::vector<StreamSegment>& out, std::string_view text) const;

  std::string pending_;
  bool in_think_ = false;
};

struct ContextSnippet {
  std::string text;
  std::string provenance;
};

struct AnswerEvent {
  enum class Type { reasoning, answer, error } type;
  std::string text;
};

using AnswerSink = std::function<void(const AnswerEvent&)>;

struct AnswerResult {
  std::string answer;
  std::string reasoning;
  bool no_context = false;
  /// Backend failure message; partial answer/reasoning text is kept.
  std::optional<std::string> error;
};

/// Numbered context block: "[1] (source: ...)\n<text>\n\n[2] ...".
std::string format_context(std::span<const ContextSnippet> snippets);

/// Streams the answer to `sink`. `prompt_override`, when set, replaces the
/// rendered answer template (used by the MCQ harness).
AnswerResult generate_answer(InferenceBackend& backend, const AgentConfig& cfg,
                             const std::string& query, std::span<const ContextSnippet> snippets,
                             const AnswerSink& sink,
                             const std::optional<std::string>& prompt_override = std::nullopt);

}  // namespace kt
