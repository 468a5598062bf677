#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "kt/agents.hpp"
#include "kt/backend.hpp"
#include "kt/kb.hpp"

namespace kt {

enum class PipelineMode { baseline, baseline_rs, addrep };

std::string_view to_string(PipelineMode mode);
PipelineMode parse_pipeline_mode(std::string_view name);

struct AddRepConfig {
  int topk_per_query = 3;
  int m = 3;
  double distance_threshold = 0.5;
  std::size_t history_window = 6;
  PipelineMode mode = PipelineMode::addrep;
  std::size_t judge_parallelism = 4;
  std::size_t retrieval_parallelism = 4;

  void validate() const;
};

namespace trace {
struct RefinedQuery {
  std::string query;
  bool operator==(const RefinedQuery&) const = default;
};
struct DivergentQuery {
  int index;  // 1-based
  std::string query;
  bool operator==(const DivergentQuery&) const = default;
};
struct Retrieval {
  std::string for_query;
  std::vector<RetrievalHit> hits;
  bool operator==(const Retrieval&) const = default;
};
struct ThresholdDrop {
  SnippetId snippet_id;
  double distance;
  bool operator==(const ThresholdDrop&) const = default;
};
struct Judgement {
  SnippetId snippet_id;
  bool helpful;
  std::string reason;
  bool operator==(const Judgement&) const = default;
};
struct ReasoningDelta {
  std::string text;
  bool operator==(const ReasoningDelta&) const = default;
};
struct AnswerDelta {
  std::string text;
  bool operator==(const AnswerDelta&) const = default;
};
struct Error {
  std::string message;
  bool operator==(const Error&) const = default;
};
}  // namespace trace

using TraceEvent =
    std::variant<trace::RefinedQuery, trace::DivergentQuery, trace::Retrieval,
                 trace::ThresholdDrop, trace::Judgement, trace::ReasoningDelta,
                 trace::AnswerDelta, trace::Error>;

/// Wire name of the event ("refined_query", "divergent_query", ...).
std::string_view event_type(const TraceEvent& event);

using TraceSink = std::function<void(const TraceEvent&)>;

struct UsedSnippet {
  RetrievalHit hit;
  std::string reason;
  bool operator==(const UsedSnippet&) const = default;
};

struct PipelineResult {
  PipelineMode mode = PipelineMode::addrep;
  std::string answer;
  std::string reasoning;
  /// Ascending by distance, ties by snippet id.
  std::vector<UsedSnippet> used_snippets;
  std::vector<TraceEvent> trace;
  bool no_context = true;
  int retrieval_calls = 0;
  /// Set when retrieval or answer generation failed; the trace then ends in an
  /// error event.
  std::optional<std::string> error;
};

struct PipelineRequest {
  std::string query;
  std::vector<ChatMessage> history;
  /// Replaces the answer agent's template. Receives the snippets that survived
  /// filtering, in the order they are handed to the answer agent.
  std::function<std::string(std::span<const UsedSnippet>)> answer_prompt;
};

/// Refine -> retrieve -> diverge -> retrieve each -> union/dedup -> threshold
/// -> judge -> answer, plus the two reduced baselines. Every step is recorded
/// in the trace and forwarded to the sink as it happens.
class Pipeline {
 public:
  Pipeline(InferenceBackend& backend, const AgentRegistry& agents)
      : backend_(backend), agents_(agents) {}

  /// Dispatches on cfg.mode. `retriever` may be null only for baseline.
  PipelineResult run(const PipelineRequest& request, Retriever* retriever,
                     const AddRepConfig& cfg, const TraceSink& sink = {}) const;

  PipelineResult run_addrep(const PipelineRequest& request, Retriever& retriever,
                            const AddRepConfig& cfg, const TraceSink& sink = {}) const;
  PipelineResult run_baseline(const PipelineRequest& request, const AddRepConfig& cfg,
                              const TraceSink& sink = {}) const;
  PipelineResult run_baseline_rs(const PipelineRequest& request, Retriever& retriever,
                                 const AddRepConfig& cfg, const TraceSink& sink = {}) const;

 private:
  void answer(const PipelineRequest& request, std::vector<UsedSnippet> used,
              PipelineResult& result, const std::function<void(TraceEvent)>& emit) const;

  InferenceBackend& backend_;
  const AgentRegistry& agents_;
};

/// Rebuilds used_snippets from a trace alone: union of retrieval hits (minimum
/// distance per snippet), minus threshold drops, minus snippets judged
/// unhelpful (addrep mode keeps only snippets judged helpful).
std::vector<UsedSnippet> replay_used_snippets(std::span<const TraceEvent> trace,
                                              PipelineMode mode);

}  // namespace kt
