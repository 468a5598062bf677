#include "kt/json_io.hpp"

namespace kt {

using nlohmann::json;

void to_json(json& j, const DocumentRecord& r) {
  j = json{{"doc_id", r.doc_id},
           {"title", r.title},
           {"source_path", r.source_path},
           {"format", to_string(r.format)},
           {"enabled", r.enabled},
           {"created_at", r.created_at},
           {"snippet_count", r.snippet_count},
           {"dropped_by_rule", r.dropped_by_rule},
           {"dropped_by_agent", r.dropped_by_agent}};
}

void from_json(const json& j, DocumentRecord& r) {
  j.at("doc_id").get_to(r.doc_id);
  j.at("title").get_to(r.title);
  j.at("source_path").get_to(r.source_path);
  r.format = parse_document_format(j.at("format").get<std::string>());
  j.at("enabled").get_to(r.enabled);
  j.at("created_at").get_to(r.created_at);
  j.at("snippet_count").get_to(r.snippet_count);
  j.at("dropped_by_rule").get_to(r.dropped_by_rule);
  j.at("dropped_by_agent").get_to(r.dropped_by_agent);
}

void to_json(json& j, const SnippetRecord& r) {
  j = json{{"snippet_id", r.snippet_id}, {"doc_id", r.doc_id}, {"seq", r.seq}, {"text", r.text}};
}

void from_json(const json& j, SnippetRecord& r) {
  j.at("snippet_id").get_to(r.snippet_id);
  j.at("doc_id").get_to(r.doc_id);
  j.at("seq").get_to(r.seq);
  j.at("text").get_to(r.text);
}

void to_json(json& j, const RetrievalHit& h) {
  j = json{{"snippet_id", h.snippet_id}, {"text", h.text},           {"distance", h.distance},
           {"doc_id", h.doc_id},         {"doc_title", h.doc_title}, {"source_path", h.source_path}};
}

void to_json(json& j, const ChatMessage& m) {
  j = json{{"role", to_string(m.role)}, {"content", m.content}};
}

void from_json(const json& j, ChatMessage& m) {
  m.role = parse_message_role(j.at("role").get<std::string>());
  j.at("content").get_to(m.content);
}

void to_json(json& j, const AgentConfig& c) {
  j = json{{"role", to_string(c.role)},
           {"model_name", c.model_name},
           {"prompt_template", c.prompt_template},
           {"temperature", c.temperature},
           {"max_output_tokens", c.max_output_tokens},
           {"timeout_ms", c.timeout.count()},
           {"required_placeholders", json::array()}};
  for (std::string_view p : required_placeholders(c.role)) {
    j["required_placeholders"].push_back(p);
  }
}

void update_from_json(const json& j, AgentConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("agent config must be a JSON object");
  if (auto it = j.find("role"); it != j.end() && parse_agent_role(it->get<std::string>()) != c.role) {
    throw std::invalid_argument("agent config role does not match the endpoint");
  }
  if (auto it = j.find("model_name"); it != j.end()) it->get_to(c.model_name);
  if (auto it = j.find("prompt_template"); it != j.end()) it->get_to(c.prompt_template);
  if (auto it = j.find("temperature"); it != j.end()) it->get_to(c.temperature);
  if (auto it = j.find("max_output_tokens"); it != j.end()) it->get_to(c.max_output_tokens);
  if (auto it = j.find("timeout_ms"); it != j.end()) {
    c.timeout = std::chrono::milliseconds(it->get<std::int64_t>());
  }
}

json trace_event_json(const TraceEvent& ev) {
  json j = std::visit(
      [](const auto& e) -> json {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, trace::RefinedQuery>) {
          return {{"query", e.query}};
        } else if constexpr (std::is_same_v<T, trace::DivergentQuery>) {
          return {{"index", e.index}, {"query", e.query}};
        } else if constexpr (std::is_same_v<T, trace::Retrieval>) {
          return {{"for_query", e.for_query}, {"hits", e.hits}};
        } else if constexpr (std::is_same_v<T, trace::ThresholdDrop>) {
          return {{"snippet_id", e.snippet_id}, {"distance", e.distance}};
        } else if constexpr (std::is_same_v<T, trace::Judgement>) {
          return {{"snippet_id", e.snippet_id}, {"helpful", e.helpful}, {"reason", e.reason}};
        } else if constexpr (std::is_same_v<T, trace::ReasoningDelta> ||
                             std::is_same_v<T, trace::AnswerDelta>) {
          return {{"text", e.text}};
        } else {
          return {{"message", e.message}};
        }
      },
      ev);
  j["type"] = event_type(ev);
  return j;
}

namespace {
RetrievalHit hit_from_json(const json& j) {
  RetrievalHit h;
  j.at("snippet_id").get_to(h.snippet_id);
  j.at("text").get_to(h.text);
  j.at("distance").get_to(h.distance);
  j.at("doc_id").get_to(h.doc_id);
  j.at("doc_title").get_to(h.doc_title);
  j.at("source_path").get_to(h.source_path);
  return h;
}
}  // namespace

TraceEvent trace_event_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "refined_query") return trace::RefinedQuery{j.at("query").get<std::string>()};
  if (type == "divergent_query") {
    return trace::DivergentQuery{j.at("index").get<int>(), j.at("query").get<std::string>()};
  }
  if (type == "retrieval") {
    trace::Retrieval r{j.at("for_query").get<std::string>(), {}};
    for (const auto& h : j.at("hits")) r.hits.push_back(hit_from_json(h));
    return r;
  }
  if (type == "threshold_drop") {
    return trace::ThresholdDrop{j.at("snippet_id").get<SnippetId>(), j.at("distance").get<double>()};
  }
  if (type == "judgement") {
    return trace::Judgement{j.at("snippet_id").get<SnippetId>(), j.at("helpful").get<bool>(),
                            j.at("reason").get<std::string>()};
  }
  if (type == "reasoning_delta") return trace::ReasoningDelta{j.at("text").get<std::string>()};
  if (type == "answer_delta") return trace::AnswerDelta{j.at("text").get<std::string>()};
  if (type == "error") return trace::Error{j.at("message").get<std::string>()};
  throw std::invalid_argument("unknown trace event type: " + type);
}

void to_json(json& j, const UsedSnippet& u) {
  j = json(u.hit);
  j["reason"] = u.reason;
}

json result_summary_json(const PipelineResult& r) {
  json j{{"mode", to_string(r.mode)},
         {"answer", r.answer},
         {"reasoning", r.reasoning},
         {"used_snippets", r.used_snippets},
         {"no_context", r.no_context},
         {"retrieval_calls", r.retrieval_calls}};
  if (r.error) j["error"] = *r.error;
  return j;
}

}  // namespace kt
