#pragma once

#include <json.hpp>

#include "kt/addrep.hpp"
#include "kt/agents.hpp"
#include "kt/kb.hpp"

namespace kt {

void to_json(nlohmann::json& j, const DocumentRecord& r);
void from_json(const nlohmann::json& j, DocumentRecord& r);

void to_json(nlohmann::json& j, const SnippetRecord& r);
void from_json(const nlohmann::json& j, SnippetRecord& r);

void to_json(nlohmann::json& j, const RetrievalHit& h);

void to_json(nlohmann::json& j, const ChatMessage& m);
void from_json(const nlohmann::json& j, ChatMessage& m);

void to_json(nlohmann::json& j, const AgentConfig& c);
/// Fields absent from `j` keep the value already in `c`; "role" must match if present.
void update_from_json(const nlohmann::json& j, AgentConfig& c);

/// {"type": <event_type>, ...fields}
nlohmann::json trace_event_json(const TraceEvent& ev);
/// Inverse of trace_event_json; used to replay recorded traces.
TraceEvent trace_event_from_json(const nlohmann::json& j);

void to_json(nlohmann::json& j, const UsedSnippet& u);

/// Summary carried by the chat stream's done event (trace excluded).
nlohmann::json result_summary_json(const PipelineResult& r);

}  // namespace kt
