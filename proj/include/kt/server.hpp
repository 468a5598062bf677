#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "kt/addrep.hpp"
#include "kt/agents.hpp"
#include "kt/backend.hpp"
#include "kt/ingest.hpp"
#include "kt/kb.hpp"

namespace kt {

enum class ApiErrorCode { bad_request, not_found, backend_unavailable, conflict, internal };

std::string_view to_string(ApiErrorCode code);
int http_status(ApiErrorCode code);

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  ChunkingConfig chunking{};
  bool filter_agent = true;
  AddRepConfig addrep{};
  /// When set, the knowledge base is saved here after every write.
  std::optional<std::filesystem::path> kb_dir;
  std::size_t history_limit = 200;
  std::optional<std::string> extractor_command;
};

/// HTTP/JSON API over one knowledge base. Chat replies stream as server-sent
/// events named after the trace event types and end in exactly one `done` or
/// `error` event.
class Server {
 public:
  Server(std::shared_ptr<InferenceBackend> backend, std::shared_ptr<AgentRegistry> agents,
         std::shared_ptr<KnowledgeBase> kb, ServerOptions options = {});
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace kt
