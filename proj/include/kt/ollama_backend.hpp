#pragma once

#include <chrono>
#include <string>

#include "kt/backend.hpp"

namespace kt {

/// Client for servers speaking the Ollama HTTP API:
///   POST {base}/api/chat        streamed NDJSON {message:{content}, done}
///   POST {base}/api/embeddings  {embedding:[...]}
///   GET  {base}/api/tags        health probe
class OllamaBackend final : public InferenceBackend {
 public:
  explicit OllamaBackend(std::string base_url,
                         std::chrono::milliseconds connect_timeout = std::chrono::seconds(5));

  std::string complete(const CompletionRequest& request,
                       const TokenCallback& on_token = {}) override;
  std::vector<float> embed(const std::string& model, const std::string& text) override;
  bool reachable() override;
  std::string describe() const override { return base_url_; }

  const std::string& base_url() const { return base_url_; }

 private:
  std::string base_url_;
  std::chrono::milliseconds connect_timeout_;
};

/// Incremental parser for newline-delimited JSON chat events. Exposed for tests.
class ChatStreamParser {
 public:
  /// Feeds raw bytes; calls `on_content` for each message fragment. Throws
  /// BackendError when the server reports an error event or sends malformed JSON.
  void feed(std::string_view bytes, const TokenCallback& on_content);
  /// Flushes a trailing line without newline.
  void finish(const TokenCallback& on_content);

  bool done() const { return done_; }
  const std::string& text() const { return text_; }

 private:
  void handle_line(std::string_view line, const TokenCallback& on_content);

  std::string pending_;
  std::string text_;
  bool done_ = false;
};

}  // namespace kt
