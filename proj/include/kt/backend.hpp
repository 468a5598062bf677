#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kt {

enum class AgentRole { filter, query_refine, divergent, judge, answer };

inline constexpr AgentRole kAllAgentRoles[] = {AgentRole::filter, AgentRole::query_refine,
                                               AgentRole::divergent, AgentRole::judge,
                                               AgentRole::answer};

std::string_view to_string(AgentRole role);
/// Throws std::invalid_argument for unknown names.
AgentRole parse_agent_role(std::string_view name);

enum class MessageRole { system, user, assistant };

std::string_view to_string(MessageRole role);
MessageRole parse_message_role(std::string_view name);

struct ChatMessage {
  MessageRole role = MessageRole::user;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct CompletionRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_output_tokens = 512;
  std::chrono::milliseconds timeout{120000};
  // Agent issuing the call and the values bound into its prompt. HTTP
  // backends ignore both; the stub backend answers from them.
  std::optional<AgentRole> role;
  std::map<std::string, std::string> bindings;
};

/// Receives each streamed fragment of a completion as it arrives.
using TokenCallback = std::function<void(std::string_view)>;

class BackendError : public std::runtime_error {
 public:
  BackendError(const std::string& what, bool retriable)
      : std::runtime_error(what), retriable_(retriable) {}

  bool retriable() const noexcept { return retriable_; }

 private:
  bool retriable_;
};

/// Chat completion plus embedding endpoint of a local inference server.
class InferenceBackend {
 public:
  virtual ~InferenceBackend() = default;

  /// Returns the full completion text; fragments are also pushed to `on_token`
  /// when it is set. Throws BackendError.
  virtual std::string complete(const CompletionRequest& request,
                               const TokenCallback& on_token = {}) = 0;

  /// Raw (unnormalized) embedding. Throws BackendError.
  virtual std::vector<float> embed(const std::string& model, const std::string& text) = 0;

  virtual bool reachable() = 0;

  virtual std::string describe() const = 0;
};

}  // namespace kt
