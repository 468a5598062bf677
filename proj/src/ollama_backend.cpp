#include "kt/ollama_backend.hpp"

#include <httplib.h>

#include <json.hpp>

namespace kt {

using nlohmann::json;

namespace {

httplib::Client make_client(const std::string& base_url, std::chrono::milliseconds connect,
                            std::chrono::milliseconds read) {
  httplib::Client client(base_url);
  client.set_connection_timeout(connect);
  client.set_read_timeout(read);
  client.set_write_timeout(read);
  return client;
}

std::string describe_error(httplib::Error err) { return httplib::to_string(err); }

}  // namespace

void ChatStreamParser::feed(std::string_view bytes, const TokenCallback& on_content) {
  pending_.append(bytes);
  std::size_t start = 0;
  for (std::size_t nl; (nl = pending_.find('\n', start)) != std::string::npos; start = nl + 1) {
    handle_line(std::string_view(pending_).substr(start, nl - start), on_content);
  }
  pending_.erase(0, start);
}

void ChatStreamParser::finish(const TokenCallback& on_content) {
  if (!pending_.empty()) {
    const std::string line = std::move(pending_);
    pending_.clear();
    handle_line(line, on_content);
  }
}

void ChatStreamParser::handle_line(std::string_view line, const TokenCallback& on_content) {
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
  if (line.empty()) return;
  json event;
  try {
    event = json::parse(line);
  } catch (const json::parse_error& e) {
    throw BackendError(std::string("malformed chat stream event: ") + e.what(), false);
  }
  if (event.contains("error")) {
    throw BackendError("inference server error: " + event["error"].dump(), false);
  }
  if (auto msg = event.find("message"); msg != event.end() && msg->is_object()) {
    if (auto content = msg->find("content"); content != msg->end() && content->is_string()) {
      const auto& piece = content->get_ref<const std::string&>();
      if (!piece.empty()) {
        text_ += piece;
        if (on_content) on_content(piece);
      }
    }
  }
  if (event.value("done", false)) done_ = true;
}

OllamaBackend::OllamaBackend(std::string base_url, std::chrono::milliseconds connect_timeout)
    : base_url_(std::move(base_url)), connect_timeout_(connect_timeout) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
  if (base_url_.empty()) throw std::invalid_argument("backend base URL is empty");
}

std::string OllamaBackend::complete(const CompletionRequest& request,
                                    const TokenCallback& on_token) {
  json messages = json::array();
  for (const ChatMessage& m : request.messages) {
    messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  const json body = {{"model", request.model},
                     {"messages", messages},
                     {"stream", true},
                     {"options",
                      {{"temperature", request.temperature},
                       {"num_predict", request.max_output_tokens}}}};

  auto client = make_client(base_url_, connect_timeout_, request.timeout);
  ChatStreamParser parser;
  std::string error_body;
  std::exception_ptr stream_error;
  int status = 0;

  httplib::Request req;
  req.method = "POST";
  req.path = "/api/chat";
  req.body = body.dump();
  req.set_header("Content-Type", "application/json");
  req.response_handler = [&](const httplib::Response& res) {
    status = res.status;
    return true;
  };
  req.content_receiver = [&](const char* data, std::size_t n, std::uint64_t, std::uint64_t) {
    if (status != 200) {
      error_body.append(data, n);
      return true;
    }
    try {
      parser.feed(std::string_view(data, n), on_token);
    } catch (...) {
      stream_error = std::current_exception();
      return false;
    }
    return true;
  };

  auto result = client.send(req);
  if (stream_error) std::rethrow_exception(stream_error);
  if (!result) {
    throw BackendError("chat request to " + base_url_ + " failed: " + describe_error(result.error()),
                       true);
  }
  if (result->status != 200) {
    throw BackendError("chat request returned HTTP " + std::to_string(result->status) + ": " +
                           error_body,
                       result->status >= 500);
  }
  parser.finish(on_token);
  return parser.text();
}

std::vector<float> OllamaBackend::embed(const std::string& model, const std::string& text) {
  auto client = make_client(base_url_, connect_timeout_, std::chrono::seconds(120));
  const json body = {{"model", model}, {"prompt", text}};
  auto result = client.Post("/api/embeddings", body.dump(), "application/json");
  if (!result) {
    throw BackendError("embedding request to " + base_url_ + " failed: " +
                           describe_error(result.error()),
                       true);
  }
  if (result->status != 200) {
    throw BackendError("embedding request returned HTTP " + std::to_string(result->status) + ": " +
                           result->body,
                       result->status >= 500);
  }
  try {
    const json reply = json::parse(result->body);
    return reply.at("embedding").get<std::vector<float>>();
  } catch (const json::exception& e) {
    throw BackendError(std::string("malformed embedding response: ") + e.what(), false);
  }
}

bool OllamaBackend::reachable() {
  auto client = make_client(base_url_, connect_timeout_, connect_timeout_);
  auto result = client.Get("/api/tags");
  return result && result->status == 200;
}

}  // namespace kt
