#include "kt/server.hpp"

#include <httplib.h>

#include <charconv>
#include <spdlog/spdlog.h>

#include <chrono>
#include <deque>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <unordered_map>

#include "kt/embed.hpp"
#include "kt/json_io.hpp"
#include "kt/text.hpp"

namespace kt {

using nlohmann::json;

std::string_view to_string(ApiErrorCode code) {
  switch (code) {
    case ApiErrorCode::bad_request: return "bad_request";
    case ApiErrorCode::not_found: return "not_found";
    case ApiErrorCode::backend_unavailable: return "backend_unavailable";
    case ApiErrorCode::conflict: return "conflict";
    case ApiErrorCode::internal: return "internal";
  }
  return "internal";
}

int http_status(ApiErrorCode code) {
  switch (code) {
    case ApiErrorCode::bad_request: return 400;
    case ApiErrorCode::not_found: return 404;
    case ApiErrorCode::backend_unavailable: return 503;
    case ApiErrorCode::conflict: return 409;
    case ApiErrorCode::internal: return 500;
  }
  return 500;
}

namespace {

struct ApiException : std::runtime_error {
  ApiException(ApiErrorCode c, const std::string& what) : std::runtime_error(what), code(c) {}
  ApiErrorCode code;
};

void send_error(httplib::Response& res, ApiErrorCode code, const std::string& message) {
  res.status = http_status(code);
  res.set_content(json{{"code", to_string(code)}, {"message", message}}.dump(), "application/json");
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

// Maps whatever the handler threw onto an ApiError body.
void send_current_exception(httplib::Response& res) {
  try {
    throw;
  } catch (const ApiException& e) {
    send_error(res, e.code, e.what());
  } catch (const NotFoundError& e) {
    send_error(res, ApiErrorCode::not_found, e.what());
  } catch (const IngestError& e) {
    try {
      std::rethrow_if_nested(e);
      send_error(res, ApiErrorCode::bad_request, e.what());
    } catch (const EmbeddingError&) {
      send_error(res, ApiErrorCode::backend_unavailable, e.what());
    } catch (...) {
      send_error(res, ApiErrorCode::bad_request, e.what());
    }
  } catch (const EmbeddingError& e) {
    send_error(res, ApiErrorCode::backend_unavailable, e.what());
  } catch (const BackendError& e) {
    send_error(res, ApiErrorCode::backend_unavailable, e.what());
  } catch (const json::exception& e) {
    send_error(res, ApiErrorCode::bad_request, e.what());
  } catch (const std::invalid_argument& e) {
    send_error(res, ApiErrorCode::bad_request, e.what());
  } catch (const std::exception& e) {
    send_error(res, ApiErrorCode::internal, e.what());
  } catch (...) {
    send_error(res, ApiErrorCode::internal, "unknown error");
  }
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) throw ApiException(ApiErrorCode::bad_request, "request body required");
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw ApiException(ApiErrorCode::bad_request, "request body must be a JSON object");
  }
  return j;
}

DocId parse_doc_id(const std::string& text) {
  DocId id = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), id);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ApiException(ApiErrorCode::not_found, "unknown document id " + text);
  }
  return id;
}

AgentRole role_from_path(const std::string& name) {
  try {
    return parse_agent_role(name);
  } catch (const std::exception&) {
    throw ApiException(ApiErrorCode::not_found, "unknown agent role " + name);
  }
}

std::string sse_frame(std::string_view type, const json& data) {
  return "event: " + std::string(type) + "\ndata: " + data.dump() + "\n\n";
}

std::string new_session_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

struct Session {
  std::string id;
  std::deque<ChatMessage> history;
  bool docs_enhanced = true;
  std::chrono::system_clock::time_point created_at = std::chrono::system_clock::now();
  bool busy = false;
};

}  // namespace

struct Server::Impl {
  std::shared_ptr<InferenceBackend> backend;
  std::shared_ptr<AgentRegistry> agents;
  std::shared_ptr<KnowledgeBase> kb;
  ServerOptions options;
  Pipeline pipeline;

  httplib::Server http;
  std::thread thread;
  int bound_port = -1;

  std::mutex sessions_mu;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions;

  Impl(std::shared_ptr<InferenceBackend> b, std::shared_ptr<AgentRegistry> a,
       std::shared_ptr<KnowledgeBase> k, ServerOptions o)
      : backend(std::move(b)), agents(std::move(a)), kb(std::move(k)), options(std::move(o)),
        pipeline(*backend, *agents) {
    routes();
  }

  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (...) {
        send_current_exception(res);
      }
    };
  }

  void persist() {
    if (!options.kb_dir) return;
    try {
      kb->save(*options.kb_dir);
    } catch (const std::exception& e) {
      spdlog::error("saving knowledge base failed: {}", e.what());
    }
  }

  void routes() {
    http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, PUT, PATCH, DELETE, OPTIONS"}});
    http.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (...) {
        send_current_exception(res);
      }
    });
    // Unmatched routes still get an ApiError body.
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404) send_error(res, ApiErrorCode::not_found, "no such endpoint");
      else if (res.status >= 400 && res.status < 500) send_error(res, ApiErrorCode::bad_request, "bad request");
      else if (res.status >= 500) send_error(res, ApiErrorCode::internal, "internal error");
    });

    http.Post("/api/documents", guarded([this](const httplib::Request& req, httplib::Response& res) {
      add_document(req, res);
    }));
    http.Get("/api/documents", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, kb->list_documents());
    }));
    http.Get(R"(/api/documents/(\d+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const DocId id = parse_doc_id(req.matches[1]);
      auto doc = kb->document(id);
      if (!doc) throw ApiException(ApiErrorCode::not_found, "unknown document id " + std::to_string(id));
      send_json(res, *doc);
    }));
    http.Get(R"(/api/documents/(\d+)/snippets)",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               const DocId id = parse_doc_id(req.matches[1]);
               if (!kb->document(id)) {
                 throw ApiException(ApiErrorCode::not_found, "unknown document id " + std::to_string(id));
               }
               send_json(res, kb->snippets_of(id));
             }));
    http.Patch(R"(/api/documents/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const DocId id = parse_doc_id(req.matches[1]);
      const json body = parse_body(req);
      if (!body.contains("enabled") || !body["enabled"].is_boolean()) {
        throw ApiException(ApiErrorCode::bad_request, "body must contain boolean 'enabled'");
      }
      kb->set_document_enabled(id, body["enabled"].get<bool>());
      persist();
      send_json(res, *kb->document(id));
    }));
    http.Delete(R"(/api/documents/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      kb->delete_document(parse_doc_id(req.matches[1]));
      persist();
      res.status = 204;
    }));

    http.Post("/api/retrieve", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const std::string query = body.at("query").get<std::string>();
      const int topk = body.value("topk", 5);
      if (trim(query).empty()) throw ApiException(ApiErrorCode::bad_request, "query must not be empty");
      if (topk < 1) throw ApiException(ApiErrorCode::bad_request, "topk must be >= 1");
      send_json(res, json{{"hits", kb->retrieve(query, topk)}});
    }));

    http.Post("/api/chat", guarded([this](const httplib::Request& req, httplib::Response& res) {
      chat(req, res);
    }));

    http.Get("/api/agents", guarded([this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (AgentRole role : kAllAgentRoles) out.push_back(*agents->get(role));
      send_json(res, out);
    }));
    http.Get(R"(/api/agents/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, *agents->get(role_from_path(req.matches[1])));
    }));
    http.Put(R"(/api/agents/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const AgentRole role = role_from_path(req.matches[1]);
      AgentConfig cfg = *agents->get(role);
      update_from_json(parse_body(req), cfg);
      agents->set(cfg);
      send_json(res, *agents->get(role));
    }));

    http.Get("/api/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      const KbCounts c = kb->counts();
      const auto dim = kb->embedding_dim();
      send_json(res, json{{"status", "ok"},
                          {"backend", backend->describe()},
                          {"backend_reachable", backend->reachable()},
                          {"embedding_dim", dim ? json(*dim) : json(nullptr)},
                          {"kb_counts",
                           {{"documents", c.documents},
                            {"enabled_documents", c.enabled_documents},
                            {"snippets", c.snippets},
                            {"tombstones", c.tombstones}}}});
    }));
  }

  void add_document(const httplib::Request& req, httplib::Response& res) {
    RawDocument raw;
    bool filter = options.filter_agent;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("file")) throw ApiException(ApiErrorCode::bad_request, "multipart upload needs a 'file' part");
      const auto file = req.get_file_value("file");
      const std::string name = file.filename.empty() ? "upload" : file.filename;
      std::string title = req.has_file("title") ? req.get_file_value("title").content : "";
      if (title.empty()) title = std::filesystem::path(name).stem().string();
      std::optional<DocumentFormat> format;
      if (req.has_file("format")) format = parse_document_format(req.get_file_value("format").content);
      if (!format) {
        const std::string ext = to_lower_ascii(std::filesystem::path(name).extension().string());
        if (ext == ".md" || ext == ".markdown") format = DocumentFormat::markdown;
        else if (ext == ".txt" || ext == ".text" || ext.empty()) format = DocumentFormat::txt;
        else format = DocumentFormat::external_text;
      }
      std::string body = file.content;
      if (*format == DocumentFormat::external_text &&
          std::filesystem::path(name).extension() != ".txt") {
        if (!options.extractor_command) {
          throw ApiException(ApiErrorCode::bad_request,
                             "no text extractor configured for " + std::filesystem::path(name).extension().string());
        }
        body = run_extractor(*options.extractor_command, body);
      }
      raw = make_document(name, title, *format, body);
      if (req.has_file("filter_agent")) filter = req.get_file_value("filter_agent").content == "true";
    } else {
      const json body = parse_body(req);
      const std::string text = body.at("text").get<std::string>();
      const std::string title = body.value("title", std::string("untitled"));
      const DocumentFormat format = parse_document_format(body.value("format", std::string("txt")));
      const std::string source = body.value("source_path", title);
      filter = body.value("filter_agent", filter);
      raw = make_document(source, title, format, text);
    }
    DocumentRecord record = kb->ingest_document(raw, options.chunking, filter);
    persist();
    send_json(res, record, 201);
  }

  std::shared_ptr<Session> session_for(const std::string& id) {
    std::lock_guard lock(sessions_mu);
    auto& slot = sessions[id];
    if (!slot) {
      slot = std::make_shared<Session>();
      slot->id = id;
    }
    return slot;
  }

  void chat(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const std::string message = body.at("message").get<std::string>();
    if (trim(message).empty()) throw ApiException(ApiErrorCode::bad_request, "message must not be empty");
    std::string session_id = body.value("session_id", std::string());
    if (session_id.empty()) session_id = new_session_id();

    AddRepConfig cfg = options.addrep;
    if (body.contains("mode")) cfg.mode = parse_pipeline_mode(body["mode"].get<std::string>());

    auto session = session_for(session_id);
    std::vector<ChatMessage> history;
    {
      std::lock_guard lock(sessions_mu);
      if (session->busy) {
        throw ApiException(ApiErrorCode::conflict, "session " + session_id + " already has a run in flight");
      }
      session->busy = true;
      session->docs_enhanced = body.value("docs_enhanced", session->docs_enhanced);
      if (!session->docs_enhanced) cfg.mode = PipelineMode::baseline;
      history.assign(session->history.begin(), session->history.end());
    }

    auto release = [this, session] {
      std::lock_guard lock(sessions_mu);
      session->busy = false;
    };

    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, session, session_id, message, history, cfg](std::size_t, httplib::DataSink& sink) {
          auto write = [&sink](const std::string& frame) {
            if (sink.is_writable()) sink.write(frame.data(), frame.size());
          };
          PipelineRequest request{message, history, {}};
          try {
            PipelineResult result = pipeline.run(
                request, kb.get(), cfg,
                [&](const TraceEvent& ev) { write(sse_frame(event_type(ev), trace_event_json(ev))); });
            // A failed run already ended its trace with an error event.
            if (!result.error) {
              json done = result_summary_json(result);
              done["session_id"] = session_id;
              write(sse_frame("done", done));
              std::lock_guard lock(sessions_mu);
              session->history.push_back({MessageRole::user, message});
              session->history.push_back({MessageRole::assistant, result.answer});
              while (session->history.size() > options.history_limit) session->history.pop_front();
            }
          } catch (const std::exception& e) {
            write(sse_frame("error", json{{"message", e.what()}}));
          }
          sink.done();
          return true;
        },
        [release](bool) { release(); });
  }
};

Server::Server(std::shared_ptr<InferenceBackend> backend, std::shared_ptr<AgentRegistry> agents,
               std::shared_ptr<KnowledgeBase> kb, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(backend), std::move(agents), std::move(kb), std::move(options))) {}

Server::~Server() { stop(); }

int Server::start() {
  auto& i = *impl_;
  if (i.options.port == 0) {
    i.bound_port = i.http.bind_to_any_port(i.options.host);
  } else if (i.http.bind_to_port(i.options.host, i.options.port)) {
    i.bound_port = i.options.port;
  }
  if (i.bound_port < 0) {
    throw std::runtime_error("cannot bind " + i.options.host + ":" + std::to_string(i.options.port));
  }
  i.thread = std::thread([&i] { i.http.listen_after_bind(); });
  i.http.wait_until_ready();
  return i.bound_port;
}

void Server::run() {
  auto& i = *impl_;
  if (i.options.port == 0) {
    i.bound_port = i.http.bind_to_any_port(i.options.host);
  } else if (i.http.bind_to_port(i.options.host, i.options.port)) {
    i.bound_port = i.options.port;
  }
  if (i.bound_port < 0) {
    throw std::runtime_error("cannot bind " + i.options.host + ":" + std::to_string(i.options.port));
  }
  spdlog::info("listening on http://{}:{}", i.options.host, i.bound_port);
  i.http.listen_after_bind();
}

void Server::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int Server::port() const { return impl_->bound_port; }

}  // namespace kt
