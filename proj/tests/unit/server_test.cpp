#include <gtest/gtest.h>
// Eigen first: <resolv.h> (via httplib) defines a _res macro.
#include <Eigen/Dense>
#include <httplib.h>

#include <condition_variable>
#include <future>
#include <json.hpp>

#include "kt/server.hpp"
#include "kt/stub_backend.hpp"
#include "test_support.hpp"

namespace kt {
namespace {

using nlohmann::json;
using testing::parse_sse;

std::string words(const std::string& stem, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) out += (i ? " " : "") + stem + std::to_string(i);
  return out;
}

struct ServerTest : ::testing::Test {
  std::shared_ptr<StubBackend> backend = std::make_shared<StubBackend>();
  std::shared_ptr<AgentRegistry> agents = std::make_shared<AgentRegistry>();
  std::shared_ptr<KnowledgeBase> kb = std::make_shared<KnowledgeBase>(backend, agents);
  std::unique_ptr<Server> server;
  std::unique_ptr<httplib::Client> client;

  void SetUp() override { start({}); }

  void start(ServerOptions opts) {
    opts.port = 0;
    opts.chunking = {10, 0.0, 10};
    server = std::make_unique<Server>(backend, agents, kb, opts);
    const int port = server->start();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(30, 0);
  }

  json post(const std::string& path, const json& body, int expect) {
    auto res = client->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res);
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << res->body;
    return res->body.empty() ? json() : json::parse(res->body);
  }
  json get(const std::string& path, int expect = 200) {
    auto res = client->Get(path);
    EXPECT_TRUE(res);
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << res->body;
    return json::parse(res->body);
  }
  void expect_api_error(const json& body, const std::string& code) {
    ASSERT_TRUE(body.is_object()) << body.dump();
    EXPECT_EQ(body.value("code", ""), code) << body.dump();
    EXPECT_TRUE(body.contains("message"));
  }
  json add_doc(const std::string& title, const std::string& text) {
    return post("/api/documents", {{"title", title}, {"text", text}, {"format", "txt"}}, 201);
  }
};

TEST(ApiErrorCode, Statuses) {
  EXPECT_EQ(http_status(ApiErrorCode::bad_request), 400);
  EXPECT_EQ(http_status(ApiErrorCode::not_found), 404);
  EXPECT_EQ(http_status(ApiErrorCode::backend_unavailable), 503);
  EXPECT_EQ(http_status(ApiErrorCode::conflict), 409);
  EXPECT_EQ(http_status(ApiErrorCode::internal), 500);
  EXPECT_EQ(to_string(ApiErrorCode::backend_unavailable), "backend_unavailable");
}

TEST_F(ServerTest, HealthOnEmptyKb) {
  const auto h = get("/api/health");
  EXPECT_EQ(h["backend_reachable"], true);
  EXPECT_TRUE(h["embedding_dim"].is_null());
  EXPECT_EQ(h["kb_counts"]["documents"], 0);
  EXPECT_EQ(h["kb_counts"]["snippets"], 0);
}

TEST_F(ServerTest, DocumentLifecycle) {
  const auto rec = add_doc("kidney notes", words("medkidney", 20) + " " + words("cooking", 10));
  EXPECT_EQ(rec["title"], "kidney notes");
  EXPECT_EQ(rec["snippet_count"], 2);
  EXPECT_EQ(rec["dropped_by_agent"], 1);
  const int id = rec["doc_id"];

  const auto list = get("/api/documents");
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0]["doc_id"], id);
  EXPECT_EQ(get("/api/documents/" + std::to_string(id))["title"], "kidney notes");
  EXPECT_EQ(get("/api/documents/" + std::to_string(id) + "/snippets").size(), 2u);

  auto patched = client->Patch("/api/documents/" + std::to_string(id), R"({"enabled":false})", "application/json");
  ASSERT_TRUE(patched);
  EXPECT_EQ(patched->status, 200);
  EXPECT_EQ(json::parse(patched->body)["enabled"], false);
  EXPECT_TRUE(post("/api/retrieve", {{"query", "medkidney3"}, {"topk", 5}}, 200)["hits"].empty());

  client->Patch("/api/documents/" + std::to_string(id), R"({"enabled":true})", "application/json");
  const auto hits = post("/api/retrieve", {{"query", "medkidney3"}, {"topk", 5}}, 200)["hits"];
  ASSERT_FALSE(hits.empty());
  EXPECT_EQ(hits[0]["doc_id"], id);
  EXPECT_TRUE(hits[0].contains("distance"));
  EXPECT_TRUE(hits[0].contains("text"));

  auto del = client->Delete("/api/documents/" + std::to_string(id));
  ASSERT_TRUE(del);
  EXPECT_EQ(del->status, 204);
  EXPECT_TRUE(get("/api/documents").empty());
  expect_api_error(get("/api/documents/" + std::to_string(id), 404), "not_found");
  EXPECT_EQ(get("/api/health")["kb_counts"]["documents"], 0);
}

TEST_F(ServerTest, MultipartUpload) {
  httplib::MultipartFormDataItems items = {
      {"file", "# Heading\n\n" + words("medicine", 12), "notes.md", "text/markdown"},
      {"filter_agent", "false", "", ""},
  };
  auto res = client->Post("/api/documents", items);
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201) << res->body;
  const auto rec = json::parse(res->body);
  EXPECT_EQ(rec["format"], "markdown");
  EXPECT_EQ(rec["title"], "notes");
  EXPECT_EQ(rec["source_path"], "notes.md");

  httplib::MultipartFormDataItems pdf = {{"file", "%PDF", "paper.pdf", "application/pdf"}};
  auto bad = client->Post("/api/documents", pdf);
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  expect_api_error(json::parse(bad->body), "bad_request");
}

TEST_F(ServerTest, BadRequestsAndNotFound) {
  expect_api_error(post("/api/documents", {{"title", "x"}}, 400), "bad_request");
  auto res = client->Post("/api/documents", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  expect_api_error(json::parse(res->body), "bad_request");

  auto patch = client->Patch("/api/documents/999", R"({"enabled":false})", "application/json");
  ASSERT_TRUE(patch);
  EXPECT_EQ(patch->status, 404);
  expect_api_error(json::parse(patch->body), "not_found");
  auto patch_bad = client->Patch("/api/documents/abc", R"({"enabled":false})", "application/json");
  ASSERT_TRUE(patch_bad);
  EXPECT_EQ(patch_bad->status, 404);

  auto del = client->Delete("/api/documents/999");
  ASSERT_TRUE(del);
  EXPECT_EQ(del->status, 404);

  expect_api_error(post("/api/retrieve", {{"query", "x"}, {"topk", 0}}, 400), "bad_request");
  expect_api_error(post("/api/retrieve", {{"query", "  "}}, 400), "bad_request");
  expect_api_error(get("/api/nope", 404), "not_found");
  expect_api_error(post("/api/chat", {{"message", ""}}, 400), "bad_request");
  expect_api_error(post("/api/chat", {{"message", "x"}, {"mode", "rag"}}, 400), "bad_request");
}

TEST_F(ServerTest, RetrieveOnEmptyKb) {
  EXPECT_EQ(post("/api/retrieve", {{"query", "anything"}, {"topk", 3}}, 200), (json{{"hits", json::array()}}));
}

TEST_F(ServerTest, Agents) {
  const auto all = get("/api/agents");
  EXPECT_EQ(all.size(), 5u);
  const auto filter = get("/api/agents/filter");
  EXPECT_EQ(filter["role"], "filter");
  EXPECT_TRUE(filter.contains("prompt_template"));

  auto put = client->Put("/api/agents/filter",
                         json{{"prompt_template", "Is this useful? {snippet}"}, {"temperature", 0.5}}.dump(),
                         "application/json");
  ASSERT_TRUE(put);
  EXPECT_EQ(put->status, 200) << put->body;
  EXPECT_EQ(get("/api/agents/filter")["prompt_template"], "Is this useful? {snippet}");
  EXPECT_DOUBLE_EQ(agents->get(AgentRole::filter)->temperature, 0.5);

  // missing required placeholder
  auto bad = client->Put("/api/agents/filter", json{{"prompt_template", "no slot"}}.dump(), "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  expect_api_error(json::parse(bad->body), "bad_request");
  expect_api_error(get("/api/agents/planner", 404), "not_found");
}

TEST_F(ServerTest, ChatStreamsAddRepTrace) {
  add_doc("a", words("kidney", 30));
  auto res = client->Post("/api/chat", json{{"message", "kidney3 kidney4"}, {"docs_enhanced", true}}.dump(),
                          "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_NE(res->get_header_value("Content-Type").find("text/event-stream"), std::string::npos);
  const auto events = parse_sse(res->body);
  ASSERT_GE(events.size(), 3u);
  EXPECT_EQ(events.front().type, "refined_query");
  EXPECT_EQ(events.front().data["query"], "REFINED:kidney3 kidney4");
  int divergent = 0, done = 0, errors = 0;
  for (const auto& e : events) {
    EXPECT_EQ(e.data.value("type", e.type), e.type);
    divergent += e.type == "divergent_query";
    done += e.type == "done";
    errors += e.type == "error";
  }
  EXPECT_EQ(divergent, 3);
  EXPECT_EQ(done, 1);
  EXPECT_EQ(errors, 0);
  EXPECT_EQ(events.back().type, "done");
  const auto& summary = events.back().data;
  EXPECT_EQ(summary["mode"], "addrep");
  EXPECT_EQ(summary["retrieval_calls"], 4);
  EXPECT_FALSE(summary["session_id"].get<std::string>().empty());
  EXPECT_EQ(summary["answer"], "ANSWER(kidney3 kidney4)[" + std::to_string(summary["used_snippets"].size()) + "]");
}

TEST_F(ServerTest, ChatWithoutDocsIsBaseline) {
  auto res = client->Post("/api/chat", json{{"message", "hello"}, {"docs_enhanced", false}}.dump(),
                          "application/json");
  ASSERT_TRUE(res);
  const auto events = parse_sse(res->body);
  ASSERT_FALSE(events.empty());
  for (std::size_t i = 0; i + 1 < events.size(); ++i) EXPECT_EQ(events[i].type, "answer_delta");
  EXPECT_EQ(events.back().type, "done");
  EXPECT_EQ(events.back().data["mode"], "baseline");
  EXPECT_EQ(events.back().data["answer"], "ANSWER(hello)[0]");
}

TEST_F(ServerTest, ChatModesAndSessionHistory) {
  add_doc("a", words("kidney", 30));
  auto first = client->Post("/api/chat", json{{"message", "kidney1"}, {"mode", "baseline_rs"}}.dump(), "application/json");
  ASSERT_TRUE(first);
  const auto events = parse_sse(first->body);
  EXPECT_EQ(events.back().data["mode"], "baseline_rs");
  EXPECT_EQ(events.back().data["retrieval_calls"], 1);
  const std::string sid = events.back().data["session_id"];
  auto second = client->Post("/api/chat", json{{"message", "again"}, {"session_id", sid}, {"mode", "baseline"}}.dump(),
                             "application/json");
  ASSERT_TRUE(second);
  EXPECT_EQ(parse_sse(second->body).back().data["session_id"], sid);
}

TEST_F(ServerTest, ChatBackendFailureEndsWithOneError) {
  backend->set_unreachable(true);
  auto res = client->Post("/api/chat", json{{"message", "q"}, {"mode", "baseline"}}.dump(), "application/json");
  ASSERT_TRUE(res);
  const auto events = parse_sse(res->body);
  ASSERT_FALSE(events.empty());
  EXPECT_EQ(events.back().type, "error");
  int terminal = 0;
  for (const auto& e : events) terminal += e.type == "error" || e.type == "done";
  EXPECT_EQ(terminal, 1);
  EXPECT_EQ(get("/api/health")["backend_reachable"], false);
}

TEST_F(ServerTest, IngestWithBackendDownIs503) {
  backend->set_unreachable(true);
  expect_api_error(post("/api/documents", {{"title", "t"}, {"text", words("medicine", 12)}, {"filter_agent", false}}, 503),
                   "backend_unavailable");
  EXPECT_TRUE(get("/api/documents").empty());
}

TEST_F(ServerTest, CorsPreflight) {
  auto res = client->Options("/api/documents");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServerTest, AutosaveWritesKbDir) {
  testing::TempDir dir;
  server.reset();
  ServerOptions opts;
  opts.kb_dir = dir.path();
  start(opts);
  add_doc("a", words("medicine", 12));
  EXPECT_TRUE(std::filesystem::exists(dir / KnowledgeBase::kManifestFile));
}

// Answer generation blocks until released so a second request can overlap it.
class GatedBackend final : public InferenceBackend {
 public:
  std::string complete(const CompletionRequest& request, const TokenCallback& on_token) override {
    if (request.role == AgentRole::answer) {
      std::unique_lock lock(mu_);
      entered_ = true;
      cv_.notify_all();
      cv_.wait(lock, [this] { return open_; });
    }
    if (on_token) on_token("ok");
    return "ok";
  }
  std::vector<float> embed(const std::string&, const std::string&) override { return {1.0f, 0.0f}; }
  bool reachable() override { return true; }
  std::string describe() const override { return "gated"; }

  void wait_entered() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return entered_; });
  }
  void open() {
    std::lock_guard lock(mu_);
    open_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  bool entered_ = false;
  bool open_ = false;
};

TEST(ServerSessions, OverlappingRunIsConflict) {
  auto backend = std::make_shared<GatedBackend>();
  auto agents = std::make_shared<AgentRegistry>();
  auto kb = std::make_shared<KnowledgeBase>(backend, agents);
  ServerOptions opts;
  opts.port = 0;
  Server server(backend, agents, kb, opts);
  const int port = server.start();

  const std::string body = json{{"message", "q"}, {"session_id", "s1"}, {"mode", "baseline"}}.dump();
  auto first = std::async(std::launch::async, [&] {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    auto r = c.Post("/api/chat", body, "application/json");
    return r ? r->body : std::string();
  });
  backend->wait_entered();

  httplib::Client c("127.0.0.1", port);
  auto clash = c.Post("/api/chat", body, "application/json");
  ASSERT_TRUE(clash);
  EXPECT_EQ(clash->status, 409);
  EXPECT_EQ(json::parse(clash->body)["code"], "conflict");

  // a different session is not blocked by s1
  auto other = std::async(std::launch::async, [&] {
    httplib::Client c2("127.0.0.1", port);
    c2.set_read_timeout(30, 0);
    auto r = c2.Post("/api/chat", json{{"message", "q"}, {"session_id", "s2"}, {"mode", "baseline"}}.dump(),
                     "application/json");
    return r ? r->status : -1;
  });
  backend->open();
  const auto events = parse_sse(first.get());
  ASSERT_FALSE(events.empty());
  EXPECT_EQ(events.back().type, "done");
  EXPECT_EQ(other.get(), 200);

  // released once the stream finished
  auto again = c.Post("/api/chat", body, "application/json");
  ASSERT_TRUE(again);
  EXPECT_EQ(again->status, 200);
}

}  // namespace
}  // namespace kt
