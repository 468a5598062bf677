#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "kt/addrep.hpp"
#include "kt/config.hpp"
#include "kt/eval.hpp"
#include "kt/json_io.hpp"
#include "kt/kb.hpp"
#include "kt/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  bool json_output = false;
  bool verbose = false;
  std::optional<std::string> config_file;
  std::optional<std::string> kb_dir;
  std::optional<std::string> backend_url;
};

struct Context {
  kt::AppConfig cfg;
  std::shared_ptr<kt::InferenceBackend> backend;
  std::shared_ptr<kt::AgentRegistry> agents;
  std::shared_ptr<kt::KnowledgeBase> kb;
};

Context open_context(const Globals& g) {
  Context ctx;
  kt::ConfigOverrides cli;
  cli.backend_url = g.backend_url;
  if (g.kb_dir) cli.kb_dir = *g.kb_dir;
  ctx.cfg = kt::resolve_config(g.config_file ? std::optional<fs::path>(*g.config_file) : std::nullopt, cli);
  ctx.backend = kt::make_backend(ctx.cfg.backend_url);
  ctx.agents = std::make_shared<kt::AgentRegistry>(ctx.cfg.chat_model);
  if (ctx.cfg.prompts_dir) ctx.agents->load_prompt_overrides(*ctx.cfg.prompts_dir);

  kt::KbOptions kb_options;
  kb_options.embedding_model = ctx.cfg.embedding_model;
  if (fs::exists(ctx.cfg.kb_dir / kt::KnowledgeBase::kManifestFile)) {
    std::vector<std::string> warnings;
    ctx.kb = kt::KnowledgeBase::load(ctx.cfg.kb_dir, ctx.backend, ctx.agents, kb_options, &warnings);
    for (const auto& w : warnings) spdlog::warn("{}", w);
  } else {
    ctx.kb = std::make_shared<kt::KnowledgeBase>(ctx.backend, ctx.agents, kb_options);
  }
  return ctx;
}

void print_hits(const std::vector<kt::RetrievalHit>& hits, bool as_json) {
  if (as_json) {
    std::cout << json(hits).dump(2) << '\n';
    return;
  }
  for (const auto& h : hits) {
    std::cout << fmt::format("[{:.4f}] #{} {} ({})\n  {}\n", h.distance, h.snippet_id, h.doc_title,
                             h.source_path, h.text);
  }
}

int cmd_ingest(const Globals& g, const std::vector<std::string>& files, bool no_filter,
               const std::optional<std::string>& extractor) {
  Context ctx = open_context(g);
  json out = json::array();
  for (const auto& f : files) {
    const kt::RawDocument raw = kt::load_document(f, extractor);
    const kt::DocumentRecord rec = ctx.kb->ingest_document(raw, ctx.cfg.chunking, ctx.cfg.filter_agent && !no_filter);
    if (g.json_output) {
      out.push_back(rec);
    } else {
      std::cout << fmt::format("#{} {}: {} snippets ({} dropped by rule, {} by filter agent)\n", rec.doc_id,
                               rec.title, rec.snippet_count, rec.dropped_by_rule, rec.dropped_by_agent);
    }
  }
  ctx.kb->save(ctx.cfg.kb_dir);
  if (g.json_output) std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_query(const Globals& g, const std::string& query, int topk) {
  Context ctx = open_context(g);
  print_hits(ctx.kb->retrieve(query, topk), g.json_output);
  return 0;
}

int run_chat_turn(const Globals& g, Context& ctx, const std::string& message, const kt::AddRepConfig& cfg,
                  std::vector<kt::ChatMessage>& history) {
  kt::Pipeline pipeline(*ctx.backend, *ctx.agents);
  kt::PipelineRequest req{message, history, {}};
  kt::TraceSink sink;
  if (!g.json_output) {
    sink = [](const kt::TraceEvent& ev) {
      if (const auto* r = std::get_if<kt::trace::RefinedQuery>(&ev)) {
        std::cerr << "refined: " << r->query << '\n';
      } else if (const auto* d = std::get_if<kt::trace::DivergentQuery>(&ev)) {
        std::cerr << "divergent " << d->index << ": " << d->query << '\n';
      } else if (const auto* a = std::get_if<kt::trace::AnswerDelta>(&ev)) {
        std::cout << a->text << std::flush;
      } else if (const auto* e = std::get_if<kt::trace::Error>(&ev)) {
        std::cerr << "error: " << e->message << '\n';
      }
    };
  }
  const kt::PipelineResult result = pipeline.run(req, ctx.kb.get(), cfg, sink);
  if (g.json_output) {
    json out = kt::result_summary_json(result);
    out["trace"] = json::array();
    for (const auto& ev : result.trace) out["trace"].push_back(kt::trace_event_json(ev));
    std::cout << out.dump(2) << '\n';
  } else {
    std::cout << '\n';
    for (std::size_t i = 0; i < result.used_snippets.size(); ++i) {
      const auto& u = result.used_snippets[i];
      std::cout << fmt::format("  [{}] {} ({:.4f})\n", i + 1, u.hit.doc_title, u.hit.distance);
    }
  }
  history.push_back({kt::MessageRole::user, message});
  history.push_back({kt::MessageRole::assistant, result.answer});
  return result.error ? 1 : 0;
}

int cmd_chat(const Globals& g, const std::optional<std::string>& message, const std::string& mode) {
  Context ctx = open_context(g);
  kt::AddRepConfig cfg = ctx.cfg.addrep;
  cfg.mode = kt::parse_pipeline_mode(mode);
  std::vector<kt::ChatMessage> history;
  if (message) return run_chat_turn(g, ctx, *message, cfg, history);
  std::string line;
  int rc = 0;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    rc = run_chat_turn(g, ctx, line, cfg, history);
  }
  return rc;
}

int cmd_eval(const Globals& g, const std::string& dataset_path, const std::string& mode, const std::string& report,
             bool no_reject, std::size_t parallel, bool no_cache) {
  Context ctx = open_context(g);
  const auto dataset = kt::load_dataset(fs::path(dataset_path));
  kt::EvalConfig cfg;
  cfg.pipeline = ctx.cfg.addrep;
  cfg.pipeline.mode = kt::parse_pipeline_mode(mode);
  cfg.allow_reject = !no_reject;
  cfg.parallelism = parallel;
  cfg.use_cache = !no_cache;
  kt::Pipeline pipeline(*ctx.backend, *ctx.agents);
  kt::EvalRunStats stats;
  const kt::EvalReport r = kt::run_eval(dataset, pipeline, ctx.kb.get(), *ctx.agents, cfg, report, &stats);
  if (g.json_output) {
    std::cout << kt::report_json(r).dump(2) << '\n';
  } else {
    std::cout << fmt::format("mode {}  n={}  accuracy={:.4f}  rejection={:.4f}  macro_f1={:.4f}  micro_f1={:.4f}\n",
                             kt::to_string(r.mode), r.n, r.accuracy, r.rejection_rate, r.macro_f1, r.micro_f1);
    for (const auto& [t, s] : r.per_type) {
      std::cout << fmt::format("  {:<10} n={:<4} accuracy={:.4f}\n", kt::to_string(t), s.n, s.accuracy);
    }
    std::cout << fmt::format("report: {}  ({} cached, {} run, {} failed)\n", report, stats.cached, stats.executed,
                             stats.failed);
  }
  return stats.failed == 0 ? 0 : 1;
}

kt::Server* g_server = nullptr;

int cmd_serve(const Globals& g, std::optional<int> port, const std::string& host) {
  Context ctx = open_context(g);
  if (port) ctx.cfg.port = *port;
  kt::ServerOptions opts;
  opts.host = host.empty() ? ctx.cfg.host : host;
  opts.port = ctx.cfg.port;
  opts.chunking = ctx.cfg.chunking;
  opts.filter_agent = ctx.cfg.filter_agent;
  opts.addrep = ctx.cfg.addrep;
  opts.kb_dir = ctx.cfg.kb_dir;
  kt::Server server(ctx.backend, ctx.agents, ctx.kb, opts);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("kt");
  spdlog::set_default_logger(logger);

  CLI::App app{"Local retrieval-augmented Q&A over a document knowledge base"};
  app.require_subcommand(1);
  Globals g;
  app.add_flag("--json", g.json_output, "Machine-readable JSON on stdout");
  app.add_flag("-v,--verbose", g.verbose, "Verbose logging");
  app.add_option("--config", g.config_file, "JSON config file");
  app.add_option("--kb-dir", g.kb_dir, "Knowledge base directory");
  app.add_option("--backend-url", g.backend_url, "Inference server URL, or stub://<dim>");

  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  std::optional<int> port;
  std::string host;
  serve->add_option("--port", port, "Listen port");
  serve->add_option("--host", host, "Listen address");

  auto* ingest = app.add_subcommand("ingest", "Add documents to the knowledge base");
  std::vector<std::string> files;
  bool no_filter = false;
  std::optional<std::string> extractor;
  ingest->add_option("files", files, "Documents to ingest")->required()->check(CLI::ExistingFile);
  ingest->add_flag("--no-filter-agent", no_filter, "Skip the filter agent");
  ingest->add_option("--extractor", extractor, "Shell command turning stdin bytes into text");

  auto* query = app.add_subcommand("query", "Retrieve snippets for a query");
  std::string query_text;
  int topk = 5;
  query->add_option("query", query_text, "Query text")->required();
  query->add_option("--topk", topk, "Number of snippets")->check(CLI::PositiveNumber);

  auto* chat = app.add_subcommand("chat", "Ask a question (reads stdin lines without a message)");
  std::optional<std::string> message;
  std::string chat_mode = "addrep";
  chat->add_option("message", message, "Question");
  chat->add_option("--mode", chat_mode, "baseline | baseline_rs | addrep")
      ->check(CLI::IsMember({"baseline", "baseline_rs", "addrep"}));

  auto* eval = app.add_subcommand("eval", "Run a multiple-choice benchmark");
  std::string dataset, report = "eval_report.json", eval_mode = "addrep";
  bool no_reject = false, no_cache = false;
  std::size_t parallel = 1;
  eval->add_option("dataset", dataset, "JSONL dataset")->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", eval_mode, "baseline | baseline_rs | addrep")
      ->check(CLI::IsMember({"baseline", "baseline_rs", "addrep"}));
  eval->add_option("--report", report, "Report path (JSON; CSV written alongside)");
  eval->add_flag("--no-reject", no_reject, "Do not offer [REJECT]");
  eval->add_flag("--no-cache", no_cache, "Ignore and do not write the result cache");
  eval->add_option("--parallel", parallel, "Items in flight")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(g.verbose ? spdlog::level::debug : (*serve ? spdlog::level::info : spdlog::level::warn));

  try {
    if (*serve) return cmd_serve(g, port, host);
    if (*ingest) return cmd_ingest(g, files, no_filter, extractor);
    if (*query) return cmd_query(g, query_text, topk);
    if (*chat) return cmd_chat(g, message, chat_mode);
    if (*eval) return cmd_eval(g, dataset, eval_mode, report, no_reject, parallel, no_cache);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
