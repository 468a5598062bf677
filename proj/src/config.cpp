#include "kt/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "kt/ollama_backend.hpp"
#include "kt/stub_backend.hpp"

namespace kt {

using nlohmann::json;

std::optional<std::string> process_env(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

namespace {

int parse_port(const std::string& text, const std::string& origin) {
  int port = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), port);
  if (ec != std::errc() || p != text.data() + text.size() || port < 0 || port > 65535) {
    throw std::invalid_argument(origin + ": invalid port '" + text + "'");
  }
  return port;
}

void apply_addrep_json(const json& j, AddRepConfig& a) {
  for (const auto& [key, v] : j.items()) {
    if (key == "topk_per_query") v.get_to(a.topk_per_query);
    else if (key == "m") v.get_to(a.m);
    else if (key == "distance_threshold") v.get_to(a.distance_threshold);
    else if (key == "history_window") v.get_to(a.history_window);
    else if (key == "mode") a.mode = parse_pipeline_mode(v.get<std::string>());
    else if (key == "judge_parallelism") v.get_to(a.judge_parallelism);
    else if (key == "retrieval_parallelism") v.get_to(a.retrieval_parallelism);
    else throw std::invalid_argument("unknown addrep key: " + key);
  }
  a.validate();
}

void apply_chunking_json(const json& j, ChunkingConfig& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "max_tokens") v.get_to(c.max_tokens);
    else if (key == "overlap_fraction") v.get_to(c.overlap_fraction);
    else if (key == "min_chars") v.get_to(c.min_chars);
    else throw std::invalid_argument("unknown chunking key: " + key);
  }
  c.validate();
}

}  // namespace

void apply_config_json(const json& j, AppConfig& cfg) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "backend_url") v.get_to(cfg.backend_url);
    else if (key == "kb_dir") cfg.kb_dir = v.get<std::string>();
    else if (key == "host") v.get_to(cfg.host);
    else if (key == "port") v.get_to(cfg.port);
    else if (key == "chat_model") v.get_to(cfg.chat_model);
    else if (key == "embedding_model") v.get_to(cfg.embedding_model);
    else if (key == "prompts_dir") cfg.prompts_dir = v.get<std::string>();
    else if (key == "filter_agent") v.get_to(cfg.filter_agent);
    else if (key == "chunking") apply_chunking_json(v, cfg.chunking);
    else if (key == "addrep") apply_addrep_json(v, cfg.addrep);
    else throw std::invalid_argument("unknown config key: " + key);
  }
}

AppConfig resolve_config(const std::optional<std::filesystem::path>& config_file,
                         const ConfigOverrides& cli, const EnvLookup& env) {
  AppConfig cfg;
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw std::invalid_argument("cannot open config file " + config_file->string());
    try {
      apply_config_json(json::parse(in), cfg);
    } catch (const json::exception& e) {
      throw std::invalid_argument(config_file->string() + ": " + e.what());
    }
  }
  if (auto v = env("KT_BACKEND_URL")) cfg.backend_url = *v;
  if (auto v = env("KT_KB_DIR")) cfg.kb_dir = *v;
  if (auto v = env("KT_PORT")) cfg.port = parse_port(*v, "KT_PORT");
  if (cli.backend_url) cfg.backend_url = *cli.backend_url;
  if (cli.kb_dir) cfg.kb_dir = *cli.kb_dir;
  if (cli.port) cfg.port = *cli.port;
  return cfg;
}

std::shared_ptr<InferenceBackend> make_backend(const std::string& url) {
  constexpr std::string_view kStub = "stub://";
  if (url.rfind(kStub, 0) == 0) {
    StubBackend::Options opts;
    const std::string rest = url.substr(kStub.size());
    if (!rest.empty()) {
      auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), opts.dim);
      if (ec != std::errc() || p != rest.data() + rest.size() || opts.dim < 1) {
        throw std::invalid_argument("invalid stub backend url: " + url);
      }
    }
    return std::make_shared<StubBackend>(opts);
  }
  if (url.rfind("http://", 0) == 0) {
    return std::make_shared<OllamaBackend>(url);
  }
  throw std::invalid_argument("unsupported backend url: " + url);
}

}  // namespace kt
