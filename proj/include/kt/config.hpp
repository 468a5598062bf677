#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "kt/addrep.hpp"
#include "kt/backend.hpp"
#include "kt/ingest.hpp"

namespace kt {

struct AppConfig {
  std::string backend_url = "http://127.0.0.1:11434";
  std::filesystem::path kb_dir = "kb";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string chat_model = "deepseek-r1:7b";
  std::string embedding_model = "bge-m3";
  std::optional<std::filesystem::path> prompts_dir;
  bool filter_agent = true;
  ChunkingConfig chunking{};
  AddRepConfig addrep{};
};

/// Values given on the command line; unset fields defer to env and file.
struct ConfigOverrides {
  std::optional<std::string> backend_url;
  std::optional<std::filesystem::path> kb_dir;
  std::optional<int> port;
};

using EnvLookup = std::function<std::optional<std::string>(const char*)>;

/// Reads the process environment.
std::optional<std::string> process_env(const char* name);

/// Applies a JSON config document onto `cfg`; unknown keys are an error.
void apply_config_json(const nlohmann::json& j, AppConfig& cfg);

/// Defaults < config file < KT_BACKEND_URL / KT_KB_DIR / KT_PORT < CLI flags.
AppConfig resolve_config(const std::optional<std::filesystem::path>& config_file,
                         const ConfigOverrides& cli, const EnvLookup& env = process_env);

/// "stub://" or "stub://<dim>" gives a StubBackend; http:// URLs an
/// OllamaBackend.
std::shared_ptr<InferenceBackend> make_backend(const std::string& url);

}  // namespace kt
