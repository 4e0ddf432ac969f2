#pragma once
// Application configuration: JSON config file, environment overrides, and
// the provider factory. Built-in defaults reproduce the reference
// hyperparameter setting, so an empty config is a valid config.
//
// Precedence (lowest to highest): built-in default < config file < env var
// < CLI flag. Env overrides: ESMEM_API_KEY, ESMEM_Q, ESMEM_TAU_C,
// ESMEM_ALPHA, ESMEM_TOP_K, ESMEM_JOBS.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "esmem/errors.hpp"
#include "esmem/http_provider.hpp"
#include "esmem/logging.hpp"
#include "esmem/memory.hpp"
#include "esmem/mock_provider.hpp"
#include "esmem/retrieval.hpp"
#include "esmem/segmentation.hpp"

namespace esmem {

enum class ProviderKind { http, mock };

struct ProviderSettings {
  ProviderKind kind = ProviderKind::http;
  ProviderConfig http;                    // kind == http
  std::filesystem::path mock_script;      // kind == mock
  std::uint64_t mock_embed_seed = 0;
  std::size_t mock_embed_dim = 64;
  std::optional<std::string> embed_base_url;  // distinct embeddings endpoint
  std::string embed_model_name;
};

struct AppConfig {
  ProviderSettings provider;
  SegmentationConfig segmentation;
  MemoryBuildConfig memory;
  RetrievalParams retrieval;
  int jobs = 4;
  LogLevel log_level = LogLevel::info;
  std::string prompt_set_id = "builtin/v1";
  std::optional<std::filesystem::path> prompt_dir;

  void validate() const {
    segmentation.validate();
    memory.validate();
    retrieval.validate();
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (provider.kind == ProviderKind::http) provider.http.validate();
    if (provider.kind == ProviderKind::mock && provider.mock_embed_dim < 2)
      throw ConfigError("mock embed_dim must be >= 2");
    if (!prompt_dir && prompt_set_id != "builtin/v1")
      throw ConfigError("unknown prompt set id: " + prompt_set_id);
  }

  // Snapshot for repository manifests and artifact headers. Secrets are
  // never persisted.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["provider"] = {{"kind", provider.kind == ProviderKind::http ? "http" : "mock"}};
    if (provider.kind == ProviderKind::http) {
      j["provider"]["base_url"] = provider.http.base_url;
      j["provider"]["model"] = provider.http.model_name;
      if (provider.embed_base_url)
        j["provider"]["embedding_base_url"] = *provider.embed_base_url;
      if (!provider.embed_model_name.empty())
        j["provider"]["embedding_model"] = provider.embed_model_name;
    } else if (!provider.mock_script.empty()) {
      // the script file owns the embedding seed/dim in this mode
      j["provider"]["script_path"] = provider.mock_script.string();
    } else {
      j["provider"]["embed_seed"] = provider.mock_embed_seed;
      j["provider"]["embed_dim"] = provider.mock_embed_dim;
    }
    j["segmentation"] = {{"quantile_q", segmentation.quantile_q},
                         {"tau_c", segmentation.tau_c},
                         {"context_window", segmentation.context_window}};
    nlohmann::json labels = nlohmann::json::array();
    for (const IntentLabel& l : segmentation.labels)
      labels.push_back({{"name", l.name},
                        {"kind", l.kind == IntentKind::shift ? "shift" : "cont"}});
    j["segmentation"]["labels"] = std::move(labels);
    j["memory"] = {{"boundary_context_len", memory.boundary_context_len}};
    j["retrieval"] = {{"anchor_k", retrieval.anchor_k},
                      {"window_w", retrieval.window_w},
                      {"alpha", retrieval.alpha},
                      {"final_k", retrieval.final_k}};
    j["prompts"] = {{"id", prompt_set_id}};
    j["jobs"] = jobs;
    return j;
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::vector<std::string>& known,
                                const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown config key '" + key + "' in " + where);
  }
}

inline std::optional<std::string> env_string(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

inline std::optional<double> env_double(const char* name) {
  const auto s = env_string(name);
  if (!s) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(*s, &used);
    if (used != s->size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string(name) + " is not a number: " + *s);
  }
}

inline std::optional<int> env_int(const char* name) {
  const auto v = env_double(name);
  if (!v) return std::nullopt;
  return static_cast<int>(*v);
}

}  // namespace detail

inline AppConfig parse_app_config(const nlohmann::json& j) {
  AppConfig cfg;
  detail::reject_unknown_keys(
      j, {"provider", "segmentation", "memory", "retrieval", "prompts", "jobs",
          "log_level"},
      "config root");

  if (j.contains("provider")) {
    const auto& p = j.at("provider");
    detail::reject_unknown_keys(
        p,
        {"kind", "base_url", "model", "api_key", "timeout_ms", "max_retries",
         "concurrency", "retry_backoff_ms", "max_text_chars", "embedding_base_url",
         "embedding_model", "script_path", "embed_seed", "embed_dim"},
        "provider");
    const std::string kind = p.value("kind", "http");
    if (kind == "http")
      cfg.provider.kind = ProviderKind::http;
    else if (kind == "mock")
      cfg.provider.kind = ProviderKind::mock;
    else
      throw ConfigError("provider.kind must be 'http' or 'mock'");
    cfg.provider.http.base_url = p.value("base_url", std::string{});
    cfg.provider.http.model_name = p.value("model", std::string{});
    cfg.provider.http.api_key = p.value("api_key", std::string{});
    cfg.provider.http.timeout =
        std::chrono::milliseconds(p.value("timeout_ms", 30000));
    cfg.provider.http.max_retries = p.value("max_retries", 3);
    cfg.provider.http.concurrency_limit = p.value("concurrency", 4);
    cfg.provider.http.retry_backoff_ms = p.value("retry_backoff_ms", 250);
    cfg.provider.http.max_text_chars = p.value("max_text_chars", 8192);
    if (p.contains("embedding_base_url"))
      cfg.provider.embed_base_url = p.at("embedding_base_url").get<std::string>();
    cfg.provider.embed_model_name = p.value("embedding_model", std::string{});
    cfg.provider.mock_script = p.value("script_path", std::string{});
    cfg.provider.mock_embed_seed = p.value("embed_seed", std::uint64_t{0});
    cfg.provider.mock_embed_dim = p.value("embed_dim", std::size_t{64});
  }

  if (j.contains("segmentation")) {
    const auto& s = j.at("segmentation");
    detail::reject_unknown_keys(
        s, {"quantile_q", "tau_c", "context_window", "labels"}, "segmentation");
    cfg.segmentation.quantile_q = s.value("quantile_q", cfg.segmentation.quantile_q);
    cfg.segmentation.tau_c = s.value("tau_c", cfg.segmentation.tau_c);
    cfg.segmentation.context_window =
        s.value("context_window", cfg.segmentation.context_window);
    if (s.contains("labels")) {
      cfg.segmentation.labels.clear();
      for (const auto& jl : s.at("labels")) {
        const std::string kind = jl.at("kind").get<std::string>();
        if (kind != "shift" && kind != "cont")
          throw ConfigError("label kind must be 'shift' or 'cont'");
        cfg.segmentation.labels.push_back(
            IntentLabel{jl.at("name").get<std::string>(),
                        kind == "shift" ? IntentKind::shift : IntentKind::cont});
      }
    }
  }

  if (j.contains("memory")) {
    const auto& m = j.at("memory");
    detail::reject_unknown_keys(m, {"boundary_context_len"}, "memory");
    cfg.memory.boundary_context_len =
        m.value("boundary_context_len", cfg.memory.boundary_context_len);
  }

  if (j.contains("retrieval")) {
    const auto& r = j.at("retrieval");
    detail::reject_unknown_keys(r, {"anchor_k", "window_w", "alpha", "final_k"},
                                "retrieval");
    cfg.retrieval.anchor_k = r.value("anchor_k", cfg.retrieval.anchor_k);
    cfg.retrieval.window_w = r.value("window_w", cfg.retrieval.window_w);
    cfg.retrieval.alpha = r.value("alpha", cfg.retrieval.alpha);
    cfg.retrieval.final_k = r.value("final_k", cfg.retrieval.final_k);
  }

  if (j.contains("prompts")) {
    const auto& p = j.at("prompts");
    detail::reject_unknown_keys(p, {"id", "dir"}, "prompts");
    cfg.prompt_set_id = p.value("id", cfg.prompt_set_id);
    if (p.contains("dir"))
      cfg.prompt_dir = std::filesystem::path(p.at("dir").get<std::string>());
  }

  cfg.jobs = j.value("jobs", cfg.jobs);
  if (j.contains("log_level"))
    cfg.log_level = parse_log_level(j.at("log_level").get<std::string>());
  return cfg;
}

// Loads the config file (or defaults when absent) and applies environment
// overrides. CLI flags are layered on top by the caller.
inline AppConfig load_app_config(
    const std::optional<std::filesystem::path>& path = std::nullopt) {
  AppConfig cfg;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config file: " + path->string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path->string() + ": " + e.what());
    }
    cfg = parse_app_config(j);
  }

  if (const auto v = detail::env_string("ESMEM_API_KEY"))
    cfg.provider.http.api_key = *v;
  if (const auto v = detail::env_double("ESMEM_Q")) cfg.segmentation.quantile_q = *v;
  if (const auto v = detail::env_double("ESMEM_TAU_C")) cfg.segmentation.tau_c = *v;
  if (const auto v = detail::env_double("ESMEM_ALPHA")) cfg.retrieval.alpha = *v;
  if (const auto v = detail::env_int("ESMEM_TOP_K")) cfg.retrieval.final_k = *v;
  if (const auto v = detail::env_int("ESMEM_JOBS")) cfg.jobs = *v;
  return cfg;
}

inline prompts::PromptTemplates resolve_templates(const AppConfig& cfg) {
  if (cfg.prompt_dir) return prompts::load_from_dir(*cfg.prompt_dir);
  return prompts::builtin();
}

// Owns the provider graph: either one backend, or a router over distinct
// chat/embedding endpoints.
struct ProviderHandle {
  std::unique_ptr<Provider> chat_backend;
  std::unique_ptr<Provider> embed_backend;  // null when shared
  std::unique_ptr<Provider> router;         // null when shared

  Provider& get() { return router ? *router : *chat_backend; }
};

inline std::map<std::string, std::string> load_mock_script(
    const std::filesystem::path& path, std::uint64_t& seed, std::size_t& dim) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open mock script: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("mock script " + path.string() + ": " + e.what());
  }
  if (j.contains("embed_seed")) seed = j.at("embed_seed").get<std::uint64_t>();
  if (j.contains("embed_dim")) dim = j.at("embed_dim").get<std::size_t>();
  std::map<std::string, std::string> script;
  if (j.contains("chat"))
    for (const auto& [k, v] : j.at("chat").items()) script[k] = v.get<std::string>();
  return script;
}

inline ProviderHandle make_provider(const AppConfig& cfg) {
  ProviderHandle handle;
  if (cfg.provider.kind == ProviderKind::mock) {
    std::uint64_t seed = cfg.provider.mock_embed_seed;
    std::size_t dim = cfg.provider.mock_embed_dim;
    std::map<std::string, std::string> script;
    if (!cfg.provider.mock_script.empty())
      script = load_mock_script(cfg.provider.mock_script, seed, dim);
    handle.chat_backend = std::make_unique<MockProvider>(std::move(script), seed, dim);
    return handle;
  }

  handle.chat_backend = std::make_unique<HttpProvider>(cfg.provider.http);
  if (cfg.provider.embed_base_url || !cfg.provider.embed_model_name.empty()) {
    ProviderConfig embed_cfg = cfg.provider.http;
    if (cfg.provider.embed_base_url) embed_cfg.base_url = *cfg.provider.embed_base_url;
    if (!cfg.provider.embed_model_name.empty())
      embed_cfg.model_name = cfg.provider.embed_model_name;
    handle.embed_backend = std::make_unique<HttpProvider>(embed_cfg);
    handle.router = std::make_unique<RoutingProvider>(*handle.chat_backend,
                                                      *handle.embed_backend);
  }
  return handle;
}

}  // namespace esmem
