#pragma once
// OpenAI-compatible HTTP backend: POST {base_url}/chat/completions and
// {base_url}/embeddings with bearer-token auth. Transient failures
// (connect/timeout, 408, 429, 5xx) are retried with exponential backoff up
// to max_retries; other 4xx fail immediately.

#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "esmem/provider.hpp"

namespace esmem {

class HttpProvider : public Provider {
 public:
  explicit HttpProvider(ProviderConfig config)
      : config_(std::move(config)), gate_(config_.concurrency_limit) {
    config_.validate();
    if (config_.base_url.empty()) throw ConfigError("base_url is empty");
    split_base_url(config_.base_url, origin_, path_prefix_);
    set_max_text_chars(config_.max_text_chars);
  }

  const ProviderConfig& config() const noexcept { return config_; }

 protected:
  std::string chat_impl(const ChatRequest& req) override {
    nlohmann::json body{
        {"model", config_.model_name},
        {"messages",
         {{{"role", "system"}, {"content", req.system_prompt}},
          {{"role", "user"}, {"content", req.user_prompt}}}},
        {"temperature", req.temperature},
        {"max_tokens", req.max_tokens}};
    const nlohmann::json reply = post_json("/chat/completions", body);
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("unexpected chat completion payload: " + std::string(e.what()));
    }
  }

  std::vector<EmbeddingVector> embed_impl(
      const std::vector<std::string>& texts) override {
    nlohmann::json body{{"model", config_.model_name}, {"input", texts}};
    const nlohmann::json reply = post_json("/embeddings", body);
    std::vector<EmbeddingVector> out(texts.size());
    try {
      const auto& data = reply.at("data");
      if (data.size() != texts.size())
        throw Error("embeddings response size mismatch");
      for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t slot = data[i].contains("index")
                                     ? data[i].at("index").get<std::size_t>()
                                     : i;
        if (slot >= out.size()) throw Error("embeddings response index out of range");
        out[slot].values = data[i].at("embedding").get<std::vector<float>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("unexpected embeddings payload: " + std::string(e.what()));
    }
    return out;
  }

 private:
  static void split_base_url(const std::string& url, std::string& origin,
                             std::string& prefix) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
      throw ConfigError("base_url must start with http:// or https://");
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
      origin = url;
      prefix.clear();
    } else {
      origin = url.substr(0, path_start);
      prefix = url.substr(path_start);
      while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    }
  }

  static bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
  }

  nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body) {
    ConcurrencyGate::Ticket ticket(gate_);
    const std::string payload = body.dump();
    const std::string path = path_prefix_ + endpoint;

    httplib::Headers headers;
    std::string api_key = config_.api_key;
    if (const char* env_key = std::getenv("ESMEM_API_KEY"); env_key && *env_key)
      api_key = env_key;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    std::string last_error;
    int last_status = 0;
    std::string last_excerpt;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) {
        const auto delay = std::chrono::milliseconds(
            config_.retry_backoff_ms * (1 << (attempt - 1)));
        log_debug("retrying " + endpoint + " (attempt " +
                  std::to_string(attempt + 1) + ") after " +
                  std::to_string(delay.count()) + "ms");
        std::this_thread::sleep_for(std::min(delay, std::chrono::milliseconds(4000)));
      }

      httplib::Client client(origin_);
      client.set_connection_timeout(config_.timeout);
      client.set_read_timeout(config_.timeout);
      client.set_write_timeout(config_.timeout);

      const httplib::Result res =
          client.Post(path, headers, payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        last_status = 0;
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
          throw ParseError("provider returned invalid JSON: " + std::string(e.what()));
        }
      }
      last_status = res->status;
      last_excerpt = res->body.substr(0, 200);
      if (!retryable_status(res->status)) throw ApiError(res->status, last_excerpt);
    }
    if (last_status != 0)
      throw ApiError(last_status,
                     last_excerpt + " (after " +
                         std::to_string(config_.max_retries + 1) + " attempts)");
    throw TransportError("POST " + path + " failed after " +
                         std::to_string(config_.max_retries + 1) + " attempts: " +
                         last_error);
  }

  ProviderConfig config_;
  std::string origin_;
  std::string path_prefix_;
  ConcurrencyGate gate_{4};
};

}  // namespace esmem
