#pragma once
// Model-capability abstraction: chat generation and text embedding.
// Concrete backends: HttpProvider (OpenAI-compatible) and MockProvider.

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "esmem/errors.hpp"
#include "esmem/logging.hpp"

namespace esmem {

struct ChatRequest {
  std::string system_prompt;
  std::string user_prompt;
  double temperature = 0.0;  // pipeline calls are reproducible by default
  int max_tokens = 512;
};

struct EmbeddingVector {
  std::vector<float> values;

  std::size_t dim() const noexcept { return values.size(); }

  bool operator==(const EmbeddingVector&) const = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw InvariantError("cosine: dimension mismatch (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw InvariantError("cosine: zero-norm vector");
  return dot(a, b) / (na * nb);
}

inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine(std::span<const float>(a.values), std::span<const float>(b.values));
}

inline void l2_normalize(EmbeddingVector& v) {
  double norm_sq = 0.0;
  for (float x : v.values) {
    if (!std::isfinite(x)) throw InvariantError("embedding contains non-finite value");
    norm_sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-12) throw InvariantError("embedding has zero norm");
  for (float& x : v.values) x = static_cast<float>(x / norm);
}

struct ProviderConfig {
  std::string base_url;
  std::string model_name;
  std::string api_key;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  int concurrency_limit = 4;
  int retry_backoff_ms = 250;   // doubled per attempt
  int max_text_chars = 8192;    // embed inputs beyond this are truncated

  void validate() const {
    if (concurrency_limit < 1) throw ConfigError("concurrency_limit must be >= 1");
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (timeout.count() <= 0) throw ConfigError("timeout must be positive");
  }
};

// Counting admission gate; bounds in-flight provider requests.
class ConcurrencyGate {
 public:
  explicit ConcurrencyGate(int limit) : limit_(limit < 1 ? 1 : limit) {}

  class Ticket {
   public:
    explicit Ticket(ConcurrencyGate& gate) : gate_(gate) { gate_.acquire(); }
    ~Ticket() { gate_.release(); }
    Ticket(const Ticket&) = delete;
    Ticket& operator=(const Ticket&) = delete;

   private:
    ConcurrencyGate& gate_;
  };

 private:
  void acquire() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return in_flight_ < limit_; });
    ++in_flight_;
  }
  void release() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      --in_flight_;
    }
    cv_.notify_one();
  }

  int limit_;
  int in_flight_ = 0;
  std::mutex mutex_;
  std::condition_variable cv_;
};

// Shared base. Validation and post-normalization live here so every backend
// honors the same contract: one unit-norm vector per input, same order.
class Provider {
 public:
  virtual ~Provider() = default;

  std::string chat(const ChatRequest& req) {
    if (req.system_prompt.empty() || req.user_prompt.empty())
      throw InvariantError("chat prompts must be non-empty");
    if (req.temperature < 0.0 || req.temperature > 2.0)
      throw InvariantError("temperature outside [0, 2]");
    if (req.max_tokens < 1) throw InvariantError("max_tokens must be positive");
    return chat_impl(req);
  }

  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) {
    if (texts.empty()) throw InvariantError("embed: no input texts");
    std::vector<std::string> prepared;
    prepared.reserve(texts.size());
    for (const std::string& t : texts) {
      if (t.empty()) throw InvariantError("embed: empty input text");
      prepared.push_back(truncate_utf8(t, max_text_chars_));
    }
    std::vector<EmbeddingVector> vectors = embed_impl(prepared);
    if (vectors.size() != texts.size())
      throw Error("embedding backend returned " + std::to_string(vectors.size()) +
                  " vectors for " + std::to_string(texts.size()) + " inputs");
    for (EmbeddingVector& v : vectors) {
      if (v.dim() < 2) throw Error("embedding dimension must be >= 2");
      l2_normalize(v);
    }
    return vectors;
  }

  void set_max_text_chars(int n) { max_text_chars_ = n; }

 protected:
  virtual std::string chat_impl(const ChatRequest& req) = 0;
  virtual std::vector<EmbeddingVector> embed_impl(
      const std::vector<std::string>& texts) = 0;

  static std::string truncate_utf8(const std::string& text, int max_chars) {
    if (max_chars <= 0 || text.size() <= static_cast<std::size_t>(max_chars))
      return text;
    std::size_t cut = static_cast<std::size_t>(max_chars);
    // back off to a codepoint start so we never split a UTF-8 sequence
    while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
    log_warn("embed input truncated from " + std::to_string(text.size()) + " to " +
             std::to_string(cut) + " bytes");
    return text.substr(0, cut);
  }

 private:
  int max_text_chars_ = 8192;
};

// Routes chat and embedding to two distinct backends (e.g. different
// endpoints for the chat model and the embedding model).
class RoutingProvider : public Provider {
 public:
  RoutingProvider(Provider& chat_backend, Provider& embed_backend)
      : chat_(chat_backend), embed_(embed_backend) {}

 protected:
  std::string chat_impl(const ChatRequest& req) override { return chat_.chat(req); }
  std::vector<EmbeddingVector> embed_impl(
      const std::vector<std::string>& texts) override {
    return embed_.embed(texts);
  }

 private:
  Provider& chat_;
  Provider& embed_;
};

}  // namespace esmem
