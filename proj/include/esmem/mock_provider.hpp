#pragma once
// Deterministic scripted provider for offline tests and reproducible runs.
//
// Chat: exact lookup of the user prompt in a script map; a miss raises
// UnscriptedPromptError (never a silent default).
//
// Embeddings: seeded hash projection, fixed so tests can host an
// independent oracle. For input text, seed s and dimension d:
//   h     = FNV-1a 64-bit over the UTF-8 bytes of the text
//   state = h XOR (0x9E3779B97F4A7C15 * (s + 1))        (wrapping multiply)
//   v[i]  = splitmix64(state) drawn d times in order, each mapped to
//           [-1, 1) via (z >> 11) * 2^-53 * 2 - 1
//   result is v L2-normalized.
// Identical strings therefore always embed to identical unit vectors.

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "esmem/provider.hpp"

namespace esmem {

namespace detail {

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

class MockProvider : public Provider {
 public:
  MockProvider(std::map<std::string, std::string> script, std::uint64_t embed_seed,
               std::size_t dim)
      : script_(std::move(script)), embed_seed_(embed_seed), dim_(dim) {
    if (dim_ < 2) throw ConfigError("mock embedding dim must be >= 2");
  }

  static EmbeddingVector hash_embedding(std::string_view text, std::uint64_t seed,
                                        std::size_t dim) {
    EmbeddingVector v = raw_projection(text, seed, dim);
    l2_normalize(v);
    return v;
  }

  // Captured requests, in arrival order; lets tests assert prompt assembly.
  std::vector<ChatRequest> chat_log() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return chat_log_;
  }

 protected:
  std::string chat_impl(const ChatRequest& req) override {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      chat_log_.push_back(req);
    }
    const auto it = script_.find(req.user_prompt);
    if (it == script_.end()) throw UnscriptedPromptError(req.user_prompt);
    return it->second;
  }

  // Returns the raw projection; the Provider::embed wrapper applies the one
  // and only normalization pass, matching hash_embedding exactly.
  std::vector<EmbeddingVector> embed_impl(
      const std::vector<std::string>& texts) override {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const std::string& t : texts)
      out.push_back(raw_projection(t, embed_seed_, dim_));
    return out;
  }

 private:
  static EmbeddingVector raw_projection(std::string_view text, std::uint64_t seed,
                                        std::size_t dim) {
    std::uint64_t state =
        detail::fnv1a64(text) ^ (0x9E3779B97F4A7C15ull * (seed + 1));
    EmbeddingVector v;
    v.values.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const std::uint64_t z = detail::splitmix64(state);
      v.values[i] = static_cast<float>(
          static_cast<double>(z >> 11) * 0x1.0p-53 * 2.0 - 1.0);
    }
    double norm_sq = 0.0;
    for (float x : v.values) norm_sq += static_cast<double>(x) * x;
    if (norm_sq < 1e-18) v.values[0] = 1.0f;  // unreachable in practice
    return v;
  }
  std::map<std::string, std::string> script_;
  std::uint64_t embed_seed_;
  std::size_t dim_;
  mutable std::mutex mutex_;
  std::vector<ChatRequest> chat_log_;
};

}  // namespace esmem
