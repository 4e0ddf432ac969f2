#pragma once
// Error taxonomy shared across the library. Everything derives from
// esmem::Error so callers can catch broadly or by failure class.

#include <stdexcept>
#include <string>

namespace esmem {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (corpus files, provider payloads, persisted repos).
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

// Network-level failure (connect, timeout) after retries were exhausted.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Non-2xx HTTP response from a provider backend.
class ApiError : public Error {
 public:
  ApiError(int status, const std::string& body_excerpt)
      : Error("API error (status=" + std::to_string(status) + "): " + body_excerpt),
        status_(status),
        body_excerpt_(body_excerpt) {}
  int status() const noexcept { return status_; }
  const std::string& body_excerpt() const noexcept { return body_excerpt_; }

 private:
  int status_;
  std::string body_excerpt_;
};

// A documented precondition or invariant was violated by the caller or data.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Bad or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Persisted repository carries a schema this build cannot read.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Intent-judgment output could not be parsed even after the reprompt.
class JudgmentError : public Error {
 public:
  using Error::Error;
};

// Mock provider received a prompt that was not scripted.
class UnscriptedPromptError : public Error {
 public:
  explicit UnscriptedPromptError(const std::string& key)
      : Error("unscripted prompt: \"" + key + "\""), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Retrieval was asked to run against a repository with no units.
class EmptyRepositoryError : public Error {
 public:
  using Error::Error;
};

}  // namespace esmem
