#pragma once
// Layered memory: each event becomes one unit carrying its refined boundary
// text (level 1), a mechanically assembled topic/keyword summary (level 2),
// and the verbatim source turns (level 3), plus embeddings of levels 1-2.
// Repositories persist as manifest.json + units.jsonl under a directory.

#include <algorithm>
#include <cstdio>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "esmem/dialogue.hpp"
#include "esmem/logging.hpp"
#include "esmem/parallel.hpp"
#include "esmem/prompts.hpp"
#include "esmem/provider.hpp"
#include "esmem/segmentation.hpp"

namespace esmem {

inline constexpr int kRepositorySchemaVersion = 1;

struct MemoryUnit {
  int event_index = 0;                    // 1-based, chronological
  std::string refined_boundary;           // level 1
  std::string summary;                    // level 2
  std::vector<DialogueTurn> raw_context;  // level 3, verbatim source turns
  std::string timestamp;
  EmbeddingVector boundary_embedding;
  EmbeddingVector summary_embedding;
  bool boundary_is_fallback = false;  // true when LLM generation degraded
  std::string source_session;

  bool operator==(const MemoryUnit&) const = default;
};

struct MemoryRepository {
  std::string repo_id;
  std::vector<MemoryUnit> units;
  int schema_version = kRepositorySchemaVersion;
  nlohmann::json config_snapshot = nlohmann::json::object();

  std::size_t size() const noexcept { return units.size(); }
  std::size_t embedding_dim() const noexcept {
    return units.empty() ? 0 : units.front().boundary_embedding.dim();
  }
};

inline void validate_repository(const MemoryRepository& repo) {
  const std::size_t dim = repo.embedding_dim();
  for (std::size_t i = 0; i < repo.units.size(); ++i) {
    const MemoryUnit& u = repo.units[i];
    if (u.event_index != static_cast<int>(i) + 1)
      throw InvariantError("unit indices not contiguous from 1 (unit " +
                           std::to_string(i + 1) + ")");
    if (u.refined_boundary.empty() || u.summary.empty() || u.timestamp.empty())
      throw InvariantError("unit " + std::to_string(i + 1) + " has empty text field");
    if (u.boundary_embedding.dim() != dim || u.summary_embedding.dim() != dim)
      throw InvariantError("unit " + std::to_string(i + 1) +
                           " embedding dimension mismatch");
  }
}

// Level-2 summary: per-turn topic texts joined in order plus the event's
// keywords deduplicated in first-seen order. Purely mechanical, no LLM call.
inline std::string build_summary(const Event& event, const TopicTrace& trace) {
  if (event.start_turn < 1 ||
      event.end_turn > static_cast<int>(trace.entries.size()))
    throw InvariantError("event turn range [" + std::to_string(event.start_turn) +
                         ", " + std::to_string(event.end_turn) +
                         "] outside topic trace of length " +
                         std::to_string(trace.entries.size()));
  std::ostringstream topics;
  std::vector<std::string> keywords;
  std::set<std::string> seen;
  for (int t = event.start_turn; t <= event.end_turn; ++t) {
    const TopicEntry& entry = trace.entries[static_cast<std::size_t>(t) - 1];
    if (t > event.start_turn) topics << "; ";
    topics << entry.topic_text;
    for (const std::string& kw : entry.keywords)
      if (seen.insert(kw).second) keywords.push_back(kw);
  }
  std::ostringstream out;
  out << "Topics: " << topics.str() << ". Keywords: ";
  if (keywords.empty()) {
    out << "none";
  } else {
    for (std::size_t i = 0; i < keywords.size(); ++i) {
      if (i) out << ", ";
      out << keywords[i];
    }
  }
  out << ".";
  return out.str();
}

struct RefinedBoundary {
  std::string text;
  bool fallback = false;
};

// Level-1 refined boundary: an LLM-written transition description built from
// the two adjacent summaries and the raw turns around the boundary (last L
// turns of the previous event, first L of this one, edge-clipped). The first
// event gets an opening description instead. Provider failure degrades to a
// summary-derived boundary rather than aborting the build.
inline RefinedBoundary build_refined_boundary(
    const Event* prev_event, const std::string* prev_summary, const Event& event,
    const std::string& summary, int context_len, Provider& provider,
    const prompts::PromptTemplates& templates = prompts::builtin()) {
  if (context_len < 1) throw InvariantError("boundary context length must be >= 1");
  if (summary.empty()) throw InvariantError("event summary missing");

  std::vector<DialogueTurn> context;
  if (prev_event) {
    const std::size_t take = std::min<std::size_t>(
        prev_event->turns.size(), static_cast<std::size_t>(context_len));
    context.insert(context.end(), prev_event->turns.end() - take,
                   prev_event->turns.end());
  }
  const std::size_t take = std::min<std::size_t>(
      event.turns.size(), static_cast<std::size_t>(context_len));
  context.insert(context.end(), event.turns.begin(), event.turns.begin() + take);

  try {
    std::string text = provider.chat(
        prompts::boundary_request(templates, prev_summary, summary, context));
    if (text.empty()) throw Error("boundary generation returned empty text");
    return {std::move(text), false};
  } catch (const Error& e) {
    log_warn("refined boundary for event " + std::to_string(event.event_index) +
             " fell back to summary form: " + e.what());
    return {"Transitioned to: " + summary, true};
  }
}

struct MemoryBuildConfig {
  int boundary_context_len = 4;
  int jobs = 4;
  prompts::PromptTemplates templates = prompts::builtin();

  void validate() const {
    if (boundary_context_len < 1)
      throw ConfigError("boundary_context_len must be >= 1");
  }
};

namespace detail {
inline std::string event_timestamp(const Event& event, const Session& session) {
  if (!event.turns.empty() && event.turns.front().timestamp)
    return *event.turns.front().timestamp;
  const auto date = session.metadata.find("date");
  if (date != session.metadata.end()) return date->second;
  return "unknown";
}
}  // namespace detail

// Builds one unit per event. Summaries come first (sequential, cheap), then
// boundary generation fans out concurrently, then both embedding matrices
// are fetched as two batch calls.
inline MemoryRepository construct_memory(const std::vector<Event>& events,
                                         const TopicTrace& trace,
                                         const Session& session,
                                         const MemoryBuildConfig& cfg,
                                         Provider& provider,
                                         std::string repo_id = {}) {
  cfg.validate();
  if (events.empty()) throw InvariantError("no events to construct memory from");
  events_to_hypothesis(events);  // tiling check

  std::vector<std::string> summaries(events.size());
  for (std::size_t i = 0; i < events.size(); ++i)
    summaries[i] = build_summary(events[i], trace);

  std::vector<RefinedBoundary> boundaries(events.size());
  parallel_for(events.size(), cfg.jobs, [&](std::size_t i) {
    const Event* prev = i == 0 ? nullptr : &events[i - 1];
    const std::string* prev_summary = i == 0 ? nullptr : &summaries[i - 1];
    boundaries[i] =
        build_refined_boundary(prev, prev_summary, events[i], summaries[i],
                               cfg.boundary_context_len, provider, cfg.templates);
  });

  std::vector<std::string> boundary_texts, summary_texts;
  boundary_texts.reserve(events.size());
  summary_texts.reserve(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    boundary_texts.push_back(boundaries[i].text);
    summary_texts.push_back(summaries[i]);
  }

  std::vector<EmbeddingVector> e_bnd, e_sum;
  try {
    e_bnd = provider.embed(boundary_texts);
    e_sum = provider.embed(summary_texts);
  } catch (const Error& e) {
    throw Error("embedding memory units failed: " + std::string(e.what()));
  }

  MemoryRepository repo;
  repo.repo_id = repo_id.empty() ? session.session_id : std::move(repo_id);
  repo.units.reserve(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    MemoryUnit unit;
    unit.event_index = static_cast<int>(i) + 1;
    unit.refined_boundary = boundaries[i].text;
    unit.summary = summaries[i];
    unit.raw_context = events[i].turns;
    unit.timestamp = detail::event_timestamp(events[i], session);
    unit.boundary_embedding = std::move(e_bnd[i]);
    unit.summary_embedding = std::move(e_sum[i]);
    unit.boundary_is_fallback = boundaries[i].fallback;
    unit.source_session = session.session_id;
    repo.units.push_back(std::move(unit));
  }
  validate_repository(repo);
  return repo;
}

// Merges per-session repositories into one, renumbering units chronologically
// in the order given.
inline MemoryRepository merge_repositories(std::vector<MemoryRepository> parts,
                                           std::string repo_id) {
  MemoryRepository merged;
  merged.repo_id = std::move(repo_id);
  for (MemoryRepository& part : parts) {
    if (!part.config_snapshot.empty()) merged.config_snapshot = part.config_snapshot;
    for (MemoryUnit& unit : part.units) {
      unit.event_index = static_cast<int>(merged.units.size()) + 1;
      merged.units.push_back(std::move(unit));
    }
  }
  validate_repository(merged);
  return merged;
}

// Exact flat cosine index over the two embedding matrices; row i maps to
// unit i+1. No approximation, so retrieval stays oracle-checkable.
class VectorIndex {
 public:
  VectorIndex() = default;

  static VectorIndex build(const MemoryRepository& repo) {
    validate_repository(repo);
    VectorIndex index;
    index.dim_ = repo.embedding_dim();
    index.rows_ = repo.units.size();
    index.boundary_.reserve(index.rows_ * index.dim_);
    index.summary_.reserve(index.rows_ * index.dim_);
    for (const MemoryUnit& u : repo.units) {
      index.boundary_.insert(index.boundary_.end(), u.boundary_embedding.values.begin(),
                             u.boundary_embedding.values.end());
      index.summary_.insert(index.summary_.end(), u.summary_embedding.values.begin(),
                            u.summary_embedding.values.end());
    }
    return index;
  }

  std::size_t size() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }

  std::vector<double> scan_boundary(const EmbeddingVector& query) const {
    return scan(boundary_, query);
  }
  std::vector<double> scan_summary(const EmbeddingVector& query) const {
    return scan(summary_, query);
  }

  // Cosine against a single row (1-based unit index).
  double boundary_score(int event_index, const EmbeddingVector& query) const {
    return row_score(boundary_, event_index, query);
  }
  double summary_score(int event_index, const EmbeddingVector& query) const {
    return row_score(summary_, event_index, query);
  }

 private:
  std::vector<double> scan(const std::vector<float>& matrix,
                           const EmbeddingVector& query) const {
    std::vector<double> scores;
    scores.reserve(rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      scores.push_back(cosine(std::span<const float>(matrix.data() + i * dim_, dim_),
                              std::span<const float>(query.values)));
    return scores;
  }

  double row_score(const std::vector<float>& matrix, int event_index,
                   const EmbeddingVector& query) const {
    if (event_index < 1 || static_cast<std::size_t>(event_index) > rows_)
      throw InvariantError("event index " + std::to_string(event_index) +
                           " outside repository");
    const std::size_t i = static_cast<std::size_t>(event_index) - 1;
    return cosine(std::span<const float>(matrix.data() + i * dim_, dim_),
                  std::span<const float>(query.values));
  }

  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> boundary_;
  std::vector<float> summary_;
};

inline VectorIndex index_repository(const MemoryRepository& repo) {
  return VectorIndex::build(repo);
}

// ---- persistence ----------------------------------------------------------

namespace detail {

// Single-writer guard. Exclusive-create of dir/lock; stale locks (crashed
// writer) must be removed manually.
class RepositoryLock {
 public:
  explicit RepositoryLock(const std::filesystem::path& dir) : path_(dir / "lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error("repository is locked by another writer (remove " +
                  path_.string() + " if stale)");
    ::close(fd);
  }
  ~RepositoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RepositoryLock(const RepositoryLock&) = delete;
  RepositoryLock& operator=(const RepositoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

inline void write_atomically(const std::filesystem::path& target,
                             const std::string& content) {
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

inline nlohmann::json unit_to_json(const MemoryUnit& u) {
  nlohmann::json j;
  j["event_index"] = u.event_index;
  j["refined_boundary"] = u.refined_boundary;
  j["summary"] = u.summary;
  j["raw_context"] = nlohmann::json::array();
  for (const DialogueTurn& t : u.raw_context) {
    nlohmann::json jt{{"turn_index", t.turn_index},
                      {"speaker", t.speaker},
                      {"text", t.text}};
    if (t.timestamp) jt["timestamp"] = *t.timestamp;
    j["raw_context"].push_back(std::move(jt));
  }
  j["timestamp"] = u.timestamp;
  j["e_bnd"] = u.boundary_embedding.values;
  j["e_sum"] = u.summary_embedding.values;
  j["boundary_is_fallback"] = u.boundary_is_fallback;
  j["source_session"] = u.source_session;
  return j;
}

inline MemoryUnit unit_from_json(const nlohmann::json& j) {
  MemoryUnit u;
  u.event_index = j.at("event_index").get<int>();
  u.refined_boundary = j.at("refined_boundary").get<std::string>();
  u.summary = j.at("summary").get<std::string>();
  for (const auto& jt : j.at("raw_context")) {
    DialogueTurn t;
    t.turn_index = jt.at("turn_index").get<int>();
    t.speaker = jt.value("speaker", std::string{});
    t.text = jt.at("text").get<std::string>();
    if (jt.contains("timestamp")) t.timestamp = jt.at("timestamp").get<std::string>();
    u.raw_context.push_back(std::move(t));
  }
  u.timestamp = j.at("timestamp").get<std::string>();
  u.boundary_embedding.values = j.at("e_bnd").get<std::vector<float>>();
  u.summary_embedding.values = j.at("e_sum").get<std::vector<float>>();
  u.boundary_is_fallback = j.value("boundary_is_fallback", false);
  u.source_session = j.value("source_session", std::string{});
  return u;
}

}  // namespace detail

inline void save_repository(const MemoryRepository& repo,
                            const std::filesystem::path& dir) {
  validate_repository(repo);
  std::filesystem::create_directories(dir);
  detail::RepositoryLock lock(dir);

  std::ostringstream units;
  for (const MemoryUnit& u : repo.units) units << detail::unit_to_json(u).dump() << "\n";

  nlohmann::json manifest;
  manifest["repo_id"] = repo.repo_id;
  manifest["n"] = repo.units.size();
  manifest["schema_version"] = repo.schema_version;
  manifest["config"] = repo.config_snapshot;
  manifest["embedding_dim"] = repo.embedding_dim();

  detail::write_atomically(dir / "units.jsonl", units.str());
  detail::write_atomically(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline MemoryRepository load_repository(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / "manifest.json");
  if (!manifest_in)
    throw Error("no repository manifest at " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest_in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corrupt manifest.json: " + std::string(e.what()));
  }

  MemoryRepository repo;
  repo.repo_id = manifest.value("repo_id", std::string{});
  repo.schema_version = manifest.value("schema_version", 0);
  if (repo.schema_version != kRepositorySchemaVersion)
    throw SchemaError("repository schema_version " +
                      std::to_string(repo.schema_version) +
                      " needs migration (this build reads version " +
                      std::to_string(kRepositorySchemaVersion) + ")");
  repo.config_snapshot = manifest.value("config", nlohmann::json::object());
  const std::size_t expected_n = manifest.at("n").get<std::size_t>();

  std::ifstream units_in(dir / "units.jsonl");
  if (!units_in && expected_n > 0)
    throw Error("missing units.jsonl in " + dir.string());
  std::string line;
  while (std::getline(units_in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::size_t unit_no = repo.units.size() + 1;
    try {
      repo.units.push_back(detail::unit_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("units.jsonl unit " + std::to_string(unit_no) + ": " +
                       e.what());
    }
  }
  if (repo.units.size() != expected_n)
    throw Error("units.jsonl truncated: last valid unit is " +
                std::to_string(repo.units.size()) + " but manifest expects " +
                std::to_string(expected_n));
  validate_repository(repo);
  return repo;
}

}  // namespace esmem
