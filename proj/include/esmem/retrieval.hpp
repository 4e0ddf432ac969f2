#pragma once
// Coarse-to-fine retrieval over a layered memory repository:
//   1. boundary scan  - cosine of the query against refined-boundary rows,
//                       keep the top-k events as anchors;
//   2. interval expansion - each anchor activates the window [a-w, a+w];
//                       candidates inherit the best covering anchor score;
//   3. fused rerank   - Score(j) = alpha * S_sum(j) + (1-alpha) * S_ctx(j)
//                       over candidates, top-K kept, ties to the earlier
//                       event. Raw contexts are assembled chronologically.

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esmem/memory.hpp"
#include "esmem/prompts.hpp"
#include "esmem/provider.hpp"

namespace esmem {

struct RetrievalParams {
  int anchor_k = 10;
  int window_w = 3;
  double alpha = 0.70;
  int final_k = 10;

  void validate() const {
    if (anchor_k < 1) throw ConfigError("anchor_k must be >= 1");
    if (window_w < 0) throw ConfigError("window_w must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (final_k < 1) throw ConfigError("final_k must be >= 1");
  }
};

struct Anchor {
  int event_index = 0;
  double sim_bnd = 0.0;
};

struct AnchorSet {
  std::vector<Anchor> anchors;  // sorted by score desc, ties by index asc
};

struct CandidateEventSet {
  std::map<int, double> ctx_scores;  // event index -> S_ctx
};

struct ScoredEvent {
  int event_index = 0;
  double s_sum = 0.0;
  double s_ctx = 0.0;
  double score = 0.0;
};

struct RetrievalResult {
  std::string query;
  std::vector<Anchor> anchors;
  std::vector<ScoredEvent> candidates;  // all of C, sorted by fused score
  std::vector<ScoredEvent> selected;    // top-K prefix of candidates
  std::string context_text;             // selected raw contexts, chronological

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["query"] = query;
    j["anchors"] = nlohmann::json::array();
    for (const Anchor& a : anchors)
      j["anchors"].push_back({{"event", a.event_index}, {"sim_bnd", a.sim_bnd}});
    j["candidates"] = nlohmann::json::array();
    for (const ScoredEvent& c : candidates)
      j["candidates"].push_back({{"event", c.event_index},
                                 {"s_ctx", c.s_ctx},
                                 {"s_sum", c.s_sum},
                                 {"score", c.score}});
    j["selected"] = nlohmann::json::array();
    for (const ScoredEvent& s : selected) j["selected"].push_back(s.event_index);
    j["context_text"] = context_text;
    return j;
  }
};

// Stage 1: anchor retrieval against the boundary matrix.
inline AnchorSet boundary_scan(const EmbeddingVector& query_vec,
                               const MemoryRepository& repo,
                               const VectorIndex& index, int k) {
  if (repo.units.empty())
    throw EmptyRepositoryError("cannot retrieve from an empty repository");
  if (k < 1) throw InvariantError("anchor k must be >= 1");

  const std::vector<double> scores = index.scan_boundary(query_vec);
  std::vector<Anchor> ranked;
  ranked.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    ranked.push_back(Anchor{static_cast<int>(i) + 1, scores[i]});
  std::sort(ranked.begin(), ranked.end(), [](const Anchor& a, const Anchor& b) {
    if (a.sim_bnd != b.sim_bnd) return a.sim_bnd > b.sim_bnd;
    return a.event_index < b.event_index;
  });
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                 ranked.size());
  ranked.resize(keep);
  return AnchorSet{std::move(ranked)};
}

// Stage 2: anchors activate [a-w, a+w] clipped to [1, n]; a candidate's
// context score is the best sim_bnd among anchors whose window covers it.
inline CandidateEventSet expand_intervals(const AnchorSet& anchors, int w, int n) {
  if (w < 0) throw InvariantError("window w must be >= 0");
  CandidateEventSet out;
  for (const Anchor& a : anchors.anchors) {
    if (a.event_index < 1 || a.event_index > n)
      throw InvariantError("anchor event " + std::to_string(a.event_index) +
                           " outside repository of size " + std::to_string(n));
    const int lo = std::max(1, a.event_index - w);
    const int hi = std::min(n, a.event_index + w);
    for (int j = lo; j <= hi; ++j) {
      auto [it, inserted] = out.ctx_scores.emplace(j, a.sim_bnd);
      if (!inserted && a.sim_bnd > it->second) it->second = a.sim_bnd;
    }
  }
  return out;
}

namespace detail {
inline std::string assemble_context(const std::vector<ScoredEvent>& selected,
                                    const MemoryRepository& repo) {
  // chronological = ascending event index (units are stored in event order)
  std::vector<int> order;
  order.reserve(selected.size());
  for (const ScoredEvent& s : selected) order.push_back(s.event_index);
  std::sort(order.begin(), order.end());

  std::ostringstream out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const MemoryUnit& unit = repo.units[static_cast<std::size_t>(order[i]) - 1];
    if (i) out << "\n";
    out << "[Event " << unit.event_index << " | " << unit.timestamp << "]\n";
    for (const DialogueTurn& t : unit.raw_context)
      out << t.speaker << ": " << t.text << "\n";
  }
  return out.str();
}
}  // namespace detail

// Stage 3: fused rerank over the candidate set and context assembly.
inline RetrievalResult rerank_fuse(const std::string& query,
                                   const EmbeddingVector& query_vec,
                                   const CandidateEventSet& candidates,
                                   const MemoryRepository& repo,
                                   const VectorIndex& index, double alpha, int k) {
  if (candidates.ctx_scores.empty())
    throw InvariantError("rerank_fuse: empty candidate set");
  if (alpha < 0.0 || alpha > 1.0) throw InvariantError("alpha must lie in [0, 1]");
  if (k < 1) throw InvariantError("final K must be >= 1");

  RetrievalResult result;
  result.query = query;
  result.candidates.reserve(candidates.ctx_scores.size());
  for (const auto& [event_index, s_ctx] : candidates.ctx_scores) {
    ScoredEvent scored;
    scored.event_index = event_index;
    scored.s_ctx = s_ctx;
    scored.s_sum = index.summary_score(event_index, query_vec);
    scored.score = alpha * scored.s_sum + (1.0 - alpha) * scored.s_ctx;
    result.candidates.push_back(scored);
  }
  std::sort(result.candidates.begin(), result.candidates.end(),
            [](const ScoredEvent& a, const ScoredEvent& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.event_index < b.event_index;
            });
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                 result.candidates.size());
  result.selected.assign(result.candidates.begin(),
                         result.candidates.begin() + keep);
  result.context_text = detail::assemble_context(result.selected, repo);
  return result;
}

// Full pipeline. The query is embedded exactly once and reused by both the
// anchor scan and the summary rerank.
inline RetrievalResult retrieve(const std::string& query,
                                const MemoryRepository& repo,
                                const VectorIndex& index,
                                const RetrievalParams& params, Provider& provider) {
  params.validate();
  if (query.empty()) throw InvariantError("empty query");
  if (repo.units.empty())
    throw EmptyRepositoryError("cannot retrieve from an empty repository");

  auto stage = [&](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const EmptyRepositoryError&) {
      throw;
    } catch (const Error& e) {
      throw Error("retrieval stage '" + std::string(name) + "' failed: " + e.what());
    }
  };

  const EmbeddingVector query_vec =
      stage("embed-query", [&] { return provider.embed({query}).front(); });
  const AnchorSet anchors = stage("boundary-scan", [&] {
    return boundary_scan(query_vec, repo, index, params.anchor_k);
  });
  const CandidateEventSet candidates = stage("expand-intervals", [&] {
    return expand_intervals(anchors, params.window_w,
                            static_cast<int>(repo.units.size()));
  });
  RetrievalResult result = stage("rerank-fuse", [&] {
    return rerank_fuse(query, query_vec, candidates, repo, index, params.alpha,
                       params.final_k);
  });
  result.anchors = anchors.anchors;
  return result;
}

// Grounded answer generation from the assembled level-3 context.
inline std::string compose_answer(const std::string& query,
                                  const RetrievalResult& result, Provider& provider,
                                  const prompts::PromptTemplates& templates =
                                      prompts::builtin()) {
  if (result.selected.empty())
    throw InvariantError("compose_answer: empty retrieval result");
  return provider.chat(prompts::answer_request(templates, query, result.context_text));
}

}  // namespace esmem
