#pragma once
// Two-stage dynamic event segmentation.
//
// Stage 1 scans topical coherence: a recurrent LLM pass yields one topic per
// turn, topics are embedded, and each adjacent pair (t, t+1) is scored with
// the Pearson correlation across vector dimensions and the Gaussian mutual
// information I = -1/2 ln(1 - rho^2). Low-MI adjacencies (bottom quantile)
// become boundary candidates.
//
// Stage 2 verifies candidates with an intent-label judgment over a local
// context window and keeps positions whose boundary probability reaches the
// confidence threshold tau_c.

#include <algorithm>
#include <cmath>
#include <cctype>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esmem/dialogue.hpp"
#include "esmem/logging.hpp"
#include "esmem/parallel.hpp"
#include "esmem/prompts.hpp"
#include "esmem/provider.hpp"

namespace esmem {

struct TopicEntry {
  std::string topic_text;
  std::vector<std::string> keywords;

  bool operator==(const TopicEntry&) const = default;
};

struct TopicTrace {
  std::vector<TopicEntry> entries;  // length T

  bool operator==(const TopicTrace&) const = default;
};

struct TopicVectorSeq {
  std::vector<EmbeddingVector> vectors;  // length T, all unit-norm
};

// Index i holds the adjacency (t, t+1) with t = i + 1.
struct MISeries {
  std::vector<double> rho;
  std::vector<double> mi;
};

struct CandidateBoundarySet {
  std::vector<int> positions;  // sorted, each in [1, T-1]
  double quantile_threshold = 0.0;
};

enum class IntentKind { shift, cont };

struct IntentLabel {
  std::string name;
  IntentKind kind;
};

struct IntentJudgment {
  std::string label;
  IntentKind kind;
  double confidence = 0.0;  // in [0, 1]
};

inline std::vector<IntentLabel> default_intent_labels() {
  return {{"TOPIC_SHIFT", IntentKind::shift},
          {"TOPIC_INTRO", IntentKind::shift},
          {"DETAIL_ELABORATE", IntentKind::cont},
          {"DIRECT_RESP", IntentKind::cont}};
}

struct SegmentationConfig {
  double quantile_q = 0.35;
  double tau_c = 0.75;
  int context_window = 2;  // turns on each side of a candidate
  int jobs = 4;            // fan-out bound for candidate judgments
  std::vector<IntentLabel> labels = default_intent_labels();
  prompts::PromptTemplates templates = prompts::builtin();

  void validate() const {
    if (!(quantile_q > 0.0 && quantile_q <= 1.0))
      throw ConfigError("quantile_q must lie in (0, 1]");
    if (!(tau_c > 0.0 && tau_c < 1.0)) throw ConfigError("tau_c must lie in (0, 1)");
    if (context_window < 1) throw ConfigError("context_window must be >= 1");
    if (labels.empty()) throw ConfigError("intent label set is empty");
  }
};

struct PearsonMi {
  double rho = 0.0;
  double mi = 0.0;
};

// Upper bound of the MI proxy (~13.8155 nats), reached when rho^2 hits the
// clamp. Defined through the same expression the kernel evaluates so the two
// agree bit-for-bit.
inline const double kMiCap = -0.5 * std::log(1.0 - (1.0 - 1e-12));

// Correlation and Gaussian MI over the vector dimensions, treating the d
// components of x and y as paired samples. rho^2 is clamped at 1 - 1e-12 so
// duplicate topics score at the cap instead of diverging; a (near-)constant
// vector has no usable signal and maps to rho = 0, mi = 0.
inline PearsonMi pearson_mi(const EmbeddingVector& x, const EmbeddingVector& y) {
  if (x.dim() != y.dim())
    throw InvariantError("pearson_mi: dimension mismatch (" +
                         std::to_string(x.dim()) + " vs " + std::to_string(y.dim()) +
                         ")");
  if (x.dim() < 2) throw InvariantError("pearson_mi: need dim >= 2");
  const std::size_t d = x.dim();
  for (std::size_t i = 0; i < d; ++i) {
    if (!std::isfinite(x.values[i]) || !std::isfinite(y.values[i]))
      throw InvariantError("pearson_mi: non-finite input");
  }

  double mean_x = 0.0, mean_y = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    mean_x += x.values[i];
    mean_y += y.values[i];
  }
  mean_x /= static_cast<double>(d);
  mean_y /= static_cast<double>(d);

  double cov = 0.0, var_x = 0.0, var_y = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dx = x.values[i] - mean_x;
    const double dy = y.values[i] - mean_y;
    cov += dx * dy;
    var_x += dx * dx;
    var_y += dy * dy;
  }
  cov /= static_cast<double>(d);
  var_x /= static_cast<double>(d);
  var_y /= static_cast<double>(d);

  if (var_x < 1e-12 || var_y < 1e-12) return {0.0, 0.0};

  double rho = cov / std::sqrt(var_x * var_y);
  rho = std::clamp(rho, -1.0, 1.0);
  const double rho_sq = std::min(rho * rho, 1.0 - 1e-12);
  const double mi = -0.5 * std::log(1.0 - rho_sq);
  return {rho, mi};
}

inline MISeries mi_series(const TopicVectorSeq& seq) {
  const std::size_t t_count = seq.vectors.size();
  if (t_count < 2) throw InvariantError("session too short to segment (T < 2)");
  MISeries series;
  series.rho.reserve(t_count - 1);
  series.mi.reserve(t_count - 1);
  for (std::size_t i = 0; i + 1 < t_count; ++i) {
    const PearsonMi pm = pearson_mi(seq.vectors[i], seq.vectors[i + 1]);
    series.rho.push_back(pm.rho);
    series.mi.push_back(pm.mi);
  }
  return series;
}

// Nearest-rank quantile: with n values sorted ascending, the threshold is
// the element at 0-based index ceil(q*n) - 1. Every position whose MI is <=
// the threshold is selected, ties included, so the result is never empty.
inline CandidateBoundarySet candidate_boundaries(const MISeries& series, double q) {
  const std::size_t n = series.mi.size();
  if (n == 0) throw InvariantError("candidate_boundaries: empty MI series");
  if (!(q > 0.0 && q <= 1.0)) throw InvariantError("quantile q must lie in (0, 1]");

  std::vector<double> sorted = series.mi;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(n)));
  const double threshold = sorted[rank - 1];

  CandidateBoundarySet out;
  out.quantile_threshold = threshold;
  for (std::size_t i = 0; i < n; ++i)
    if (series.mi[i] <= threshold) out.positions.push_back(static_cast<int>(i) + 1);
  return out;
}

inline TopicEntry parse_topic_response(const std::string& response) {
  TopicEntry entry;
  std::istringstream in(response);
  std::string line;
  std::string first_nonempty;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    if (first_nonempty.empty()) first_nonempty = line;
    if (line.rfind("Topic:", 0) == 0) {
      entry.topic_text = trim(line.substr(6));
    } else if (line.rfind("Keywords:", 0) == 0) {
      std::istringstream kws(line.substr(9));
      std::string kw;
      while (std::getline(kws, kw, ',')) {
        kw = trim(kw);
        if (!kw.empty()) entry.keywords.push_back(kw);
      }
    }
  }
  if (entry.topic_text.empty()) entry.topic_text = first_nonempty;
  if (entry.topic_text.empty())
    throw ParseError("topic response carried no topic text");
  return entry;
}

// Recurrent topic extraction: turn t's prompt carries turn t-1's topic text,
// so the calls are inherently sequential. Degenerate (empty-text) turns get
// the literal topic "(empty)" without a provider call.
inline TopicTrace extract_topic_trace(const Session& session, Provider& provider,
                                      const prompts::PromptTemplates& templates =
                                          prompts::builtin()) {
  validate_session(session);
  TopicTrace trace;
  trace.entries.reserve(session.turns.size());
  std::optional<std::string> prev_topic;
  for (const DialogueTurn& turn : session.turns) {
    if (turn.degenerate()) {
      trace.entries.push_back(TopicEntry{"(empty)", {}});
      prev_topic = "(empty)";
      continue;
    }
    TopicEntry entry;
    try {
      entry = parse_topic_response(
          provider.chat(prompts::topic_request(templates, prev_topic, turn)));
    } catch (const Error& e) {
      throw Error("topic extraction failed at turn " +
                  std::to_string(turn.turn_index) + "/" +
                  std::to_string(session.turn_count()) + " (partial trace: " +
                  std::to_string(trace.entries.size()) + " turns): " + e.what());
    }
    prev_topic = entry.topic_text;
    trace.entries.push_back(std::move(entry));
  }
  return trace;
}

namespace detail {

inline std::string intent_labels_block(const std::vector<IntentLabel>& labels) {
  std::ostringstream out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out << "- " << labels[i].name
        << (labels[i].kind == IntentKind::shift ? " (starts a new event)"
                                                : " (continues the current event)");
    if (i + 1 < labels.size()) out << "\n";
  }
  return out.str();
}

inline const IntentLabel* find_label(const std::vector<IntentLabel>& labels,
                                     const std::string& name) {
  auto eq_icase = [](const std::string& a, const std::string& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::toupper(static_cast<unsigned char>(a[i])) !=
          std::toupper(static_cast<unsigned char>(b[i])))
        return false;
    return true;
  };
  for (const IntentLabel& l : labels)
    if (eq_icase(l.name, name)) return &l;
  return nullptr;
}

}  // namespace detail

// Parses "<LABEL> <confidence>" entries separated by newlines or semicolons.
inline std::vector<IntentJudgment> parse_intent_response(
    const std::string& response, const std::vector<IntentLabel>& labels) {
  static const std::regex entry_re(
      R"(^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[:,]?\s*([0-9]*\.?[0-9]+)\s*$)");
  std::vector<IntentJudgment> judgments;
  std::string normalized = response;
  std::replace(normalized.begin(), normalized.end(), ';', '\n');
  std::istringstream in(normalized);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::smatch m;
    if (!std::regex_match(line, m, entry_re))
      throw JudgmentError("unparseable intent entry: \"" + line + "\"");
    const IntentLabel* label = detail::find_label(labels, m[1].str());
    if (!label) throw JudgmentError("unknown intent label: \"" + m[1].str() + "\"");
    const double confidence = std::stod(m[2].str());
    if (confidence < 0.0 || confidence > 1.0)
      throw JudgmentError("confidence outside [0, 1]: " + m[2].str());
    judgments.push_back(IntentJudgment{label->name, label->kind, confidence});
  }
  if (judgments.empty()) throw JudgmentError("intent response carried no judgments");
  return judgments;
}

// One intent judgment call for candidate position t, with context windows
// L_t = turns [max(1, t-L+1) .. t] and R_t = turns [t+1 .. min(T, t+L)].
// An unparseable reply is reprompted once (same user prompt, sterner system
// note) before the candidate is given up on.
inline std::vector<IntentJudgment> judge_intent(const Session& session, int t, int L,
                                                Provider& provider,
                                                const SegmentationConfig& cfg) {
  const int total = session.turn_count();
  if (t < 1 || t > total - 1)
    throw InvariantError("candidate position " + std::to_string(t) +
                         " outside [1, T-1]");
  if (L < 1) throw InvariantError("context window must be >= 1");

  const int left_begin = std::max(1, t - L + 1);
  const int right_end = std::min(total, t + L);
  const std::span<const DialogueTurn> left(session.turns.data() + (left_begin - 1),
                                           static_cast<std::size_t>(t - left_begin + 1));
  const std::span<const DialogueTurn> right(session.turns.data() + t,
                                            static_cast<std::size_t>(right_end - t));

  ChatRequest req = prompts::intent_request(
      cfg.templates, detail::intent_labels_block(cfg.labels), left, right);
  try {
    return parse_intent_response(provider.chat(req), cfg.labels);
  } catch (const JudgmentError& first) {
    ChatRequest retry = req;
    retry.system_prompt +=
        "\nReturn only lines of the form '<LABEL> <confidence>'.";
    try {
      return parse_intent_response(provider.chat(retry), cfg.labels);
    } catch (const JudgmentError& second) {
      throw JudgmentError("candidate t=" + std::to_string(t) + ": " +
                          second.what() + " (after reprompt; first error: " +
                          first.what() + ")");
    }
  }
}

// Label-to-probability map and pair averaging: p(y) = c for shift labels and
// 1-c for continuation labels; the boundary probability averages the
// judgments with the highest and lowest confidence (ties: earliest wins for
// the high pick, latest for the low pick). A single judgment stands alone.
inline double boundary_probability(const std::vector<IntentJudgment>& judgments) {
  if (judgments.empty()) throw InvariantError("boundary_probability: no judgments");
  auto p_of = [](const IntentJudgment& j) {
    return j.kind == IntentKind::shift ? j.confidence : 1.0 - j.confidence;
  };
  std::size_t hi = 0, lo = 0;
  for (std::size_t i = 1; i < judgments.size(); ++i) {
    if (judgments[i].confidence > judgments[hi].confidence) hi = i;
    if (judgments[i].confidence <= judgments[lo].confidence) lo = i;
  }
  if (hi == lo) return p_of(judgments[hi]);
  return 0.5 * (p_of(judgments[hi]) + p_of(judgments[lo]));
}

struct CandidateVerdict {
  int position = 0;
  double p_eb = 0.0;
  bool kept = false;
  bool errored = false;
  std::string error;
};

struct RefinementResult {
  std::vector<int> boundaries;  // sorted positions with p_eb >= tau_c
  std::vector<CandidateVerdict> verdicts;
};

// Stage-2 filter. Judgments for distinct candidates run concurrently;
// candidates whose judgment fails are dropped (boundary precision over
// recall), and only total failure propagates.
inline RefinementResult refine_boundaries(const CandidateBoundarySet& candidates,
                                          const Session& session,
                                          const SegmentationConfig& cfg,
                                          Provider& provider) {
  // tau_c is not range-checked here: a degenerate threshold of 0 legally
  // keeps every candidate. Config-level validation happens upstream.
  RefinementResult result;
  result.verdicts.resize(candidates.positions.size());

  parallel_for(candidates.positions.size(), cfg.jobs, [&](std::size_t i) {
    CandidateVerdict verdict;
    verdict.position = candidates.positions[i];
    try {
      const auto judgments = judge_intent(session, verdict.position,
                                          cfg.context_window, provider, cfg);
      verdict.p_eb = boundary_probability(judgments);
      verdict.kept = verdict.p_eb >= cfg.tau_c;
    } catch (const Error& e) {
      verdict.errored = true;
      verdict.error = e.what();
    }
    result.verdicts[i] = std::move(verdict);
  });

  std::size_t errored = 0;
  for (const CandidateVerdict& v : result.verdicts) {
    if (v.errored) {
      ++errored;
      log_warn("dropped candidate t=" + std::to_string(v.position) + ": " + v.error);
    } else if (v.kept) {
      result.boundaries.push_back(v.position);
    }
  }
  if (!result.verdicts.empty() && errored == result.verdicts.size())
    throw Error("intent judgment failed for all " + std::to_string(errored) +
                " candidates");
  std::sort(result.boundaries.begin(), result.boundaries.end());
  return result;
}

// Per-session debug dump for --emit-trace and regression snapshots.
struct SegmentationTrace {
  std::string session_id;
  TopicTrace topics;
  MISeries series;
  double quantile_threshold = 0.0;
  std::vector<int> candidates;
  std::vector<CandidateVerdict> verdicts;
  std::vector<int> final_boundaries;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["session_id"] = session_id;
    j["topics"] = nlohmann::json::array();
    for (const TopicEntry& e : topics.entries)
      j["topics"].push_back({{"topic", e.topic_text}, {"keywords", e.keywords}});
    j["rho"] = series.rho;
    j["mi"] = series.mi;
    j["threshold"] = quantile_threshold;
    j["candidates"] = candidates;
    j["p_eb"] = nlohmann::json::array();
    for (const CandidateVerdict& v : verdicts) {
      nlohmann::json jv{{"t", v.position}, {"kept", v.kept}};
      if (v.errored)
        jv["error"] = v.error;
      else
        jv["p_eb"] = v.p_eb;
      j["p_eb"].push_back(std::move(jv));
    }
    j["final_boundaries"] = final_boundaries;
    return j;
  }
};

struct SegmentationResult {
  std::vector<Event> events;
  TopicTrace trace;
  SegmentationTrace debug;
};

// End-to-end stage 1 + stage 2 for one session. Single-turn sessions
// short-circuit to one event; the topic trace is still extracted because
// memory construction reuses it for summaries.
inline SegmentationResult segment_session(const Session& session,
                                          const SegmentationConfig& cfg,
                                          Provider& provider) {
  cfg.validate();
  validate_session(session);

  SegmentationResult result;
  result.debug.session_id = session.session_id;
  result.trace = extract_topic_trace(session, provider, cfg.templates);
  result.debug.topics = result.trace;

  if (session.turn_count() == 1) {
    result.events = split_session(session, {});
    return result;
  }

  auto stage = [&](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      throw Error("segmentation stage '" + std::string(name) + "' failed for session '" +
                  session.session_id + "': " + e.what());
    }
  };

  TopicVectorSeq vectors;
  vectors.vectors = stage("embed-topics", [&] {
    std::vector<std::string> texts;
    texts.reserve(result.trace.entries.size());
    for (const TopicEntry& e : result.trace.entries) texts.push_back(e.topic_text);
    return provider.embed(texts);
  });

  result.debug.series = mi_series(vectors);
  const CandidateBoundarySet candidates =
      candidate_boundaries(result.debug.series, cfg.quantile_q);
  result.debug.quantile_threshold = candidates.quantile_threshold;
  result.debug.candidates = candidates.positions;

  const RefinementResult refined = stage("refine-boundaries", [&] {
    return refine_boundaries(candidates, session, cfg, provider);
  });
  result.debug.verdicts = refined.verdicts;
  result.debug.final_boundaries = refined.boundaries;

  result.events = split_session(session, refined.boundaries);
  return result;
}

}  // namespace esmem
