#pragma once
// Segmentation metrics (Beeferman Pk, Pevzner-Hearst WindowDiff, exact
// boundary F1, and their composite score) plus QA metrics (bag-of-tokens F1
// and BLEU-1), with batch drivers that emit JSON/CSV reports.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esmem/dialogue.hpp"
#include "esmem/memory.hpp"
#include "esmem/parallel.hpp"
#include "esmem/retrieval.hpp"
#include "esmem/segmentation.hpp"

namespace esmem {

struct SegmentationMetrics {
  double pk = 0.0;
  double wd = 0.0;
  double f1 = 0.0;
  double score = 0.0;
};

struct QAMetrics {
  double token_f1 = 0.0;
  double bleu1 = 0.0;
};

namespace detail {

inline void check_comparable(const Segmentation& ref, const Segmentation& hyp) {
  if (ref.total_turns != hyp.total_turns)
    throw InvariantError("segmentations cover different turn counts (" +
                         std::to_string(ref.total_turns) + " vs " +
                         std::to_string(hyp.total_turns) + ")");
  if (ref.total_turns < 2)
    throw InvariantError("segmentation metrics need total_turns >= 2");
}

// True when turns i and j share a segment: no boundary in [i, j-1].
inline bool same_segment(const std::vector<int>& boundaries, int i, int j) {
  const auto it = std::lower_bound(boundaries.begin(), boundaries.end(), i);
  return it == boundaries.end() || *it >= j;
}

inline int boundaries_in_window(const std::vector<int>& boundaries, int lo, int hi) {
  const auto b = std::lower_bound(boundaries.begin(), boundaries.end(), lo);
  const auto e = std::upper_bound(boundaries.begin(), boundaries.end(), hi);
  return static_cast<int>(e - b);
}

}  // namespace detail

// Conventional window size: half the mean reference segment length,
// rounded, floored at 1 (and capped so at least one window exists).
inline int default_window_k(const SegReference& ref) {
  const int segments = static_cast<int>(ref.boundary_positions.size()) + 1;
  const long k = std::lround(static_cast<double>(ref.total_turns) /
                             (2.0 * static_cast<double>(segments)));
  return std::clamp<int>(static_cast<int>(k), 1,
                         std::max(1, ref.total_turns - 1));
}

// Beeferman Pk: slide a probe pair (i, i+k) across the session and count
// windows where reference and hypothesis disagree on the same-segment
// predicate.
inline double pk(const SegReference& ref, const SegHypothesis& hyp,
                 std::optional<int> k_opt = std::nullopt) {
  detail::check_comparable(ref, hyp);
  const int total = ref.total_turns;
  const int k = std::clamp(k_opt.value_or(default_window_k(ref)), 1, total - 1);

  int disagreements = 0;
  for (int i = 1; i + k <= total; ++i) {
    const bool ref_same = detail::same_segment(ref.boundary_positions, i, i + k);
    const bool hyp_same = detail::same_segment(hyp.boundary_positions, i, i + k);
    if (ref_same != hyp_same) ++disagreements;
  }
  return static_cast<double>(disagreements) / static_cast<double>(total - k);
}

// Pevzner-Hearst WindowDiff: penalizes every window whose reference and
// hypothesis boundary counts differ.
inline double window_diff(const SegReference& ref, const SegHypothesis& hyp,
                          std::optional<int> k_opt = std::nullopt) {
  detail::check_comparable(ref, hyp);
  const int total = ref.total_turns;
  const int k = std::clamp(k_opt.value_or(default_window_k(ref)), 1, total - 1);

  int penalized = 0;
  for (int i = 1; i + k <= total; ++i) {
    const int r = detail::boundaries_in_window(ref.boundary_positions, i, i + k - 1);
    const int h = detail::boundaries_in_window(hyp.boundary_positions, i, i + k - 1);
    if (r != h) ++penalized;
  }
  return static_cast<double>(penalized) / static_cast<double>(total - k);
}

// Exact-position boundary F1. Both empty -> 1 (perfect agreement on "no
// boundaries"); exactly one empty -> 0.
inline double boundary_f1(const SegReference& ref, const SegHypothesis& hyp) {
  if (ref.total_turns != hyp.total_turns)
    throw InvariantError("segmentations cover different turn counts");
  if (ref.boundary_positions.empty() && hyp.boundary_positions.empty()) return 1.0;
  if (ref.boundary_positions.empty() || hyp.boundary_positions.empty()) return 0.0;

  std::vector<int> hits;
  std::set_intersection(ref.boundary_positions.begin(), ref.boundary_positions.end(),
                        hyp.boundary_positions.begin(), hyp.boundary_positions.end(),
                        std::back_inserter(hits));
  const double precision =
      static_cast<double>(hits.size()) / static_cast<double>(hyp.boundary_positions.size());
  const double recall =
      static_cast<double>(hits.size()) / static_cast<double>(ref.boundary_positions.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

inline double composite_score(double f1, double pk_value, double wd_value) {
  for (double v : {f1, pk_value, wd_value})
    if (!(v >= 0.0 && v <= 1.0))
      throw InvariantError("composite_score inputs must lie in [0, 1]");
  return (2.0 * f1 + (1.0 - pk_value) + (1.0 - wd_value)) / 4.0;
}

// Shared QA normalization: lowercase, drop punctuation characters, split on
// whitespace. No article removal.
inline std::vector<std::string> qa_tokens(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::vector<std::string> tokens;
  std::istringstream in(cleaned);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

namespace detail {
inline std::size_t token_overlap(const std::vector<std::string>& a,
                                 const std::vector<std::string>& b) {
  std::map<std::string, int> counts;
  for (const std::string& t : a) ++counts[t];
  std::size_t overlap = 0;
  for (const std::string& t : b) {
    const auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return overlap;
}
}  // namespace detail

inline double qa_token_f1(const std::string& prediction, const std::string& gold) {
  const std::vector<std::string> pred = qa_tokens(prediction);
  const std::vector<std::string> ref = qa_tokens(gold);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  const std::size_t overlap = detail::token_overlap(ref, pred);
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

// Clipped unigram precision times the brevity penalty
// min(1, exp(1 - |gold| / |pred|)). An empty prediction scores 0.
inline double bleu1(const std::string& prediction, const std::string& gold) {
  const std::vector<std::string> pred = qa_tokens(prediction);
  if (pred.empty()) return 0.0;
  const std::vector<std::string> ref = qa_tokens(gold);
  const std::size_t clipped = detail::token_overlap(ref, pred);
  const double precision =
      static_cast<double>(clipped) / static_cast<double>(pred.size());
  const double bp = std::min(
      1.0, std::exp(1.0 - static_cast<double>(ref.size()) /
                              static_cast<double>(pred.size())));
  return precision * bp;
}

// LLM-judged accuracy: asks a judge provider whether the prediction matches
// the gold answer. A pass-through only; it never feeds the gated metrics.
inline bool llm_judge_accuracy(const std::string& question, const std::string& gold,
                               const std::string& prediction, Provider& judge) {
  const std::string verdict =
      judge.chat(prompts::judge_request(question, gold, prediction));
  std::string head;
  for (unsigned char c : verdict) {
    if (std::isalpha(c)) head.push_back(static_cast<char>(std::tolower(c)));
    else if (!head.empty()) break;
  }
  if (head == "yes") return true;
  if (head == "no") return false;
  throw ParseError("judge reply is neither yes nor no: \"" + verdict + "\"");
}

// ---- batch drivers ---------------------------------------------------------

struct EvalError {
  std::string id;
  std::string stage;
  std::string message;
};

struct SegEvalItem {
  std::string id;
  SegmentationMetrics metrics;
  std::vector<int> hyp_boundaries;
  std::vector<int> ref_boundaries;
  int total_turns = 0;
};

struct SegEvalReport {
  std::vector<SegEvalItem> items;
  SegmentationMetrics aggregates;
  std::vector<EvalError> errors;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config"] = config;
    j["per_item"] = nlohmann::json::array();
    for (const SegEvalItem& it : items)
      j["per_item"].push_back({{"id", it.id},
                               {"pk", it.metrics.pk},
                               {"wd", it.metrics.wd},
                               {"f1", it.metrics.f1},
                               {"score", it.metrics.score},
                               {"hyp_boundaries", it.hyp_boundaries},
                               {"ref_boundaries", it.ref_boundaries},
                               {"total_turns", it.total_turns}});
    j["aggregates"] = {{"pk", aggregates.pk},
                       {"wd", aggregates.wd},
                       {"f1", aggregates.f1},
                       {"score", aggregates.score},
                       {"evaluated", items.size()},
                       {"errors", errors.size()}};
    j["errors"] = nlohmann::json::array();
    for (const EvalError& e : errors)
      j["errors"].push_back({{"id", e.id}, {"stage", e.stage}, {"message", e.message}});
    return j;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "id,pk,wd,f1,score\n";
    for (const SegEvalItem& it : items)
      out << it.id << "," << it.metrics.pk << "," << it.metrics.wd << ","
          << it.metrics.f1 << "," << it.metrics.score << "\n";
    out << "macro," << aggregates.pk << "," << aggregates.wd << "," << aggregates.f1
        << "," << aggregates.score << "\n";
    return out.str();
  }
};

// Segments every dialogue, converts the event tiling to a hypothesis, and
// macro-averages the four metrics over dialogues. Failed dialogues are
// recorded and excluded from the averages.
inline SegEvalReport evaluate_segmentation(const std::vector<CorpusEntry>& corpus,
                                           const SegmentationConfig& cfg,
                                           Provider& provider, int jobs = 1) {
  cfg.validate();
  struct Slot {
    std::optional<SegEvalItem> item;
    std::optional<EvalError> error;
  };
  std::vector<Slot> slots(corpus.size());

  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    const CorpusEntry& entry = corpus[i];
    const std::string id =
        entry.session.session_id.empty() ? "dialogue-" + std::to_string(i + 1)
                                         : entry.session.session_id;
    if (!entry.reference) {
      slots[i].error = EvalError{id, "load", "corpus entry has no gold reference"};
      return;
    }
    try {
      const SegmentationResult seg = segment_session(entry.session, cfg, provider);
      const SegHypothesis hyp = events_to_hypothesis(seg.events);
      SegEvalItem item;
      item.id = id;
      item.metrics.pk = pk(*entry.reference, hyp);
      item.metrics.wd = window_diff(*entry.reference, hyp);
      item.metrics.f1 = boundary_f1(*entry.reference, hyp);
      item.metrics.score =
          composite_score(item.metrics.f1, item.metrics.pk, item.metrics.wd);
      item.hyp_boundaries = hyp.boundary_positions;
      item.ref_boundaries = entry.reference->boundary_positions;
      item.total_turns = entry.reference->total_turns;
      slots[i].item = std::move(item);
    } catch (const Error& e) {
      slots[i].error = EvalError{id, "segment", e.what()};
    }
  });

  SegEvalReport report;
  for (Slot& slot : slots) {
    if (slot.item) report.items.push_back(std::move(*slot.item));
    if (slot.error) report.errors.push_back(std::move(*slot.error));
  }
  if (!report.items.empty()) {
    for (const SegEvalItem& it : report.items) {
      report.aggregates.pk += it.metrics.pk;
      report.aggregates.wd += it.metrics.wd;
      report.aggregates.f1 += it.metrics.f1;
      report.aggregates.score += it.metrics.score;
    }
    const double n = static_cast<double>(report.items.size());
    report.aggregates.pk /= n;
    report.aggregates.wd /= n;
    report.aggregates.f1 /= n;
    report.aggregates.score /= n;
  }
  return report;
}

struct QAItem {
  std::string id;
  std::string question;
  std::string gold;
  std::string category;
};

struct QAEvalItem {
  std::string id;
  std::string category;
  std::string prediction;
  QAMetrics metrics;
};

struct QAAggregate {
  double token_f1 = 0.0;
  double bleu1 = 0.0;
  std::size_t count = 0;
};

struct QAEvalReport {
  std::vector<QAEvalItem> items;
  QAAggregate overall;
  std::map<std::string, QAAggregate> by_category;
  std::vector<EvalError> errors;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config"] = config;
    j["per_item"] = nlohmann::json::array();
    for (const QAEvalItem& it : items)
      j["per_item"].push_back({{"id", it.id},
                               {"category", it.category},
                               {"prediction", it.prediction},
                               {"token_f1", it.metrics.token_f1},
                               {"bleu1", it.metrics.bleu1}});
    auto agg_json = [](const QAAggregate& a) {
      return nlohmann::json{
          {"token_f1", a.token_f1}, {"bleu1", a.bleu1}, {"count", a.count}};
    };
    j["aggregates"] = {{"overall", agg_json(overall)},
                       {"by_category", nlohmann::json::object()}};
    for (const auto& [cat, agg] : by_category)
      j["aggregates"]["by_category"][cat] = agg_json(agg);
    j["errors"] = nlohmann::json::array();
    for (const EvalError& e : errors)
      j["errors"].push_back({{"id", e.id}, {"stage", e.stage}, {"message", e.message}});
    return j;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "id,category,token_f1,bleu1\n";
    for (const QAEvalItem& it : items)
      out << it.id << "," << it.category << "," << it.metrics.token_f1 << ","
          << it.metrics.bleu1 << "\n";
    out << "overall,," << overall.token_f1 << "," << overall.bleu1 << "\n";
    return out.str();
  }
};

// Retrieval + answer generation per question, scored against gold with the
// QA metrics and aggregated per category and overall.
inline QAEvalReport evaluate_qa(const std::vector<QAItem>& items,
                                const MemoryRepository& repo,
                                const VectorIndex& index,
                                const RetrievalParams& params, Provider& provider,
                                const prompts::PromptTemplates& templates =
                                    prompts::builtin(),
                                int jobs = 1) {
  params.validate();
  struct Slot {
    std::optional<QAEvalItem> item;
    std::optional<EvalError> error;
  };
  std::vector<Slot> slots(items.size());

  parallel_for(items.size(), jobs, [&](std::size_t i) {
    const QAItem& q = items[i];
    const std::string id = q.id.empty() ? "q" + std::to_string(i + 1) : q.id;
    try {
      const RetrievalResult result =
          retrieve(q.question, repo, index, params, provider);
      QAEvalItem item;
      item.id = id;
      item.category = q.category.empty() ? "uncategorized" : q.category;
      item.prediction = compose_answer(q.question, result, provider, templates);
      item.metrics.token_f1 = qa_token_f1(item.prediction, q.gold);
      item.metrics.bleu1 = bleu1(item.prediction, q.gold);
      slots[i].item = std::move(item);
    } catch (const Error& e) {
      slots[i].error = EvalError{id, "answer", e.what()};
    }
  });

  QAEvalReport report;
  for (Slot& slot : slots) {
    if (slot.item) report.items.push_back(std::move(*slot.item));
    if (slot.error) report.errors.push_back(std::move(*slot.error));
  }
  for (const QAEvalItem& it : report.items) {
    report.overall.token_f1 += it.metrics.token_f1;
    report.overall.bleu1 += it.metrics.bleu1;
    ++report.overall.count;
    QAAggregate& cat = report.by_category[it.category];
    cat.token_f1 += it.metrics.token_f1;
    cat.bleu1 += it.metrics.bleu1;
    ++cat.count;
  }
  auto finish = [](QAAggregate& a) {
    if (a.count == 0) return;
    a.token_f1 /= static_cast<double>(a.count);
    a.bleu1 /= static_cast<double>(a.count);
  };
  finish(report.overall);
  for (auto& [_, agg] : report.by_category) finish(agg);
  return report;
}

}  // namespace esmem
