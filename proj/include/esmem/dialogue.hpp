#pragma once
// Dialogue domain model and corpus ingestion.
//
// Boundary semantics used everywhere in this library: position t denotes a
// break BETWEEN turn t and turn t+1, so valid positions are [1, T-1].

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esmem/errors.hpp"

namespace esmem {

struct DialogueTurn {
  int turn_index = 0;  // 1-based within the session
  std::string speaker;
  std::string text;
  std::optional<std::string> timestamp;  // ISO-8601 when present

  // Empty-text turns are kept to preserve index alignment with gold
  // references; downstream stages substitute a literal "(empty)" topic.
  bool degenerate() const noexcept { return text.empty(); }

  bool operator==(const DialogueTurn&) const = default;
};

struct Session {
  std::string session_id;
  std::vector<DialogueTurn> turns;
  std::map<std::string, std::string> metadata;

  int turn_count() const noexcept { return static_cast<int>(turns.size()); }

  bool operator==(const Session&) const = default;
};

struct Event {
  int event_index = 0;            // 1-based
  int start_turn = 0;             // inclusive turn range
  int end_turn = 0;
  std::vector<DialogueTurn> turns;

  bool operator==(const Event&) const = default;
};

// Boundary-position set for segmentation metrics. Positions are sorted and
// deduplicated, each in [1, total_turns-1].
struct Segmentation {
  std::vector<int> boundary_positions;
  int total_turns = 0;

  bool operator==(const Segmentation&) const = default;
};

using SegReference = Segmentation;
using SegHypothesis = Segmentation;

enum class CorpusFormat { jsonl, dialseg };

struct CorpusEntry {
  Session session;
  std::optional<SegReference> reference;  // present for dialseg corpora
};

inline void validate_session(const Session& session) {
  if (session.turns.empty())
    throw InvariantError("session '" + session.session_id + "' has no turns");
  for (std::size_t i = 0; i < session.turns.size(); ++i) {
    if (session.turns[i].turn_index != static_cast<int>(i) + 1)
      throw InvariantError("session '" + session.session_id +
                           "' turn indices not contiguous from 1");
  }
}

inline Segmentation make_segmentation(std::vector<int> positions, int total_turns) {
  if (total_turns < 1) throw InvariantError("segmentation needs total_turns >= 1");
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  for (int p : positions) {
    if (p < 1 || p > total_turns - 1)
      throw InvariantError("boundary position " + std::to_string(p) +
                           " outside [1, " + std::to_string(total_turns - 1) + "]");
  }
  return Segmentation{std::move(positions), total_turns};
}

// Splits a session at the given boundary positions into a tiling event list.
inline std::vector<Event> split_session(const Session& session,
                                        const std::vector<int>& boundaries) {
  validate_session(session);
  const int total = session.turn_count();
  const Segmentation seg = make_segmentation(boundaries, total);

  std::vector<Event> events;
  int start = 1;
  auto flush = [&](int end) {
    Event ev;
    ev.event_index = static_cast<int>(events.size()) + 1;
    ev.start_turn = start;
    ev.end_turn = end;
    ev.turns.assign(session.turns.begin() + (start - 1), session.turns.begin() + end);
    events.push_back(std::move(ev));
    start = end + 1;
  };
  for (int b : seg.boundary_positions) flush(b);
  flush(total);
  return events;
}

// Adapter from an event tiling to the metric-facing boundary set: the end of
// every event except the last is a boundary.
inline SegHypothesis events_to_hypothesis(const std::vector<Event>& events) {
  if (events.empty()) throw InvariantError("empty event list");
  std::vector<int> positions;
  int expected_start = 1;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& ev = events[i];
    if (ev.start_turn != expected_start || ev.end_turn < ev.start_turn)
      throw InvariantError("events do not tile the session (event " +
                           std::to_string(i + 1) + ")");
    if (i + 1 < events.size()) positions.push_back(ev.end_turn);
    expected_start = ev.end_turn + 1;
  }
  return make_segmentation(std::move(positions), events.back().end_turn);
}

// Concatenates sessions into one stream, renumbering turns. Missing turn
// timestamps are filled from the source session's metadata date so that
// per-session dating survives the merge.
inline Session concat_sessions(const std::vector<Session>& sessions) {
  if (sessions.empty()) throw InvariantError("no sessions to concatenate");
  Session merged;
  merged.session_id = sessions.front().session_id + "+concat";
  merged.metadata = sessions.front().metadata;
  int index = 0;
  for (const Session& s : sessions) {
    const auto date = s.metadata.find("date");
    for (DialogueTurn turn : s.turns) {
      turn.turn_index = ++index;
      if (!turn.timestamp && date != s.metadata.end())
        turn.timestamp = date->second;
      merged.turns.push_back(std::move(turn));
    }
  }
  return merged;
}

namespace detail {

inline Session session_from_json(const nlohmann::json& j, int line_no) {
  if (!j.is_object()) throw ParseError("session record is not an object", line_no);
  Session s;
  try {
    s.session_id = j.at("session_id").get<std::string>();
    if (j.contains("metadata")) {
      for (const auto& [k, v] : j.at("metadata").items())
        s.metadata[k] = v.get<std::string>();
    }
    int index = 0;
    for (const auto& jt : j.at("turns")) {
      DialogueTurn turn;
      turn.turn_index = ++index;
      turn.speaker = jt.value("speaker", std::string{});
      turn.text = jt.at("text").get<std::string>();
      if (jt.contains("timestamp"))
        turn.timestamp = jt.at("timestamp").get<std::string>();
      s.turns.push_back(std::move(turn));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad session record: ") + e.what(), line_no);
  }
  return s;
}

inline std::vector<CorpusEntry> parse_jsonl(std::istream& in) {
  std::vector<CorpusEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    out.push_back(CorpusEntry{session_from_json(j, line_no), std::nullopt});
  }
  return out;
}

inline std::vector<CorpusEntry> parse_dialseg(std::istream& in) {
  std::vector<CorpusEntry> out;

  std::vector<DialogueTurn> turns;
  std::vector<int> seg_ids;
  auto flush = [&] {
    if (turns.empty()) return;
    Session s;
    s.session_id = "dialseg-" + std::to_string(out.size() + 1);
    s.turns = std::move(turns);
    std::vector<int> boundaries;
    for (std::size_t i = 1; i < seg_ids.size(); ++i)
      if (seg_ids[i] != seg_ids[i - 1]) boundaries.push_back(static_cast<int>(i));
    SegReference ref =
        make_segmentation(std::move(boundaries), static_cast<int>(s.turns.size()));
    out.push_back(CorpusEntry{std::move(s), std::move(ref)});
    turns.clear();
    seg_ids.clear();
  };

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos)
      throw ParseError("expected <utterance>\\t<segment-id>", line_no);
    const std::string text = line.substr(0, tab);
    int seg_id = 0;
    try {
      std::size_t used = 0;
      seg_id = std::stoi(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1)
        throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError("segment-id is not an integer", line_no);
    }
    if (!seg_ids.empty() && seg_id < seg_ids.back())
      throw ParseError("segment-id decreased", line_no);

    DialogueTurn turn;
    turn.turn_index = static_cast<int>(turns.size()) + 1;
    turn.speaker = (turns.size() % 2 == 0) ? "A" : "B";
    turn.text = text;
    turns.push_back(std::move(turn));
    seg_ids.push_back(seg_id);
  }
  flush();
  return out;
}

}  // namespace detail

inline std::vector<CorpusEntry> load_corpus(const std::filesystem::path& path,
                                            CorpusFormat format) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  try {
    return format == CorpusFormat::jsonl ? detail::parse_jsonl(in)
                                         : detail::parse_dialseg(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline std::vector<Session> load_sessions(const std::filesystem::path& path,
                                          CorpusFormat format) {
  std::vector<Session> sessions;
  for (auto& entry : load_corpus(path, format))
    sessions.push_back(std::move(entry.session));
  return sessions;
}

inline nlohmann::json session_to_json(const Session& s) {
  nlohmann::json j;
  j["session_id"] = s.session_id;
  j["metadata"] = nlohmann::json::object();
  for (const auto& [k, v] : s.metadata) j["metadata"][k] = v;
  j["turns"] = nlohmann::json::array();
  for (const DialogueTurn& t : s.turns) {
    nlohmann::json jt{{"speaker", t.speaker}, {"text", t.text}};
    if (t.timestamp) jt["timestamp"] = *t.timestamp;
    j["turns"].push_back(std::move(jt));
  }
  return j;
}

inline std::string sessions_to_jsonl(const std::vector<Session>& sessions) {
  std::ostringstream out;
  for (const Session& s : sessions) out << session_to_json(s).dump() << "\n";
  return out.str();
}

}  // namespace esmem
