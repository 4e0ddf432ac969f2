#pragma once
// Prompt assembly for the four LLM call sites: per-turn topic extraction,
// intent labeling at candidate boundaries, refined-boundary generation, and
// answer generation. The instruction wording is a reconstruction that
// preserves the documented I/O contracts; see assets/prompts/ for the same
// texts as standalone files (loadable via load_from_dir).

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>

#include "esmem/dialogue.hpp"
#include "esmem/provider.hpp"

namespace esmem::prompts {

struct PromptTemplates {
  std::string id;
  std::string topic_system;
  std::string intent_system;  // contains a {{LABELS}} placeholder
  std::string boundary_system;
  std::string answer_system;
};

inline const PromptTemplates& builtin() {
  static const PromptTemplates t{
      "builtin/v1",
      // topic-extraction
      "You track the topic of a dialogue turn by turn. Given the previous "
      "turn's topic (when present) and the current turn, reply with exactly "
      "two lines:\n"
      "Topic: <concise topic phrase>\n"
      "Keywords: <comma-separated keywords>",
      // intent-label
      "You judge whether a dialogue shifts to a new event between the "
      "preceding and succeeding turns. Classify the transition using these "
      "intent labels:\n"
      "{{LABELS}}\n"
      "Reply with exactly two lines, your two most probable labels ranked by "
      "confidence, each formatted as:\n"
      "<LABEL> <confidence between 0 and 1>",
      // refined-boundary
      "You describe the transition between two consecutive dialogue events. "
      "Reply with one short paragraph of the form:\n"
      "\"<previous topic> ended. Transitioned to <new topic>. Context: <one "
      "sentence grounding the transition>.\"\n"
      "For an opening event with no predecessor, describe what the "
      "conversation opens with instead:\n"
      "\"Conversation opened with <topic>. Context: <one sentence>.\"",
      // answer-generation
      "You answer a question about a long conversation. Use only the provided "
      "conversation memory; if the memory does not contain the answer, say so "
      "briefly. Reply with the answer only."};
  return t;
}

namespace detail {
inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open prompt asset: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r'))
    text.pop_back();
  return text;
}
}  // namespace detail

inline PromptTemplates load_from_dir(const std::filesystem::path& dir) {
  PromptTemplates t;
  t.id = "dir:" + dir.string();
  t.topic_system = detail::read_text_file(dir / "topic_extraction.txt");
  t.intent_system = detail::read_text_file(dir / "intent_label.txt");
  t.boundary_system = detail::read_text_file(dir / "refined_boundary.txt");
  t.answer_system = detail::read_text_file(dir / "answer_generation.txt");
  return t;
}

inline std::string format_turns(std::span<const DialogueTurn> turns) {
  std::ostringstream out;
  for (const DialogueTurn& t : turns)
    out << t.speaker << ": " << (t.text.empty() ? "(empty)" : t.text) << "\n";
  return out.str();
}

inline ChatRequest topic_request(const PromptTemplates& tmpl,
                                 const std::optional<std::string>& prev_topic,
                                 const DialogueTurn& turn) {
  std::ostringstream user;
  if (prev_topic) user << "Previous topic: " << *prev_topic << "\n";
  user << "Current turn:\n" << turn.speaker << ": " << turn.text;
  return ChatRequest{tmpl.topic_system, user.str(), 0.0, 200};
}

inline ChatRequest intent_request(const PromptTemplates& tmpl,
                                  const std::string& labels_block,
                                  std::span<const DialogueTurn> preceding,
                                  std::span<const DialogueTurn> succeeding) {
  std::string system = tmpl.intent_system;
  const auto pos = system.find("{{LABELS}}");
  if (pos != std::string::npos) system.replace(pos, 10, labels_block);
  std::ostringstream user;
  user << "Preceding turns:\n"
       << format_turns(preceding) << "Succeeding turns:\n"
       << format_turns(succeeding);
  return ChatRequest{std::move(system), user.str(), 0.0, 100};
}

inline ChatRequest boundary_request(const PromptTemplates& tmpl,
                                    const std::string* prev_summary,
                                    const std::string& summary,
                                    std::span<const DialogueTurn> context_turns) {
  std::ostringstream user;
  if (prev_summary) {
    user << "Previous event summary: " << *prev_summary << "\n"
         << "Current event summary: " << summary << "\n"
         << "Boundary turns:\n"
         << format_turns(context_turns);
  } else {
    user << "Opening event summary: " << summary << "\n"
         << "First turns:\n"
         << format_turns(context_turns);
  }
  return ChatRequest{tmpl.boundary_system, user.str(), 0.0, 300};
}

inline ChatRequest answer_request(const PromptTemplates& tmpl,
                                  const std::string& query,
                                  const std::string& context_text) {
  std::ostringstream user;
  user << "Conversation memory:\n" << context_text << "\n\nQuestion: " << query;
  return ChatRequest{tmpl.answer_system, user.str(), 0.0, 1024};
}

// Pass-through template for LLM-judged answer accuracy. Requires a judge
// provider; not part of the deterministic metric suite.
inline ChatRequest judge_request(const std::string& question,
                                 const std::string& gold,
                                 const std::string& prediction) {
  std::ostringstream user;
  user << "Question: " << question << "\nReference answer: " << gold
       << "\nCandidate answer: " << prediction;
  return ChatRequest{
      "You grade whether a candidate answer is correct given a reference "
      "answer. Reply with exactly one word: yes or no.",
      user.str(), 0.0, 8};
}

}  // namespace esmem::prompts
