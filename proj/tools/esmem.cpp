// esmem: segment dialogue streams into events, build a layered memory
// repository, run boundary-anchored retrieval, and evaluate segmentation/QA.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "esmem/esmem.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalArgs {
  std::optional<fs::path> config_path;
  std::optional<int> jobs;
  std::optional<std::string> log_level;
};

struct KnobOverrides {
  std::optional<double> q;
  std::optional<double> tau_c;
  std::optional<int> window_l;
  std::optional<int> boundary_l;
  std::optional<int> anchor_k;
  std::optional<int> expand_w;
  std::optional<double> alpha;
  std::optional<int> top_k;
};

void add_knob_options(CLI::App* cmd, KnobOverrides& k) {
  cmd->add_option("--q", k.q, "segmentation quantile q");
  cmd->add_option("--tau-c", k.tau_c, "boundary probability threshold");
  cmd->add_option("--window-l", k.window_l, "intent context window length");
  cmd->add_option("--boundary-l", k.boundary_l, "refined boundary context length");
  cmd->add_option("--anchor-k", k.anchor_k, "anchor candidates k");
  cmd->add_option("--expand-w", k.expand_w, "interval expansion window w");
  cmd->add_option("--alpha", k.alpha, "fusion weight alpha");
  cmd->add_option("--top-k", k.top_k, "final top-K events");
}

esmem::AppConfig resolve_config(const GlobalArgs& g, const KnobOverrides& k) {
  esmem::AppConfig cfg = esmem::load_app_config(g.config_path);
  if (g.jobs) {
    cfg.jobs = *g.jobs;
    cfg.provider.http.concurrency_limit =
        std::min(cfg.provider.http.concurrency_limit, *g.jobs);
  }
  if (g.log_level) cfg.log_level = esmem::parse_log_level(*g.log_level);
  if (k.q) cfg.segmentation.quantile_q = *k.q;
  if (k.tau_c) cfg.segmentation.tau_c = *k.tau_c;
  if (k.window_l) cfg.segmentation.context_window = *k.window_l;
  if (k.boundary_l) cfg.memory.boundary_context_len = *k.boundary_l;
  if (k.anchor_k) cfg.retrieval.anchor_k = *k.anchor_k;
  if (k.expand_w) cfg.retrieval.window_w = *k.expand_w;
  if (k.alpha) cfg.retrieval.alpha = *k.alpha;
  if (k.top_k) cfg.retrieval.final_k = *k.top_k;
  cfg.segmentation.jobs = cfg.jobs;
  cfg.memory.jobs = cfg.jobs;
  const esmem::prompts::PromptTemplates templates = esmem::resolve_templates(cfg);
  cfg.segmentation.templates = templates;
  cfg.memory.templates = templates;
  cfg.validate();
  esmem::set_log_level(cfg.log_level);
  return cfg;
}

esmem::CorpusFormat parse_format(const std::string& name) {
  if (name == "jsonl") return esmem::CorpusFormat::jsonl;
  if (name == "dialseg") return esmem::CorpusFormat::dialseg;
  throw esmem::ConfigError("unknown corpus format: " + name);
}

std::vector<esmem::CorpusEntry> load_corpus_entries(const fs::path& path,
                                                    const std::string& format,
                                                    bool concat) {
  auto entries = esmem::load_corpus(path, parse_format(format));
  if (entries.empty()) throw esmem::Error("corpus is empty: " + path.string());
  if (!concat || entries.size() <= 1) return entries;
  std::vector<esmem::Session> sessions;
  sessions.reserve(entries.size());
  for (auto& e : entries) sessions.push_back(std::move(e.session));
  std::vector<esmem::CorpusEntry> merged;
  merged.push_back(esmem::CorpusEntry{esmem::concat_sessions(sessions), std::nullopt});
  return merged;
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw esmem::Error("cannot write " + path.string());
  out << content;
}

std::vector<esmem::QAItem> load_qa_items(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw esmem::Error("cannot open QA file: " + path.string());
  std::vector<esmem::QAItem> items;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      esmem::QAItem item;
      item.id = j.value("id", "q" + std::to_string(items.size() + 1));
      item.question = j.at("question").get<std::string>();
      item.gold = j.at("answer").get<std::string>();
      item.category = j.value("category", std::string{});
      items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw esmem::ParseError(path.string() + ": " + e.what(), line_no);
    }
  }
  if (items.empty()) throw esmem::Error("QA file is empty: " + path.string());
  return items;
}

int run_segment(const GlobalArgs& g, const KnobOverrides& k, const fs::path& corpus,
                const std::string& format, const fs::path& out_path,
                const std::optional<fs::path>& trace_dir, bool concat) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const auto entries = load_corpus_entries(corpus, format, concat);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  json out;
  out["config"] = cfg.to_json();
  out["sessions"] = json::array();
  for (const auto& entry : entries) {
    const esmem::SegmentationResult result =
        esmem::segment_session(entry.session, cfg.segmentation, provider.get());
    const esmem::SegHypothesis hyp = esmem::events_to_hypothesis(result.events);
    out["sessions"].push_back({{"session_id", entry.session.session_id},
                               {"total_turns", hyp.total_turns},
                               {"boundaries", hyp.boundary_positions}});
    if (trace_dir) {
      std::string name = entry.session.session_id;
      for (char& c : name)
        if (c == '/' || c == '\\') c = '_';
      write_file(*trace_dir / (name + ".trace.json"),
                 result.debug.to_json().dump(2) + "\n");
    }
  }
  write_file(out_path, out.dump(2) + "\n");
  std::cout << "segmented " << entries.size() << " session(s) -> " << out_path.string()
            << "\n";
  return 0;
}

int run_build(const GlobalArgs& g, const KnobOverrides& k, const fs::path& corpus,
              const std::string& format, const fs::path& repo_dir, bool concat) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const auto entries = load_corpus_entries(corpus, format, concat);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  std::vector<esmem::MemoryRepository> parts;
  for (const auto& entry : entries) {
    const esmem::SegmentationResult seg =
        esmem::segment_session(entry.session, cfg.segmentation, provider.get());
    parts.push_back(esmem::construct_memory(seg.events, seg.trace, entry.session,
                                            cfg.memory, provider.get()));
  }
  esmem::MemoryRepository repo =
      esmem::merge_repositories(std::move(parts), corpus.stem().string());
  repo.config_snapshot = cfg.to_json();
  esmem::save_repository(repo, repo_dir);
  std::cout << "built repository with " << repo.size() << " unit(s) -> "
            << repo_dir.string() << "\n";
  return 0;
}

int run_query(const GlobalArgs& g, const KnobOverrides& k, const fs::path& repo_dir,
              const std::string& query, bool as_json,
              const std::optional<fs::path>& out_path) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const esmem::MemoryRepository repo = esmem::load_repository(repo_dir);
  const esmem::VectorIndex index = esmem::index_repository(repo);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  const esmem::RetrievalResult result =
      esmem::retrieve(query, repo, index, cfg.retrieval, provider.get());
  const std::string json_text = result.to_json().dump(2) + "\n";
  if (out_path) write_file(*out_path, json_text);
  if (as_json) {
    std::cout << json_text;
  } else {
    std::cout << "query: " << query << "\n";
    for (const esmem::ScoredEvent& s : result.selected)
      std::cout << "  event " << s.event_index << "  score=" << s.score
                << "  s_sum=" << s.s_sum << "  s_ctx=" << s.s_ctx << "\n";
    std::cout << "\n" << result.context_text;
  }
  return 0;
}

int run_answer(const GlobalArgs& g, const KnobOverrides& k, const fs::path& repo_dir,
               const std::string& query) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const esmem::MemoryRepository repo = esmem::load_repository(repo_dir);
  const esmem::VectorIndex index = esmem::index_repository(repo);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  const esmem::RetrievalResult result =
      esmem::retrieve(query, repo, index, cfg.retrieval, provider.get());
  std::cout << esmem::compose_answer(query, result, provider.get(),
                                     cfg.segmentation.templates)
            << "\n";
  return 0;
}

int run_eval_seg(const GlobalArgs& g, const KnobOverrides& k, const fs::path& corpus,
                 const fs::path& report_path,
                 const std::optional<fs::path>& csv_path) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const auto entries = load_corpus_entries(corpus, "dialseg", false);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  esmem::SegEvalReport report =
      esmem::evaluate_segmentation(entries, cfg.segmentation, provider.get(), cfg.jobs);
  report.config = cfg.to_json();
  write_file(report_path, report.to_json().dump(2) + "\n");
  if (csv_path) write_file(*csv_path, report.to_csv());
  std::cout << "evaluated " << report.items.size() << " dialogue(s), "
            << report.errors.size() << " error(s)\n"
            << "macro: pk=" << report.aggregates.pk << " wd=" << report.aggregates.wd
            << " f1=" << report.aggregates.f1 << " score=" << report.aggregates.score
            << "\n";
  return 0;
}

int run_eval_qa(const GlobalArgs& g, const KnobOverrides& k, const fs::path& repo_dir,
                const fs::path& qa_path, const fs::path& report_path,
                const std::optional<fs::path>& csv_path) {
  const esmem::AppConfig cfg = resolve_config(g, k);
  const esmem::MemoryRepository repo = esmem::load_repository(repo_dir);
  const esmem::VectorIndex index = esmem::index_repository(repo);
  const auto items = load_qa_items(qa_path);
  esmem::ProviderHandle provider = esmem::make_provider(cfg);

  esmem::QAEvalReport report =
      esmem::evaluate_qa(items, repo, index, cfg.retrieval, provider.get(),
                         cfg.segmentation.templates, cfg.jobs);
  report.config = cfg.to_json();
  write_file(report_path, report.to_json().dump(2) + "\n");
  if (csv_path) write_file(*csv_path, report.to_csv());
  std::cout << "answered " << report.items.size() << " question(s), "
            << report.errors.size() << " error(s)\n"
            << "overall: token_f1=" << report.overall.token_f1
            << " bleu1=" << report.overall.bleu1 << "\n";
  return 0;
}

int run_sweep_k(const GlobalArgs& g, const KnobOverrides& k, const fs::path& repo_dir,
                const fs::path& qa_path, const fs::path& report_path) {
  const esmem::AppConfig base_cfg = resolve_config(g, k);
  const esmem::MemoryRepository repo = esmem::load_repository(repo_dir);
  const esmem::VectorIndex index = esmem::index_repository(repo);
  const auto items = load_qa_items(qa_path);
  esmem::ProviderHandle provider = esmem::make_provider(base_cfg);

  const std::vector<int> sweep{1, 5, 10, 15, 20};
  json out;
  out["config"] = base_cfg.to_json();
  out["sweep"] = json::array();
  std::cout << "K\ttoken_f1\tbleu1\tevaluated\terrors\n";
  for (int k_value : sweep) {
    esmem::RetrievalParams params = base_cfg.retrieval;
    params.final_k = k_value;
    const esmem::QAEvalReport report =
        esmem::evaluate_qa(items, repo, index, params, provider.get(),
                           base_cfg.segmentation.templates, base_cfg.jobs);
    out["sweep"].push_back({{"k", k_value},
                            {"token_f1", report.overall.token_f1},
                            {"bleu1", report.overall.bleu1},
                            {"evaluated", report.items.size()},
                            {"errors", report.errors.size()}});
    std::cout << k_value << "\t" << report.overall.token_f1 << "\t"
              << report.overall.bleu1 << "\t" << report.items.size() << "\t"
              << report.errors.size() << "\n";
  }
  write_file(report_path, out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"event-segmented layered memory for long dialogues"};
  app.require_subcommand(1);

  GlobalArgs global;
  bool global_json = false;
  app.add_option("--config", global.config_path, "config file (JSON)");
  app.add_option("--jobs", global.jobs, "provider concurrency cap");
  app.add_option("--log-level", global.log_level, "debug|info|warn|error|off");
  app.add_flag("--json", global_json, "machine-readable output where supported");

  KnobOverrides knobs;
  fs::path corpus, out_path = "boundaries.json", repo_dir, qa_path;
  fs::path report_path = "report.json";
  std::optional<fs::path> trace_dir, csv_path, query_out;
  std::string format = "jsonl", query;
  bool concat = false, as_json = false;

  CLI::App* segment = app.add_subcommand("segment", "segment a corpus into events");
  segment->add_option("--corpus", corpus, "corpus file")->required();
  segment->add_option("--format", format, "jsonl|dialseg");
  segment->add_option("--out", out_path, "boundaries output file");
  segment->add_option("--emit-trace", trace_dir, "write per-session trace JSON here");
  segment->add_flag("--concat", concat, "concatenate sessions before segmenting");
  add_knob_options(segment, knobs);

  CLI::App* build = app.add_subcommand("build", "segment and build a repository");
  build->add_option("--corpus", corpus, "corpus file")->required();
  build->add_option("--format", format, "jsonl|dialseg");
  build->add_option("--repo", repo_dir, "repository directory")->required();
  build->add_flag("--concat", concat, "concatenate sessions before segmenting");
  add_knob_options(build, knobs);

  CLI::App* query_cmd = app.add_subcommand("query", "retrieve events for a query");
  query_cmd->add_option("--repo", repo_dir, "repository directory")->required();
  query_cmd->add_option("--query", query, "query text")->required();
  query_cmd->add_flag("--json", as_json, "print the result JSON");
  query_cmd->add_option("--out", query_out, "also write the result JSON here");
  add_knob_options(query_cmd, knobs);

  CLI::App* answer = app.add_subcommand("answer", "retrieve and generate an answer");
  answer->add_option("--repo", repo_dir, "repository directory")->required();
  answer->add_option("--query", query, "question text")->required();
  add_knob_options(answer, knobs);

  CLI::App* eval_seg = app.add_subcommand("eval-seg", "segmentation metrics on a corpus");
  eval_seg->add_option("--corpus", corpus, "dialseg corpus file")->required();
  eval_seg->add_option("--report", report_path, "report JSON path");
  eval_seg->add_option("--csv", csv_path, "also export CSV here");
  add_knob_options(eval_seg, knobs);

  CLI::App* eval_qa = app.add_subcommand("eval-qa", "QA metrics over a repository");
  eval_qa->add_option("--repo", repo_dir, "repository directory")->required();
  eval_qa->add_option("--qa", qa_path, "QA set (JSONL)")->required();
  eval_qa->add_option("--report", report_path, "report JSON path");
  eval_qa->add_option("--csv", csv_path, "also export CSV here");
  add_knob_options(eval_qa, knobs);

  CLI::App* sweep = app.add_subcommand("sweep-k", "sweep final top-K over {1,5,10,15,20}");
  sweep->add_option("--repo", repo_dir, "repository directory")->required();
  sweep->add_option("--qa", qa_path, "QA set (JSONL)")->required();
  sweep->add_option("--report", report_path, "report JSON path");
  add_knob_options(sweep, knobs);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (segment->parsed())
      return run_segment(global, knobs, corpus, format, out_path, trace_dir, concat);
    if (build->parsed())
      return run_build(global, knobs, corpus, format, repo_dir, concat);
    if (query_cmd->parsed())
      return run_query(global, knobs, repo_dir, query, as_json || global_json,
                       query_out);
    if (answer->parsed()) return run_answer(global, knobs, repo_dir, query);
    if (eval_seg->parsed())
      return run_eval_seg(global, knobs, corpus, report_path, csv_path);
    if (eval_qa->parsed())
      return run_eval_qa(global, knobs, repo_dir, qa_path, report_path, csv_path);
    if (sweep->parsed()) return run_sweep_k(global, knobs, repo_dir, qa_path, report_path);
  } catch (const esmem::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
