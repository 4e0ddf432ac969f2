#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <random>

#include "esmem/memory.hpp"
#include "esmem/mock_provider.hpp"
#include "testutil.hpp"

using namespace esmem;

namespace {

TopicTrace trace_of(std::vector<TopicEntry> entries) {
  TopicTrace t;
  t.entries = std::move(entries);
  return t;
}

}  // namespace

TEST_CASE("build_summary concatenates topics and dedups keywords") {
  const Session s = testutil::make_session("s", {"a", "b", "c"});
  const auto events = split_session(s, {});
  const TopicTrace trace = trace_of({{"travel", {"paris"}},
                                     {"travel plans", {"paris", "hotel"}},
                                     {"budget", {"hotel", "euros"}}});

  SECTION("single-turn event mentions topic and keyword") {
    const auto one = split_session(testutil::make_session("s", {"a"}), {});
    const TopicTrace t1 = trace_of({{"travel", {"paris"}}});
    const std::string summary = build_summary(one[0], t1);
    CHECK(summary == "Topics: travel. Keywords: paris.");
  }

  SECTION("duplicate keywords appear once, first-seen order") {
    const std::string summary = build_summary(events[0], trace);
    CHECK(summary ==
          "Topics: travel; travel plans; budget. Keywords: paris, hotel, euros.");
  }

  SECTION("deterministic") {
    CHECK(build_summary(events[0], trace) == build_summary(events[0], trace));
  }

  SECTION("no keywords at all") {
    const auto one = split_session(testutil::make_session("s", {"a"}), {});
    CHECK(build_summary(one[0], trace_of({{"chitchat", {}}})) ==
          "Topics: chitchat. Keywords: none.");
  }

  SECTION("event range outside the trace") {
    const TopicTrace short_trace = trace_of({{"only", {}}});
    CHECK_THROWS_AS(build_summary(events[0], short_trace), InvariantError);
  }
}

TEST_CASE("build_refined_boundary") {
  const Session s = testutil::make_session(
      "s", {"a1", "a2", "b1", "b2", "b3", "b4", "b5", "b6"});
  const auto events = split_session(s, {2});
  const std::string prev_summary = "Topics: travel. Keywords: paris.";
  const std::string cur_summary = "Topics: cooking. Keywords: pasta.";

  SECTION("transition form uses prev summary and clipped context") {
    // prev event has 2 turns < L=4, so its whole span joins the context
    std::vector<DialogueTurn> expected_context(s.turns.begin(), s.turns.begin() + 6);
    const ChatRequest expected = prompts::boundary_request(
        prompts::builtin(), &prev_summary, cur_summary, expected_context);
    MockProvider provider(
        {{expected.user_prompt,
          "Topic travel ended. Transitioned to topic cooking. Context: pasta."}},
        1, 8);
    const RefinedBoundary rb = build_refined_boundary(
        &events[0], &prev_summary, events[1], cur_summary, 4, provider);
    CHECK(rb.text ==
          "Topic travel ended. Transitioned to topic cooking. Context: pasta.");
    CHECK_FALSE(rb.fallback);
  }

  SECTION("first event uses the opening form") {
    MockProvider provider({}, 1, 8);
    build_refined_boundary(nullptr, nullptr, events[0], prev_summary, 4, provider);
    REQUIRE(provider.chat_log().size() == 1);
    CHECK(provider.chat_log()[0].user_prompt.rfind("Opening event summary:", 0) == 0);
  }

  SECTION("provider failure degrades to the summary form") {
    MockProvider provider({}, 1, 8);  // nothing scripted -> chat fails
    const RefinedBoundary rb = build_refined_boundary(
        &events[0], &prev_summary, events[1], cur_summary, 4, provider);
    CHECK(rb.text == "Transitioned to: " + cur_summary);
    CHECK(rb.fallback);
  }
}

namespace {

// Scripts boundary prompts for a session split at the given positions.
std::map<std::string, std::string> script_boundaries(const Session& s,
                                                     const std::vector<int>& bounds,
                                                     const TopicTrace& trace,
                                                     int context_len) {
  std::map<std::string, std::string> script;
  const auto events = split_session(s, bounds);
  std::vector<std::string> summaries;
  for (const auto& ev : events) summaries.push_back(build_summary(ev, trace));
  for (std::size_t i = 0; i < events.size(); ++i) {
    std::vector<DialogueTurn> ctx;
    if (i > 0) {
      const auto& prev = events[i - 1].turns;
      const std::size_t take =
          std::min<std::size_t>(prev.size(), static_cast<std::size_t>(context_len));
      ctx.insert(ctx.end(), prev.end() - take, prev.end());
    }
    const auto& cur = events[i].turns;
    const std::size_t take =
        std::min<std::size_t>(cur.size(), static_cast<std::size_t>(context_len));
    ctx.insert(ctx.end(), cur.begin(), cur.begin() + take);
    const ChatRequest req = prompts::boundary_request(
        prompts::builtin(), i == 0 ? nullptr : &summaries[i - 1], summaries[i], ctx);
    script[req.user_prompt] =
        "Boundary " + std::to_string(i + 1) + " description.";
  }
  return script;
}

TopicTrace uniform_trace(int total) {
  TopicTrace t;
  for (int i = 1; i <= total; ++i)
    t.entries.push_back({"topic " + std::to_string(i), {"kw" + std::to_string(i)}});
  return t;
}

}  // namespace

TEST_CASE("construct_memory builds one unit per event") {
  Session s = testutil::make_session("sess", {"u1", "u2", "u3", "u4", "u5", "u6"});
  s.metadata["date"] = "2026-05-05";
  s.turns[2].timestamp = "2026-05-05T12:00:00Z";
  const TopicTrace trace = uniform_trace(6);
  const std::vector<int> bounds{2, 4};
  const auto events = split_session(s, bounds);
  MemoryBuildConfig cfg;

  MockProvider provider(script_boundaries(s, bounds, trace, cfg.boundary_context_len),
                        1, 8);
  const MemoryRepository repo = construct_memory(events, trace, s, cfg, provider);

  SECTION("contiguous indices and unit count") {
    REQUIRE(repo.size() == 3);
    CHECK(repo.units[0].event_index == 1);
    CHECK(repo.units[2].event_index == 3);
  }

  SECTION("raw contexts are the verbatim source turns") {
    CHECK(repo.units[0].raw_context == events[0].turns);
    CHECK(repo.units[1].raw_context == events[1].turns);
    std::vector<DialogueTurn> reassembled;
    for (const auto& u : repo.units)
      reassembled.insert(reassembled.end(), u.raw_context.begin(),
                         u.raw_context.end());
    CHECK(reassembled == s.turns);  // level-3 fidelity
  }

  SECTION("timestamps fall back from turn to session date") {
    CHECK(repo.units[0].timestamp == "2026-05-05");            // metadata date
    CHECK(repo.units[1].timestamp == "2026-05-05T12:00:00Z");  // turn timestamp
    Session bare = testutil::make_session("bare", {"x"});
    const auto ev = split_session(bare, {});
    MockProvider p2(script_boundaries(bare, {}, uniform_trace(1), 4), 1, 8);
    const MemoryRepository r2 =
        construct_memory(ev, uniform_trace(1), bare, cfg, p2);
    CHECK(r2.units[0].timestamp == "unknown");
  }

  SECTION("embeddings match the provider's output for the texts") {
    CHECK(repo.units[0].boundary_embedding ==
          MockProvider::hash_embedding(repo.units[0].refined_boundary, 1, 8));
    CHECK(repo.units[0].summary_embedding ==
          MockProvider::hash_embedding(repo.units[0].summary, 1, 8));
  }

  SECTION("deterministic rebuild, including under parallel boundary calls") {
    MemoryBuildConfig par = cfg;
    par.jobs = 4;
    MockProvider p1(script_boundaries(s, bounds, trace, 4), 1, 8);
    MockProvider p2(script_boundaries(s, bounds, trace, 4), 1, 8);
    const MemoryRepository r1 = construct_memory(events, trace, s, par, p1);
    const MemoryRepository r2 = construct_memory(events, trace, s, par, p2);
    CHECK(r1.units == r2.units);
  }
}

TEST_CASE("merge_repositories renumbers chronologically") {
  const MemoryRepository a = testutil::make_repository(2, "first");
  const MemoryRepository b = testutil::make_repository(3, "second");
  const MemoryRepository merged = merge_repositories({a, b}, "merged");
  REQUIRE(merged.size() == 5);
  CHECK(merged.repo_id == "merged");
  CHECK(merged.units[2].event_index == 3);
  CHECK(merged.units[2].source_session == "second");
  CHECK(merged.units[2].summary == b.units[0].summary);
}

TEST_CASE("vector index scans match brute-force cosine") {
  const MemoryRepository repo = testutil::make_repository(10, "idx");
  const VectorIndex index = index_repository(repo);
  const EmbeddingVector q = MockProvider::hash_embedding("some query", 11, 16);

  SECTION("self-similarity of a stored boundary row") {
    const auto scores = index.scan_boundary(repo.units[3].boundary_embedding);
    CHECK(scores[3] == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("scan equals per-unit cosine loop") {
    const auto bnd = index.scan_boundary(q);
    const auto sum = index.scan_summary(q);
    REQUIRE(bnd.size() == 10);
    for (int i = 0; i < 10; ++i) {
      CHECK(bnd[i] == cosine(q, repo.units[i].boundary_embedding));
      CHECK(sum[i] == cosine(q, repo.units[i].summary_embedding));
      CHECK(index.boundary_score(i + 1, q) == bnd[i]);
      CHECK(index.summary_score(i + 1, q) == sum[i]);
    }
  }

  SECTION("empty repository yields empty scans") {
    const MemoryRepository empty;
    const VectorIndex idx = index_repository(empty);
    CHECK(idx.size() == 0);
    CHECK(idx.scan_boundary(q).empty());
  }

  SECTION("dimension mismatch across units is rejected") {
    MemoryRepository bad = testutil::make_repository(2, "bad");
    bad.units[1].summary_embedding.values.pop_back();
    CHECK_THROWS_AS(index_repository(bad), InvariantError);
  }
}

TEST_CASE("repository persistence") {
  testutil::TempDir dir("repo");

  SECTION("save/load round trip is field-equal") {
    MemoryRepository repo = testutil::make_repository(4, "persist");
    repo.config_snapshot = {{"retrieval", {{"alpha", 0.7}}}};
    save_repository(repo, dir.path());
    const MemoryRepository loaded = load_repository(dir.path());
    CHECK(loaded.repo_id == repo.repo_id);
    CHECK(loaded.schema_version == repo.schema_version);
    CHECK(loaded.config_snapshot == repo.config_snapshot);
    CHECK(loaded.units == repo.units);
  }

  SECTION("future schema version triggers a migration error") {
    MemoryRepository repo = testutil::make_repository(1, "future");
    save_repository(repo, dir.path());
    // bump the on-disk schema version
    nlohmann::json manifest;
    {
      std::ifstream in(dir.path() / "manifest.json");
      in >> manifest;
    }
    manifest["schema_version"] = kRepositorySchemaVersion + 1;
    testutil::write_file(dir.path() / "manifest.json", manifest.dump(2));
    CHECK_THROWS_AS(load_repository(dir.path()), SchemaError);
  }

  SECTION("corrupt unit line names the unit") {
    save_repository(testutil::make_repository(3, "corrupt"), dir.path());
    std::string units = testutil::read_file(dir.path() / "units.jsonl");
    const auto first_newline = units.find('\n');
    units = units.substr(0, first_newline + 1) + "{broken\n" +
            units.substr(units.find('\n', first_newline + 1) + 1);
    testutil::write_file(dir.path() / "units.jsonl", units);
    CHECK_THROWS_WITH(load_repository(dir.path()),
                      Catch::Matchers::ContainsSubstring("unit 2"));
  }

  SECTION("truncated units file names the last valid unit") {
    save_repository(testutil::make_repository(5, "trunc"), dir.path());
    std::string units = testutil::read_file(dir.path() / "units.jsonl");
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) pos = units.find('\n', pos) + 1;
    testutil::write_file(dir.path() / "units.jsonl", units.substr(0, pos));
    CHECK_THROWS_WITH(load_repository(dir.path()),
                      Catch::Matchers::ContainsSubstring("last valid unit is 3"));
  }

  SECTION("missing manifest") {
    CHECK_THROWS_WITH(load_repository(dir.path() / "nowhere"),
                      Catch::Matchers::ContainsSubstring("manifest"));
  }

  SECTION("held lock blocks a writer") {
    testutil::write_file(dir.path() / "lock", "");
    CHECK_THROWS_WITH(save_repository(testutil::make_repository(1, "locked"), dir.path()),
                      Catch::Matchers::ContainsSubstring("locked"));
  }

  SECTION("saving twice is fine once the lock is released") {
    save_repository(testutil::make_repository(1, "twice"), dir.path());
    save_repository(testutil::make_repository(2, "twice"), dir.path());
    CHECK(load_repository(dir.path()).size() == 2);
  }

  SECTION("index rows equal stored embeddings after load") {
    const MemoryRepository repo = testutil::make_repository(6, "coherent");
    save_repository(repo, dir.path());
    const MemoryRepository loaded = load_repository(dir.path());
    const VectorIndex index = index_repository(loaded);
    for (const MemoryUnit& u : loaded.units) {
      CHECK(index.boundary_score(u.event_index, u.boundary_embedding) ==
            Catch::Approx(1.0).margin(1e-9));
      CHECK(u.boundary_embedding ==
            repo.units[u.event_index - 1].boundary_embedding);  // bit-for-bit
    }
  }
}
