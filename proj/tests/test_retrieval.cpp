#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "esmem/mock_provider.hpp"
#include "esmem/retrieval.hpp"
#include "testutil.hpp"

using namespace esmem;

namespace {

// Brute-force realization of the retrieval equations, independent of the
// index/pipeline code path.
struct OracleResult {
  std::vector<Anchor> anchors;
  std::vector<ScoredEvent> ranked;
};

OracleResult oracle_retrieve(const EmbeddingVector& q, const MemoryRepository& repo,
                             int k, int w, double alpha, int top_k) {
  const int n = static_cast<int>(repo.size());
  std::vector<Anchor> all;
  for (int i = 1; i <= n; ++i)
    all.push_back(Anchor{i, cosine(q, repo.units[i - 1].boundary_embedding)});
  std::stable_sort(all.begin(), all.end(), [](const Anchor& a, const Anchor& b) {
    if (a.sim_bnd != b.sim_bnd) return a.sim_bnd > b.sim_bnd;
    return a.event_index < b.event_index;
  });
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(k)));

  std::map<int, double> ctx;
  for (const Anchor& a : all)
    for (int j = std::max(1, a.event_index - w); j <= std::min(n, a.event_index + w); ++j) {
      auto [it, fresh] = ctx.emplace(j, a.sim_bnd);
      if (!fresh) it->second = std::max(it->second, a.sim_bnd);
    }

  std::vector<ScoredEvent> ranked;
  for (const auto& [j, s_ctx] : ctx) {
    ScoredEvent e;
    e.event_index = j;
    e.s_ctx = s_ctx;
    e.s_sum = cosine(q, repo.units[j - 1].summary_embedding);
    e.score = alpha * e.s_sum + (1.0 - alpha) * e.s_ctx;
    ranked.push_back(e);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const ScoredEvent& a, const ScoredEvent& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.event_index < b.event_index;
                   });
  if (ranked.size() > static_cast<std::size_t>(top_k)) ranked.resize(top_k);
  return {std::move(all), std::move(ranked)};
}

std::vector<int> indices_of(const std::vector<ScoredEvent>& events) {
  std::vector<int> out;
  for (const auto& e : events) out.push_back(e.event_index);
  return out;
}

}  // namespace

TEST_CASE("boundary_scan ranks by cosine with index tie-break") {
  const MemoryRepository repo = testutil::make_repository(10, "scan");
  const VectorIndex index = index_repository(repo);

  SECTION("query equal to a stored boundary ranks it first at ~1.0") {
    const EmbeddingVector q = repo.units[2].boundary_embedding;
    const AnchorSet anchors = boundary_scan(q, repo, index, 4);
    REQUIRE(anchors.anchors.size() == 4);
    CHECK(anchors.anchors[0].event_index == 3);
    CHECK(anchors.anchors[0].sim_bnd == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("k >= n returns all events") {
    const EmbeddingVector q = MockProvider::hash_embedding("q", 11, 16);
    CHECK(boundary_scan(q, repo, index, 50).anchors.size() == 10);
  }

  SECTION("ranking equals the brute-force sort") {
    const EmbeddingVector q = MockProvider::hash_embedding("ranking probe", 11, 16);
    const AnchorSet got = boundary_scan(q, repo, index, 10);
    const OracleResult want = oracle_retrieve(q, repo, 10, 0, 0.5, 10);
    REQUIRE(got.anchors.size() == want.anchors.size());
    for (std::size_t i = 0; i < got.anchors.size(); ++i) {
      CHECK(got.anchors[i].event_index == want.anchors[i].event_index);
      CHECK(got.anchors[i].sim_bnd == want.anchors[i].sim_bnd);
    }
  }

  SECTION("empty repository is a distinct error") {
    const MemoryRepository empty;
    const VectorIndex idx = index_repository(empty);
    const EmbeddingVector q = MockProvider::hash_embedding("q", 11, 16);
    CHECK_THROWS_AS(boundary_scan(q, empty, idx, 3), EmptyRepositoryError);
  }
}

TEST_CASE("expand_intervals applies windows with the max rule") {
  SECTION("single anchor center") {
    AnchorSet a{{Anchor{5, 0.9}}};
    const CandidateEventSet c = expand_intervals(a, 3, 10);
    REQUIRE(c.ctx_scores.size() == 7);
    for (int j = 2; j <= 8; ++j) {
      REQUIRE(c.ctx_scores.count(j) == 1);
      CHECK(c.ctx_scores.at(j) == 0.9);
    }
  }

  SECTION("overlapping windows take the max covering score") {
    AnchorSet a{{Anchor{3, 0.8}, Anchor{5, 0.6}}};
    const CandidateEventSet c = expand_intervals(a, 2, 10);
    std::vector<int> keys;
    for (const auto& [j, _] : c.ctx_scores) keys.push_back(j);
    CHECK(keys == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
    CHECK(c.ctx_scores.at(4) == 0.8);  // covered by both anchors
    CHECK(c.ctx_scores.at(7) == 0.6);
    CHECK(c.ctx_scores.at(1) == 0.8);
  }

  SECTION("edge clipping") {
    AnchorSet a{{Anchor{1, 0.5}}};
    const CandidateEventSet c = expand_intervals(a, 3, 10);
    std::vector<int> keys;
    for (const auto& [j, _] : c.ctx_scores) keys.push_back(j);
    CHECK(keys == std::vector<int>{1, 2, 3, 4});
  }

  SECTION("w = 0 keeps only the anchors themselves") {
    AnchorSet a{{Anchor{4, 0.7}, Anchor{9, 0.2}}};
    const CandidateEventSet c = expand_intervals(a, 0, 10);
    CHECK(c.ctx_scores.size() == 2);
  }
}

TEST_CASE("rerank_fuse combines similarity and context scores") {
  SECTION("hand-evaluated fusion at alpha = 0.70") {
    // craft unit 1 so that s_sum = 0.8 exactly: q = [1,0], e_sum = [0.8,0.6]
    MemoryRepository repo = testutil::make_repository(1, "fuse");
    repo.units[0].summary_embedding = EmbeddingVector{{0.8f, 0.6f}};
    repo.units[0].boundary_embedding = EmbeddingVector{{1.0f, 0.0f}};
    const VectorIndex index = index_repository(repo);
    const EmbeddingVector q{{1.0f, 0.0f}};

    CandidateEventSet candidates;
    candidates.ctx_scores[1] = 0.5;
    const RetrievalResult r = rerank_fuse("q", q, candidates, repo, index, 0.70, 5);
    REQUIRE(r.selected.size() == 1);
    CHECK(r.selected[0].s_sum == Catch::Approx(0.8).margin(1e-6));
    CHECK(r.selected[0].score == Catch::Approx(0.71).margin(1e-6));
  }

  SECTION("alpha = 1 reduces to pure summary ranking") {
    const MemoryRepository repo = testutil::make_repository(8, "alpha1");
    const VectorIndex index = index_repository(repo);
    const EmbeddingVector q = MockProvider::hash_embedding("probe", 11, 16);
    CandidateEventSet candidates;
    for (int j = 1; j <= 8; ++j) candidates.ctx_scores[j] = 0.1 * j;

    const RetrievalResult r = rerank_fuse("q", q, candidates, repo, index, 1.0, 8);
    std::vector<double> sums;
    for (const auto& e : r.candidates) sums.push_back(e.s_sum);
    CHECK(std::is_sorted(sums.rbegin(), sums.rend()));
  }

  SECTION("alpha = 0 reduces to pure context ranking") {
    const MemoryRepository repo = testutil::make_repository(8, "alpha0");
    const VectorIndex index = index_repository(repo);
    const EmbeddingVector q = MockProvider::hash_embedding("probe", 11, 16);
    CandidateEventSet candidates;
    for (int j = 1; j <= 8; ++j) candidates.ctx_scores[j] = 0.05 * ((j * 3) % 7);

    const RetrievalResult r = rerank_fuse("q", q, candidates, repo, index, 0.0, 8);
    std::vector<double> ctxs;
    for (const auto& e : r.candidates) ctxs.push_back(e.s_ctx);
    CHECK(std::is_sorted(ctxs.rbegin(), ctxs.rend()));
  }

  SECTION("exact ties resolve to the earlier event") {
    MemoryRepository repo = testutil::make_repository(8, "ties");
    repo.units[6] = repo.units[3];  // duplicate unit 4's embeddings at index 7
    repo.units[6].event_index = 7;
    const VectorIndex index = index_repository(repo);
    const EmbeddingVector q = MockProvider::hash_embedding("tie probe", 11, 16);
    CandidateEventSet candidates;
    candidates.ctx_scores[4] = 0.25;
    candidates.ctx_scores[7] = 0.25;

    const RetrievalResult r = rerank_fuse("q", q, candidates, repo, index, 0.7, 2);
    REQUIRE(r.selected.size() == 2);
    CHECK(r.selected[0].score == r.selected[1].score);
    CHECK(r.selected[0].event_index == 4);
    CHECK(r.selected[1].event_index == 7);
  }
}

TEST_CASE("retrieve composes the stages") {
  RetrievalParams params;  // k=10, w=3, alpha=0.7, K=10

  SECTION("single-event repository always returns that event") {
    const MemoryRepository repo = testutil::make_repository(1, "single");
    const VectorIndex index = index_repository(repo);
    MockProvider provider({}, 11, 16);
    const RetrievalResult r = retrieve("anything", repo, index, params, provider);
    REQUIRE(r.selected.size() == 1);
    CHECK(r.selected[0].event_index == 1);
  }

  SECTION("wide window and K match the global fused oracle") {
    const MemoryRepository repo = testutil::make_repository(12, "global");
    const VectorIndex index = index_repository(repo);
    MockProvider provider({}, 11, 16);
    RetrievalParams wide = params;
    wide.window_w = 12;
    wide.final_k = 12;
    wide.anchor_k = 12;
    const RetrievalResult r = retrieve("what happened", repo, index, wide, provider);

    const EmbeddingVector q = provider.embed({"what happened"})[0];
    const OracleResult want = oracle_retrieve(q, repo, 12, 12, 0.7, 12);
    CHECK(indices_of(r.selected) == indices_of(want.ranked));
  }

  SECTION("repeated calls are identical") {
    const MemoryRepository repo = testutil::make_repository(9, "repeat");
    const VectorIndex index = index_repository(repo);
    MockProvider provider({}, 11, 16);
    const RetrievalResult a = retrieve("q text", repo, index, params, provider);
    const RetrievalResult b = retrieve("q text", repo, index, params, provider);
    CHECK(a.to_json().dump() == b.to_json().dump());
  }

  SECTION("every selected event lies within w of some anchor") {
    std::mt19937 rng(99);
    for (int trial = 0; trial < 10; ++trial) {
      const int n = std::uniform_int_distribution<int>(3, 18)(rng);
      const MemoryRepository repo =
          testutil::make_repository(n, "filter" + std::to_string(trial));
      const VectorIndex index = index_repository(repo);
      MockProvider provider({}, 11, 16);
      RetrievalParams p;
      p.anchor_k = 3;
      p.window_w = 2;
      const RetrievalResult r = retrieve("probe", repo, index, p, provider);
      for (const ScoredEvent& e : r.selected) {
        bool covered = false;
        for (const Anchor& a : r.anchors)
          covered |= std::abs(e.event_index - a.event_index) <= p.window_w;
        CHECK(covered);
      }
    }
  }

  SECTION("scaling embeddings before normalization leaves rankings unchanged") {
    MemoryRepository repo = testutil::make_repository(10, "scale");
    MemoryRepository scaled = repo;
    for (MemoryUnit& u : scaled.units) {
      for (float& x : u.boundary_embedding.values) x *= 7.5f;
      for (float& x : u.summary_embedding.values) x *= 7.5f;
      l2_normalize(u.boundary_embedding);
      l2_normalize(u.summary_embedding);
    }
    const VectorIndex i1 = index_repository(repo);
    const VectorIndex i2 = index_repository(scaled);
    MockProvider provider({}, 11, 16);
    const RetrievalResult r1 = retrieve("stable probe", repo, i1, params, provider);
    const RetrievalResult r2 = retrieve("stable probe", scaled, i2, params, provider);
    CHECK(indices_of(r1.selected) == indices_of(r2.selected));
  }

  SECTION("empty repository error is distinct") {
    const MemoryRepository empty;
    const VectorIndex index = index_repository(empty);
    MockProvider provider({}, 11, 16);
    CHECK_THROWS_AS(retrieve("q", empty, index, params, provider),
                    EmptyRepositoryError);
  }
}

TEST_CASE("compose_answer grounds the prompt in chronological contexts") {
  const MemoryRepository repo = testutil::make_repository(6, "answer");
  const VectorIndex index = index_repository(repo);
  RetrievalParams params;
  params.final_k = 3;
  MockProvider retrieval_provider({}, 11, 16);
  const RetrievalResult result =
      retrieve("what was turn four about?", repo, index, params, retrieval_provider);
  REQUIRE(result.selected.size() == 3);

  SECTION("scripted answer is returned verbatim") {
    const ChatRequest expected = prompts::answer_request(
        prompts::builtin(), "what was turn four about?", result.context_text);
    MockProvider provider({{expected.user_prompt, "It was about turn four."}}, 11, 16);
    CHECK(compose_answer("what was turn four about?", result, provider) ==
          "It was about turn four.");
  }

  SECTION("prompt carries all K raw contexts in chronological order") {
    MockProvider provider({}, 11, 16);
    try {
      compose_answer("what was turn four about?", result, provider);
    } catch (const Error&) {
    }
    REQUIRE(provider.chat_log().size() == 1);
    const std::string& prompt = provider.chat_log()[0].user_prompt;
    std::vector<int> sorted_events = indices_of(result.selected);
    std::sort(sorted_events.begin(), sorted_events.end());
    std::size_t cursor = 0;
    for (int event : sorted_events) {
      const std::string marker = "[Event " + std::to_string(event) + " | ";
      const std::size_t at = prompt.find(marker, cursor);
      REQUIRE(at != std::string::npos);
      cursor = at;
      const MemoryUnit& unit = repo.units[event - 1];
      for (const DialogueTurn& t : unit.raw_context)
        CHECK(prompt.find(t.text, at) != std::string::npos);
    }
  }

  SECTION("empty result errors before any chat call") {
    RetrievalResult empty;
    MockProvider provider({}, 11, 16);
    CHECK_THROWS_AS(compose_answer("q", empty, provider), InvariantError);
    CHECK(provider.chat_log().empty());
  }
}

TEST_CASE("increasing s_sum never lowers an event's rank") {
  // monotonicity: lift one candidate's summary similarity, all else fixed
  MemoryRepository repo = testutil::make_repository(6, "mono");
  const EmbeddingVector q = MockProvider::hash_embedding("mono probe", 11, 16);
  CandidateEventSet candidates;
  for (int j = 1; j <= 6; ++j) candidates.ctx_scores[j] = 0.3;

  const VectorIndex before = index_repository(repo);
  const RetrievalResult base = rerank_fuse("q", q, candidates, repo, before, 0.7, 6);
  const auto rank_of = [](const RetrievalResult& r, int event) {
    for (std::size_t i = 0; i < r.candidates.size(); ++i)
      if (r.candidates[i].event_index == event) return i;
    return r.candidates.size();
  };

  repo.units[4].summary_embedding = q;  // event 5 now matches the query exactly
  const VectorIndex after = index_repository(repo);
  const RetrievalResult lifted = rerank_fuse("q", q, candidates, repo, after, 0.7, 6);
  CHECK(rank_of(lifted, 5) <= rank_of(base, 5));
  CHECK(lifted.candidates[0].event_index == 5);
}
