#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "support.hpp"

namespace {

std::vector<std::int64_t> valid_positions(const cp::ShardPlan& plan, int rank) {
  std::vector<std::int64_t> out;
  for (const auto& s : plan.rank_slots(rank)) {
    if (s.valid) out.push_back(s.pos);
  }
  return out;
}

}  // namespace

TEST(PlanFullPrefill, SixteenTokensTwoRanks) {
  const auto plan = cp::plan_full_prefill({{0, 0, 16}}, 2);
  EXPECT_EQ(plan.sequences()[0].chunk_len, 4);
  EXPECT_EQ(valid_positions(plan, 0), (std::vector<std::int64_t>{0, 1, 2, 3, 12, 13, 14, 15}));
  EXPECT_EQ(valid_positions(plan, 1), (std::vector<std::int64_t>{4, 5, 6, 7, 8, 9, 10, 11}));
  EXPECT_EQ(plan.chunks_of(0), (std::pair<int, int>{0, 3}));
  EXPECT_EQ(plan.chunks_of(1), (std::pair<int, int>{1, 2}));
  EXPECT_EQ(plan.query_len(), 8);
}

TEST(PlanFullPrefill, SingleRankHoldsEverything) {
  const auto plan = cp::plan_full_prefill({{0, 0, 8}}, 1);
  EXPECT_EQ(valid_positions(plan, 0), (std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(plan.rank_slots(0).size(), 8u);
}

TEST(PlanFullPrefill, ThirteenTokensPadsTheLastChunk) {
  const auto plan = cp::plan_full_prefill({{0, 0, 13}}, 2);
  const auto& s = plan.sequences()[0];
  EXPECT_EQ(s.chunk_len, 4);
  EXPECT_EQ(s.chunks[3].padding(), 3);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(s.chunks[static_cast<std::size_t>(c)].padding(), 0);
  const std::multiset<std::int64_t> counts{plan.valid_new_tokens(0), plan.valid_new_tokens(1)};
  EXPECT_EQ(counts, (std::multiset<std::int64_t>{8, 5}));
  EXPECT_EQ(plan.rank_slots(0).size(), plan.rank_slots(1).size());
}

TEST(PlanFullPrefill, RejectsBadInput) {
  EXPECT_THROW(cp::plan_full_prefill({{0, 0, 0}}, 2), std::invalid_argument);
  EXPECT_THROW(cp::plan_full_prefill({{0, 0, 4}}, 0), std::invalid_argument);
  EXPECT_THROW(cp::plan_full_prefill({{0, 0, 4}, {0, 0, 4}}, 2), std::invalid_argument);
  EXPECT_THROW(cp::plan_full_prefill({{0, 3, 4}}, 2), std::invalid_argument);
  EXPECT_THROW(cp::plan_full_prefill({}, 2), std::invalid_argument);
}

TEST(PlanPartialPrefill, OffsetsNewChunksByCachedLength) {
  const auto plan = cp::plan_partial_prefill({{0, 100, 8}}, 2, {{50, 50}});
  EXPECT_EQ(valid_positions(plan, 0), (std::vector<std::int64_t>{100, 101, 106, 107}));
  EXPECT_EQ(valid_positions(plan, 1), (std::vector<std::int64_t>{102, 103, 104, 105}));
  EXPECT_EQ(plan.total_cached_tokens(), 100);
  EXPECT_EQ(plan.sequences()[0].cached_per_rank, (std::vector<std::int64_t>{50, 50}));
}

TEST(PlanPartialPrefill, SequencesAreChunkedIndependently) {
  const auto plan = cp::plan_partial_prefill({{0, 10, 8}, {1, 6, 4}}, 2, {{5, 5}, {6, 0}});
  EXPECT_EQ(plan.valid_new_tokens(0), 4 + 2);
  EXPECT_EQ(plan.valid_new_tokens(1), 4 + 2);
  EXPECT_EQ(plan.total_new_tokens(), 12);
  EXPECT_EQ(plan.query_len(), 4 + 2);
}

TEST(PlanPartialPrefill, RejectsBadInput) {
  EXPECT_THROW(cp::plan_partial_prefill({{0, 10, 0}}, 2, {{5, 5}}), std::invalid_argument);
  EXPECT_THROW(cp::plan_partial_prefill({{0, 10, 4}}, 2, {{5, 4}}), std::invalid_argument);
  EXPECT_THROW(cp::plan_partial_prefill({{0, 10, 4}}, 2, {{10}}), std::invalid_argument);
  EXPECT_THROW(cp::plan_partial_prefill({{0, 10, 4}}, 2, {}), std::invalid_argument);
  EXPECT_THROW(cp::plan_partial_prefill({{0, 10, 4}}, 2, {{11, -1}}), std::invalid_argument);
}

TEST(PlanFullPrefill, EveryPositionAssignedExactlyOnce) {
  for (int n : {1, 2, 3, 4, 5, 8}) {
    for (std::int64_t t : {1, 2, 7, 15, 16, 17, 31, 100, 257}) {
      const auto plan = cp::plan_full_prefill({{3, 0, t}}, n);
      std::vector<int> seen(static_cast<std::size_t>(t), 0);
      std::size_t width = plan.rank_slots(0).size();
      for (int r = 0; r < n; ++r) {
        const auto slots = plan.rank_slots(r);
        EXPECT_EQ(slots.size(), width);
        for (const auto& s : slots) {
          if (!s.valid) continue;
          EXPECT_EQ(s.seq, 3);
          ++seen[static_cast<std::size_t>(s.pos)];
        }
      }
      for (int c : seen) EXPECT_EQ(c, 1) << "n=" << n << " t=" << t;
    }
  }
}

TEST(PlanFullPrefill, CausalPairCountsBalancedWhenDivisible) {
  for (int n : {1, 2, 4}) {
    for (std::int64_t t : {16, 64, 256}) {
      const auto plan = cp::plan_full_prefill({{0, 0, t}}, n);
      const std::int64_t expected = (t * t + t) / (2 * n);
      for (int r = 0; r < n; ++r) EXPECT_EQ(cp_test::causal_pairs(plan, r), expected) << "n=" << n << " t=" << t;
    }
  }
}

TEST(PlanFullPrefill, ContiguousShardingIsNotBalanced) {
  // Control for the balance test: rank 0 of a contiguous split owns far
  // fewer causal pairs than the last rank.
  const std::int64_t t = 64;
  const int n = 4;
  std::vector<std::int64_t> pairs(n, 0);
  for (std::int64_t q = 0; q < t; ++q) pairs[static_cast<std::size_t>(q / (t / n))] += q + 1;
  EXPECT_LT(pairs.front() * 4, pairs.back());
}

TEST(PlanDecode, RoundRobinWithPerIterationOffset) {
  const std::vector<std::int64_t> batch{0, 1, 2, 3};
  auto ids = [](const cp::DecodeAssignment& a, int r) {
    std::vector<std::int64_t> out;
    for (const auto& s : a.per_rank[static_cast<std::size_t>(r)]) out.push_back(s.seq_id);
    return out;
  };
  const auto a0 = cp::plan_decode(batch, 2, 0);
  EXPECT_EQ(ids(a0, 0), (std::vector<std::int64_t>{0, 2}));
  EXPECT_EQ(ids(a0, 1), (std::vector<std::int64_t>{1, 3}));
  const auto a1 = cp::plan_decode(batch, 2, 1);
  EXPECT_EQ(ids(a1, 0), (std::vector<std::int64_t>{1, 3}));
  EXPECT_EQ(ids(a1, 1), (std::vector<std::int64_t>{0, 2}));
  EXPECT_EQ(a1.padded_queries(), 2u);
  EXPECT_EQ(cp::plan_decode({5, 6, 7}, 2, 0).padded_queries(), 2u);
  EXPECT_THROW(cp::plan_decode({}, 2, 0), std::invalid_argument);
  EXPECT_THROW(cp::plan_decode({1}, 0, 0), std::invalid_argument);
}

TEST(PlanDecode, AppendedCountsStayWithinOne) {
  for (int n = 1; n <= 8; ++n) {
    for (std::size_t b = 1; b <= 8; ++b) {
      std::vector<std::int64_t> batch;
      for (std::size_t s = 0; s < b; ++s) batch.push_back(static_cast<std::int64_t>(10 + s));
      std::map<std::int64_t, std::vector<int>> counts;
      for (auto id : batch) counts[id].assign(static_cast<std::size_t>(n), 0);
      for (std::uint64_t it = 0; it < 32; ++it) {
        const auto a = cp::plan_decode(batch, n, it);
        for (int r = 0; r < n; ++r) {
          for (const auto& s : a.per_rank[static_cast<std::size_t>(r)]) ++counts[s.seq_id][static_cast<std::size_t>(r)];
        }
        for (const auto& [id, c] : counts) {
          const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
          EXPECT_LE(*hi - *lo, 1) << "n=" << n << " b=" << b << " it=" << it;
        }
      }
    }
  }
}

TEST(ShardPlan, JsonCarriesChunksAndAssignment) {
  const auto j = cp::to_json(cp::plan_full_prefill({{0, 0, 13}}, 2));
  EXPECT_EQ(j["n_ranks"], 2);
  EXPECT_EQ(j["sequences"][0]["chunks"].size(), 4u);
  EXPECT_EQ(j["sequences"][0]["chunks"][3]["padded_len"], 4);
  EXPECT_EQ(j["sequences"][0]["chunks"][3]["rank"], 0);
}
