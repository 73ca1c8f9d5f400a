#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

namespace {

std::vector<std::int64_t> positions(const cp::Embeddings& b) {
  std::vector<std::int64_t> out;
  for (const auto& t : b.tags()) out.push_back(t.valid ? t.pos : -1);
  return out;
}

}  // namespace

TEST(RankKvCache, AppendReportsLength) {
  cp::RankKvCache c(2, 4);
  cp::SplitMix64 rng(1);
  EXPECT_EQ(c.cached_len(0), 0);
  EXPECT_FALSE(c.contains(0));
  EXPECT_EQ(c.append(0, cp_test::random_block(rng, 2, 4, 0, 0, 4), cp_test::random_block(rng, 2, 4, 0, 0, 4)), 4);
  EXPECT_EQ(c.cached_len(0), 4);
  EXPECT_TRUE(c.contains(0));
}

TEST(RankKvCache, InterleavedChunksComeBackSorted) {
  cp::RankKvCache c(1, 2);
  cp::SplitMix64 rng(2);
  c.append(7, cp_test::random_block(rng, 1, 2, 7, 12, 4), cp_test::random_block(rng, 1, 2, 7, 12, 4));
  c.append(7, cp_test::random_block(rng, 1, 2, 7, 0, 4), cp_test::random_block(rng, 1, 2, 7, 0, 4));
  const auto [k, v] = c.snapshot(7);
  EXPECT_EQ(positions(k), (std::vector<std::int64_t>{0, 1, 2, 3, 12, 13, 14, 15}));
  EXPECT_EQ(positions(v), positions(k));
}

TEST(RankKvCache, RoundTripPreservesData) {
  cp::RankKvCache c(2, 3);
  cp::SplitMix64 rng(3);
  const auto k = cp_test::random_block(rng, 2, 3, 1, 0, 6);
  const auto v = cp_test::random_block(rng, 2, 3, 1, 0, 6);
  c.append(1, k.slice(3, 6), v.slice(3, 6));
  c.append(1, k.slice(0, 3), v.slice(0, 3));
  const auto [sk, sv] = c.snapshot_padded(1, 6);
  ASSERT_EQ(sk.num_tokens(), 6u);
  for (std::size_t i = 0; i < k.data().size(); ++i) {
    EXPECT_EQ(sk.data()[i], k.data()[i]);
    EXPECT_EQ(sv.data()[i], v.data()[i]);
  }
}

TEST(RankKvCache, SnapshotPadding) {
  cp::RankKvCache c(1, 2);
  cp::SplitMix64 rng(4);
  c.append(0, cp_test::random_block(rng, 1, 2, 0, 0, 10), cp_test::random_block(rng, 1, 2, 0, 0, 10));
  const auto [k, v] = c.snapshot_padded(0, 16);
  EXPECT_EQ(k.num_tokens(), 16u);
  EXPECT_EQ(k.num_valid(), 10u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(k.tag(i).valid, i < 10);
  EXPECT_EQ(c.snapshot_padded(0, 10).first.num_tokens(), 10u);
  EXPECT_THROW(c.snapshot_padded(0, 9), std::invalid_argument);
  EXPECT_EQ(c.snapshot_padded(42, 3).first.num_valid(), 0u);
}

TEST(RankKvCache, RejectsDuplicatesPaddingAndForeignTokens) {
  cp::RankKvCache c(1, 2);
  cp::SplitMix64 rng(5);
  const auto k = cp_test::random_block(rng, 1, 2, 0, 0, 4);
  const auto v = cp_test::random_block(rng, 1, 2, 0, 0, 4);
  c.append(0, k, v);
  EXPECT_THROW(c.append(0, k.slice(2, 3), v.slice(2, 3)), std::invalid_argument);
  EXPECT_THROW(c.append(1, k, v), std::invalid_argument);
  auto padded = cp_test::random_block(rng, 1, 2, 0, 8, 1);
  padded.push_padding(1);
  EXPECT_THROW(c.append(0, padded, padded), std::invalid_argument);
  EXPECT_THROW(c.append(0, cp_test::random_block(rng, 2, 2, 0, 9, 1), cp_test::random_block(rng, 2, 2, 0, 9, 1)),
               std::invalid_argument);
  EXPECT_EQ(c.cached_len(0), 4);
}

TEST(RankKvCache, PrefillThenDecodeSumsAcrossRanks) {
  cp::Scenario sc;
  sc.n_ranks = 3;
  sc.strategy = cp::Strategy::pass_kv;
  sc.turns = {{cp::TurnKind::full_prefill, {8}, 1}, {cp::TurnKind::decode, {}, 3}};
  const auto tr = cp::run_turns(sc);
  ASSERT_EQ(tr.cached_len.size(), 1u);
  EXPECT_EQ(std::accumulate(tr.cached_len[0].begin(), tr.cached_len[0].end(), std::int64_t{0}), 11);
}

TEST(RankKvCache, PassKvMessageLengthIsMaxCachedPlusCeilNew) {
  // P = (10, 12) on two ranks, T = 8: every KV message carries 12 + 4 rows.
  cp_test::PrefillCase pc;
  pc.cfg = {2, 1, 4, 0.0};
  pc.n = 2;
  pc.seqs = {{22, 8}};
  pc.layout = {{10, 12}};
  const auto res = pc.run(cp::Protocol::pass_kv);
  const std::uint64_t row_bytes = 2 * 1 * 4 * sizeof(float);
  for (const auto& r : res.trace.ring) {
    if (r.kind == cp::MessageKind::kv) {
      EXPECT_EQ(r.bytes, 16 * row_bytes);
    }
  }
  EXPECT_LT(pc.max_error(res), 1e-9);
}
