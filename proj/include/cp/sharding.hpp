#pragma once

// Load-balanced context-parallel shard plans.
//
// Each sequence's new tokens are split into 2N equal (padded) chunks
// C_0..C_{2N-1}; rank i owns (C_i, C_{2N-1-i}). Pairing an early chunk with
// a late one equalizes causal attention work across ranks.

#include <algorithm>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace cp {

struct SequenceSpec {
  std::int64_t seq_id = 0;
  std::int64_t cached_len = 0;
  std::int64_t new_len = 0;
};

/// New-token range [begin, end) in global positions, padded to padded_len slots.
struct ChunkRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t padded_len = 0;
  int rank = 0;

  std::int64_t valid_len() const { return end - begin; }
  std::int64_t padding() const { return padded_len - valid_len(); }
};

struct SequenceShards {
  SequenceSpec spec;
  std::int64_t chunk_len = 0;
  std::vector<ChunkRange> chunks;            // 2N entries, ascending positions
  std::vector<std::int64_t> new_per_rank;    // T^i_j (valid tokens)
  std::vector<std::int64_t> cached_per_rank; // P^i_j
};

/// One query slot in a rank's local (padded) layout.
struct TokenSlot {
  std::int64_t seq = -1;
  std::int64_t pos = -1;
  bool valid = false;
};

class ShardPlan {
 public:
  ShardPlan(int n_ranks, std::vector<SequenceShards> sequences)
      : n_ranks_(n_ranks), sequences_(std::move(sequences)) {}

  int n_ranks() const { return n_ranks_; }
  const std::vector<SequenceShards>& sequences() const { return sequences_; }

  /// Chunk indices owned by `rank`: (rank, 2N-1-rank).
  std::pair<int, int> chunks_of(int rank) const { return {rank, 2 * n_ranks_ - 1 - rank}; }

  /// Local query layout of `rank`: for each sequence in batch order, the
  /// slots of C_rank followed by C_{2N-1-rank}, padding trailing each chunk.
  std::vector<TokenSlot> rank_slots(int rank) const {
    check_rank(rank);
    std::vector<TokenSlot> slots;
    const auto [lo, hi] = chunks_of(rank);
    for (const auto& s : sequences_) {
      for (int c : {lo, hi}) {
        const ChunkRange& ch = s.chunks[static_cast<std::size_t>(c)];
        for (std::int64_t p = ch.begin; p < ch.end; ++p) slots.push_back({s.spec.seq_id, p, true});
        for (std::int64_t k = 0; k < ch.padding(); ++k) slots.push_back({});
      }
    }
    return slots;
  }

  /// Padded query length per rank; identical for every rank.
  std::int64_t query_len() const {
    std::int64_t n = 0;
    for (const auto& s : sequences_) n += 2 * s.chunk_len;
    return n;
  }

  std::int64_t valid_new_tokens(int rank) const {
    check_rank(rank);
    std::int64_t n = 0;
    for (const auto& s : sequences_) n += s.new_per_rank[static_cast<std::size_t>(rank)];
    return n;
  }

  std::int64_t total_new_tokens() const {
    std::int64_t n = 0;
    for (const auto& s : sequences_) n += s.spec.new_len;
    return n;
  }

  std::int64_t total_cached_tokens() const {
    std::int64_t n = 0;
    for (const auto& s : sequences_) n += s.spec.cached_len;
    return n;
  }

 private:
  void check_rank(int rank) const {
    if (rank < 0 || rank >= n_ranks_) throw std::out_of_range("ShardPlan: rank " + std::to_string(rank));
  }

  int n_ranks_;
  std::vector<SequenceShards> sequences_;
};

namespace detail {

inline SequenceShards shard_sequence(const SequenceSpec& spec, int n_ranks, std::vector<std::int64_t> cached_per_rank) {
  if (spec.new_len < 1) {
    throw std::invalid_argument("sequence " + std::to_string(spec.seq_id) +
                                " has no new tokens; decode batches use plan_decode");
  }
  const std::int64_t n_chunks = 2 * static_cast<std::int64_t>(n_ranks);
  const std::int64_t chunk_len = (spec.new_len + n_chunks - 1) / n_chunks;
  SequenceShards out{spec, chunk_len, {}, std::vector<std::int64_t>(static_cast<std::size_t>(n_ranks), 0),
                     std::move(cached_per_rank)};
  out.chunks.reserve(static_cast<std::size_t>(n_chunks));
  for (std::int64_t c = 0; c < n_chunks; ++c) {
    const std::int64_t b = std::min(c * chunk_len, spec.new_len);
    const std::int64_t e = std::min((c + 1) * chunk_len, spec.new_len);
    const int rank = c < n_ranks ? static_cast<int>(c) : static_cast<int>(n_chunks - 1 - c);
    out.chunks.push_back({spec.cached_len + b, spec.cached_len + e, chunk_len, rank});
    out.new_per_rank[static_cast<std::size_t>(rank)] += e - b;
  }
  return out;
}

inline void check_batch(const std::vector<SequenceSpec>& seqs, int n_ranks) {
  if (n_ranks < 1) throw std::invalid_argument("n_ranks must be >= 1");
  if (seqs.empty()) throw std::invalid_argument("empty sequence list");
  std::set<std::int64_t> ids;
  for (const auto& s : seqs) {
    if (s.cached_len < 0 || s.new_len < 0) throw std::invalid_argument("negative sequence length");
    if (!ids.insert(s.seq_id).second) {
      throw std::invalid_argument("duplicate sequence id " + std::to_string(s.seq_id));
    }
  }
}

}  // namespace detail

inline ShardPlan plan_full_prefill(const std::vector<SequenceSpec>& seqs, int n_ranks) {
  detail::check_batch(seqs, n_ranks);
  std::vector<SequenceShards> out;
  for (const auto& s : seqs) {
    if (s.cached_len != 0) {
      throw std::invalid_argument("plan_full_prefill: sequence " + std::to_string(s.seq_id) + " has cached tokens");
    }
    out.push_back(detail::shard_sequence(s, n_ranks, std::vector<std::int64_t>(static_cast<std::size_t>(n_ranks), 0)));
  }
  return ShardPlan(n_ranks, std::move(out));
}

/// cached_layout[i][j] = cached tokens of seqs[i] resident on rank j.
inline ShardPlan plan_partial_prefill(const std::vector<SequenceSpec>& seqs, int n_ranks,
                                      const std::vector<std::vector<std::int64_t>>& cached_layout) {
  detail::check_batch(seqs, n_ranks);
  if (cached_layout.size() != seqs.size()) {
    throw std::invalid_argument("plan_partial_prefill: cached_layout has " + std::to_string(cached_layout.size()) +
                                " rows for " + std::to_string(seqs.size()) + " sequences");
  }
  std::vector<SequenceShards> out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& row = cached_layout[i];
    if (row.size() != static_cast<std::size_t>(n_ranks)) {
      throw std::invalid_argument("plan_partial_prefill: cached_layout row width != n_ranks");
    }
    std::int64_t sum = 0;
    for (auto c : row) {
      if (c < 0) throw std::invalid_argument("plan_partial_prefill: negative cached count");
      sum += c;
    }
    if (sum != seqs[i].cached_len) {
      throw std::invalid_argument("plan_partial_prefill: cached_layout for sequence " + std::to_string(seqs[i].seq_id) +
                                  " sums to " + std::to_string(sum) + ", expected " +
                                  std::to_string(seqs[i].cached_len));
    }
    out.push_back(detail::shard_sequence(seqs[i], n_ranks, row));
  }
  return ShardPlan(n_ranks, std::move(out));
}

struct DecodeSlot {
  std::int64_t seq_id = 0;
  std::size_t slot = 0;  // index in the decode batch

  friend bool operator==(const DecodeSlot&, const DecodeSlot&) = default;
};

struct DecodeAssignment {
  int n_ranks = 1;
  std::size_t batch_size = 0;
  std::vector<std::vector<DecodeSlot>> per_rank;

  /// Query rows per rank after padding so every rank sends equal messages.
  std::size_t padded_queries() const { return (batch_size + static_cast<std::size_t>(n_ranks) - 1) / static_cast<std::size_t>(n_ranks); }
};

/// Round-robin decode sharding, shifted by one rank per iteration.
inline DecodeAssignment plan_decode(const std::vector<std::int64_t>& batch, int n_ranks, std::uint64_t iteration) {
  if (n_ranks < 1) throw std::invalid_argument("n_ranks must be >= 1");
  if (batch.empty()) throw std::invalid_argument("plan_decode: empty batch");
  DecodeAssignment a{n_ranks, batch.size(), std::vector<std::vector<DecodeSlot>>(static_cast<std::size_t>(n_ranks))};
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto rank = static_cast<std::size_t>((s + iteration) % static_cast<std::uint64_t>(n_ranks));
    a.per_rank[rank].push_back({batch[s], s});
  }
  return a;
}

inline nlohmann::json to_json(const ShardPlan& plan) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : plan.sequences()) {
    nlohmann::json chunks = nlohmann::json::array();
    for (std::size_t c = 0; c < s.chunks.size(); ++c) {
      const auto& ch = s.chunks[c];
      chunks.push_back({{"index", c}, {"begin", ch.begin}, {"end", ch.end}, {"padded_len", ch.padded_len}, {"rank", ch.rank}});
    }
    seqs.push_back({{"seq_id", s.spec.seq_id},
                    {"cached_len", s.spec.cached_len},
                    {"new_len", s.spec.new_len},
                    {"chunk_len", s.chunk_len},
                    {"chunks", chunks},
                    {"new_per_rank", s.new_per_rank},
                    {"cached_per_rank", s.cached_per_rank}});
  }
  nlohmann::json assignment = nlohmann::json::array();
  for (int r = 0; r < plan.n_ranks(); ++r) {
    const auto [lo, hi] = plan.chunks_of(r);
    assignment.push_back({{"rank", r}, {"chunks", {lo, hi}}, {"query_len", plan.query_len()}});
  }
  return {{"n_ranks", plan.n_ranks()}, {"sequences", seqs}, {"assignment", assignment}};
}

}  // namespace cp
