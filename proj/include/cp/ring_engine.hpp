#pragma once

// Ring attention protocols over N simulated ranks:
//   ring_pass_kv_prefill  - KV blocks circulate, queries stay (fused varseq).
//   ring_pass_q_prefill   - queries circulate, KV stays; all-to-all returns
//                           scattered partials to their query owners.
//   ring_pass_q_decode    - batched one-token decode with round-robin owners.
// All three merge partials in ascending KV-source rank order, so pass-KV and
// pass-Q produce bit-identical outputs on identical inputs.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cp/kv_cache.hpp"
#include "cp/ring.hpp"
#include "cp/sharding.hpp"
#include "cp/tensor.hpp"

namespace cp {

struct RingOptions {
  Executor executor = Executor::round_based;
  /// Negative-control hook: pair each partial output with the lse of the
  /// next source before merging.
  bool rotate_merge_weights = false;
};

/// New-token embeddings of one rank, rows in ShardPlan::rank_slots order.
struct PrefillInputs {
  Embeddings q;
  Embeddings k;
  Embeddings v;
};

/// One decode token (a single row each) for one batch slot.
struct DecodeToken {
  Embeddings q;
  Embeddings k;
  Embeddings v;
};

struct RingResult {
  std::vector<PartialAttention> outputs;  // per rank, rows aligned with its queries
  StepTrace trace;
};

namespace detail {

struct KvBlock {
  int source = 0;
  Embeddings keys;
  Embeddings values;
};

struct QueryBlock {
  int source = 0;
  Embeddings q;
  std::vector<std::int64_t> bids;  // per row; -1 for padding
};

inline std::uint64_t wire_bytes(const KvBlock& b) { return b.keys.byte_size() + b.values.byte_size(); }
inline std::uint64_t wire_bytes(const QueryBlock& b) { return b.q.byte_size() + b.bids.size() * sizeof(std::int64_t); }
inline std::uint64_t wire_bytes(const PartialAttention& p) { return p.byte_size(); }

inline void check_layouts(const GqaConfig& cfg, std::span<RankKvCache> caches, int n_ranks) {
  cfg.validate();
  if (static_cast<int>(caches.size()) != n_ranks) {
    throw std::invalid_argument("ring: expected " + std::to_string(n_ranks) + " caches, got " + std::to_string(caches.size()));
  }
  for (const auto& c : caches) {
    if (c.n_kv_heads() != cfg.n_kv_heads || c.head_dim() != cfg.head_dim) {
      throw std::invalid_argument("ring: cache head layout does not match config");
    }
  }
}

inline void check_prefill_inputs(const ShardPlan& plan, std::span<const PrefillInputs> inputs, const GqaConfig& cfg) {
  if (static_cast<int>(inputs.size()) != plan.n_ranks()) throw std::invalid_argument("ring: one input block per rank required");
  for (int r = 0; r < plan.n_ranks(); ++r) {
    const auto& in = inputs[static_cast<std::size_t>(r)];
    if (in.q.num_heads() != cfg.n_query_heads || in.q.head_dim() != cfg.head_dim ||
        in.k.num_heads() != cfg.n_kv_heads || in.k.head_dim() != cfg.head_dim || !in.k.same_layout(in.v)) {
      throw std::invalid_argument("ring: rank " + std::to_string(r) + " input layout does not match config");
    }
    const auto slots = plan.rank_slots(r);
    if (in.q.num_tokens() != slots.size() || in.k.num_tokens() != slots.size() || in.v.num_tokens() != slots.size()) {
      throw std::invalid_argument("ring: rank " + std::to_string(r) + " input length does not match shard plan");
    }
    for (std::size_t t = 0; t < slots.size(); ++t) {
      const TokenTag expect{slots[t].seq, slots[t].pos, slots[t].valid};
      const TokenTag& got = in.q.tag(t);
      const bool same = got.valid == expect.valid && (!got.valid || (got.seq == expect.seq && got.pos == expect.pos));
      if (!same || in.k.tag(t) != got || in.v.tag(t) != got) {
        throw std::invalid_argument("ring: rank " + std::to_string(r) + " row " + std::to_string(t) +
                                    " does not match the shard plan slot");
      }
    }
  }
}

/// Valid rows of `block` belonging to seq, in row order.
inline Embeddings rows_of(const Embeddings& block, std::int64_t seq) {
  Embeddings out(block.num_heads(), block.head_dim());
  for (std::size_t t = 0; t < block.num_tokens(); ++t) {
    if (block.tag(t).valid && block.tag(t).seq == seq) out.push_token(block.tag(t), block.token(t));
  }
  return out;
}

inline void append_new_kv(const ShardPlan& plan, std::span<RankKvCache> caches, std::span<const PrefillInputs> inputs) {
  for (int r = 0; r < plan.n_ranks(); ++r) {
    for (const auto& s : plan.sequences()) {
      const auto id = s.spec.seq_id;
      auto k = rows_of(inputs[static_cast<std::size_t>(r)].k, id);
      if (k.empty()) continue;
      caches[static_cast<std::size_t>(r)].append(id, k, rows_of(inputs[static_cast<std::size_t>(r)].v, id));
    }
  }
}

inline std::pair<Embeddings, Embeddings> resident_kv(const RankKvCache& cache, std::span<const std::int64_t> seqs) {
  Embeddings keys(cache.n_kv_heads(), cache.head_dim());
  Embeddings values(cache.n_kv_heads(), cache.head_dim());
  for (auto id : seqs) {
    auto [k, v] = cache.snapshot(id);
    keys.append(k);
    values.append(v);
  }
  return {std::move(keys), std::move(values)};
}

inline std::vector<std::int64_t> plan_sequence_ids(const ShardPlan& plan) {
  std::vector<std::int64_t> ids;
  for (const auto& s : plan.sequences()) ids.push_back(s.spec.seq_id);
  return ids;
}

/// Merges partials indexed by KV-source rank, ascending.
inline PartialAttention merge_by_source(std::vector<PartialAttention> parts, const RingOptions& opt) {
  if (opt.rotate_merge_weights && parts.size() > 1) {
    std::vector<std::vector<double>> lses;
    for (const auto& p : parts) lses.push_back(p.lse);
    for (std::size_t s = 0; s < parts.size(); ++s) parts[s].lse = lses[(s + 1) % parts.size()];
  }
  return merge_attention(parts);
}

/// Pass-Q tail shared by prefill and decode: scattered[k][s] holds the
/// partial for source s's queries against rank k's KV.
inline std::vector<PartialAttention> gather_and_merge(RingTopology topo,
                                                      std::vector<std::vector<PartialAttention>> scattered,
                                                      const RingOptions& opt, StepTrace& trace) {
  auto [inbox, records] = all_to_all(topo, std::move(scattered),
                                     [](const PartialAttention& p) { return wire_bytes(p); }, opt.executor);
  trace.all_to_all = std::move(records);
  std::vector<PartialAttention> out;
  out.reserve(inbox.size());
  for (auto& parts : inbox) out.push_back(merge_by_source(std::move(parts), opt));
  return out;
}

}  // namespace detail

/// Fused varseq ring pass-KV partial (or full) prefill. New-token K/V are
/// appended to the caches first; every rank then circulates its cached KV
/// padded per sequence to L^i = max_j(P^i_j + T^i_j).
inline RingResult ring_pass_kv_prefill(const ShardPlan& plan, std::span<RankKvCache> caches,
                                       std::span<const PrefillInputs> inputs, const GqaConfig& cfg,
                                       const RingOptions& opt = {}) {
  const int n = plan.n_ranks();
  detail::check_layouts(cfg, caches, n);
  detail::check_prefill_inputs(plan, inputs, cfg);
  detail::append_new_kv(plan, caches, inputs);

  std::vector<detail::KvBlock> blocks;
  for (int k = 0; k < n; ++k) {
    blocks.push_back({k, Embeddings(cfg.n_kv_heads, cfg.head_dim), Embeddings(cfg.n_kv_heads, cfg.head_dim)});
  }
  for (const auto& s : plan.sequences()) {
    std::int64_t padded_len = 0;
    for (const auto& c : caches) padded_len = std::max(padded_len, c.cached_len(s.spec.seq_id));
    for (int k = 0; k < n; ++k) {
      auto [keys, values] = caches[static_cast<std::size_t>(k)].snapshot_padded(s.spec.seq_id, padded_len);
      blocks[static_cast<std::size_t>(k)].keys.append(keys);
      blocks[static_cast<std::size_t>(k)].values.append(values);
    }
  }

  std::vector<std::vector<PartialAttention>> partials(static_cast<std::size_t>(n), std::vector<PartialAttention>(static_cast<std::size_t>(n)));
  RingResult result;
  result.trace.n_ranks = n;
  result.trace.ring = ring_rotate(
      RingTopology{n}, std::move(blocks),
      [&](int k, int, int source, const detail::KvBlock& kv) {
        auto& slot = partials[static_cast<std::size_t>(k)][static_cast<std::size_t>(source)];
        slot = gqa_attention(inputs[static_cast<std::size_t>(k)].q, kv.keys, kv.values, cfg);
        return slot.admitted_pairs;
      },
      [](const detail::KvBlock& b) { return detail::wire_bytes(b); }, MessageKind::kv, opt.executor);
  if (!result.trace.equal_message_sizes()) throw std::logic_error("ring_pass_kv_prefill: unequal KV message sizes");

  for (auto& parts : partials) result.outputs.push_back(detail::merge_by_source(std::move(parts), opt));
  return result;
}

/// Fused varseq ring pass-Q partial prefill: queries circulate, each rank
/// attends them against its resident KV, and an all-to-all returns partial
/// outputs to the query owner for merging.
inline RingResult ring_pass_q_prefill(const ShardPlan& plan, std::span<RankKvCache> caches,
                                      std::span<const PrefillInputs> inputs, const GqaConfig& cfg,
                                      const RingOptions& opt = {}) {
  const int n = plan.n_ranks();
  detail::check_layouts(cfg, caches, n);
  detail::check_prefill_inputs(plan, inputs, cfg);
  detail::append_new_kv(plan, caches, inputs);

  const auto ids = detail::plan_sequence_ids(plan);
  std::vector<std::pair<Embeddings, Embeddings>> resident;
  for (const auto& c : caches) resident.push_back(detail::resident_kv(c, ids));

  std::vector<detail::QueryBlock> blocks;
  for (int k = 0; k < n; ++k) {
    const auto& q = inputs[static_cast<std::size_t>(k)].q;
    std::vector<std::int64_t> bids;
    for (std::size_t t = 0; t < q.num_tokens(); ++t) bids.push_back(q.tag(t).valid ? q.tag(t).seq : -1);
    blocks.push_back({k, q, std::move(bids)});
  }

  // scattered[k][s]: queries of rank s against KV resident on rank k.
  std::vector<std::vector<PartialAttention>> scattered(static_cast<std::size_t>(n), std::vector<PartialAttention>(static_cast<std::size_t>(n)));
  RingResult result;
  result.trace.n_ranks = n;
  result.trace.ring = ring_rotate(
      RingTopology{n}, std::move(blocks),
      [&](int k, int, int source, const detail::QueryBlock& qb) {
        const auto& [keys, values] = resident[static_cast<std::size_t>(k)];
        auto& slot = scattered[static_cast<std::size_t>(k)][static_cast<std::size_t>(source)];
        slot = gqa_attention(qb.q, keys, values, cfg);
        return slot.admitted_pairs;
      },
      [](const detail::QueryBlock& b) { return detail::wire_bytes(b); }, MessageKind::q, opt.executor);
  if (!result.trace.equal_message_sizes()) throw std::logic_error("ring_pass_q_prefill: unequal query message sizes");

  result.outputs = detail::gather_and_merge(RingTopology{n}, std::move(scattered), opt, result.trace);
  if (!result.trace.equal_message_sizes()) throw std::logic_error("ring_pass_q_prefill: all-to-all payload mismatch");
  return result;
}

/// Batched ring pass-Q decode. tokens[s] is the new token of batch slot s;
/// its K/V are appended to the round-robin owner's cache before the ring
/// starts. Rank k's output rows follow assignment.per_rank[k], padded to
/// assignment.padded_queries().
inline RingResult ring_pass_q_decode(const DecodeAssignment& assignment, std::span<RankKvCache> caches,
                                     std::span<const DecodeToken> tokens, const GqaConfig& cfg,
                                     const RingOptions& opt = {}) {
  const int n = assignment.n_ranks;
  detail::check_layouts(cfg, caches, n);
  if (tokens.size() != assignment.batch_size) throw std::invalid_argument("ring_pass_q_decode: one token per batch slot required");

  std::vector<std::int64_t> ids;
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    const auto& tok = tokens[s];
    if (tok.q.num_tokens() != 1 || tok.k.num_tokens() != 1 || tok.v.num_tokens() != 1) {
      throw std::invalid_argument("ring_pass_q_decode: decode tokens are single rows");
    }
    if (tok.q.num_heads() != cfg.n_query_heads || tok.q.head_dim() != cfg.head_dim) {
      throw std::invalid_argument("ring_pass_q_decode: query layout does not match config");
    }
    const auto id = tok.q.tag(0).seq;
    std::int64_t history = 0;
    for (const auto& c : caches) history += c.cached_len(id);
    if (history == 0) throw std::invalid_argument("ring_pass_q_decode: unknown sequence " + std::to_string(id));
    if (tok.q.tag(0).pos != history || tok.k.tag(0) != tok.q.tag(0) || tok.v.tag(0) != tok.q.tag(0)) {
      throw std::invalid_argument("ring_pass_q_decode: token of sequence " + std::to_string(id) +
                                  " is not at the next position " + std::to_string(history));
    }
    ids.push_back(id);
  }

  const std::size_t rows = assignment.padded_queries();
  std::vector<detail::QueryBlock> blocks;
  for (int k = 0; k < n; ++k) {
    detail::QueryBlock qb{k, Embeddings(cfg.n_query_heads, cfg.head_dim), {}};
    for (const auto& slot : assignment.per_rank[static_cast<std::size_t>(k)]) {
      const auto& tok = tokens[slot.slot];
      if (tok.q.tag(0).seq != slot.seq_id) throw std::invalid_argument("ring_pass_q_decode: slot/sequence mismatch");
      caches[static_cast<std::size_t>(k)].append(slot.seq_id, tok.k, tok.v);
      qb.q.append(tok.q);
      qb.bids.push_back(slot.seq_id);
    }
    const std::size_t pad = rows - qb.q.num_tokens();
    qb.q.push_padding(pad);
    qb.bids.insert(qb.bids.end(), pad, -1);
    blocks.push_back(std::move(qb));
  }

  std::vector<std::pair<Embeddings, Embeddings>> resident;
  for (const auto& c : caches) resident.push_back(detail::resident_kv(c, ids));

  std::vector<std::vector<PartialAttention>> scattered(static_cast<std::size_t>(n), std::vector<PartialAttention>(static_cast<std::size_t>(n)));
  RingResult result;
  result.trace.n_ranks = n;
  result.trace.ring = ring_rotate(
      RingTopology{n}, std::move(blocks),
      [&](int k, int, int source, const detail::QueryBlock& qb) {
        for (std::size_t r = 0; r < qb.bids.size(); ++r) {
          const auto& tag = qb.q.tag(r);
          if (tag.valid != (qb.bids[r] >= 0) || (tag.valid && tag.seq != qb.bids[r])) {
            throw std::logic_error("ring_pass_q_decode: batch id does not match query row");
          }
        }
        // Masking by sequence id restricts each query row to KV_k[bid].
        const auto& [keys, values] = resident[static_cast<std::size_t>(k)];
        auto& slot = scattered[static_cast<std::size_t>(k)][static_cast<std::size_t>(source)];
        slot = gqa_attention(qb.q, keys, values, cfg);
        return slot.admitted_pairs;
      },
      [](const detail::QueryBlock& b) { return detail::wire_bytes(b); }, MessageKind::q, opt.executor);

  result.outputs = detail::gather_and_merge(RingTopology{n}, std::move(scattered), opt, result.trace);
  return result;
}

}  // namespace cp
