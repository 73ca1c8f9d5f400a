#pragma once

// Shared fixtures: a plain nested-loop attention reference and a driver that
// runs one prefill call through either ring protocol.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <vector>

#include "cp/cp.hpp"

namespace cp_test {

struct RefRow {
  std::vector<double> out;  // [heads * dim]
  std::vector<double> lse;  // [heads]
};

// Softmax over scores computed head by head, written without any of the
// library kernels. Keys with pos <= query pos in the same sequence count.
inline RefRow reference_attention(const cp::Embeddings& q, std::size_t qi, const cp::Embeddings& k,
                                  const cp::Embeddings& v, const cp::GqaConfig& cfg) {
  const std::size_t nh = cfg.n_query_heads;
  const std::size_t dim = cfg.head_dim;
  const std::size_t group = nh / cfg.n_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  RefRow r{std::vector<double>(nh * dim, 0.0), std::vector<double>(nh, -std::numeric_limits<double>::infinity())};
  const cp::TokenTag qt = q.tag(qi);
  if (!qt.valid) return r;
  for (std::size_t h = 0; h < nh; ++h) {
    const std::size_t g = h / group;
    std::vector<double> s;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < k.num_tokens(); ++j) {
      const cp::TokenTag kt = k.tag(j);
      if (!kt.valid || kt.seq != qt.seq || kt.pos > qt.pos) continue;
      double dot = 0;
      for (std::size_t d = 0; d < dim; ++d) dot += double(q.row(qi, h)[d]) * double(k.row(j, g)[d]);
      s.push_back(dot * scale);
      idx.push_back(j);
    }
    if (s.empty()) continue;
    double mx = s[0];
    for (double x : s) mx = x > mx ? x : mx;
    double z = 0;
    for (double x : s) z += std::exp(x - mx);
    for (std::size_t n = 0; n < s.size(); ++n) {
      const double w = std::exp(s[n] - mx) / z;
      for (std::size_t d = 0; d < dim; ++d) r.out[h * dim + d] += w * double(v.row(idx[n], g)[d]);
    }
    r.lse[h] = mx + std::log(z);
  }
  return r;
}

inline cp::Embeddings random_block(cp::SplitMix64& rng, std::size_t heads, std::size_t dim, std::int64_t seq,
                                   std::int64_t pos0, std::size_t n) {
  cp::Embeddings b(heads, dim);
  std::vector<float> row(heads * dim);
  for (std::size_t t = 0; t < n; ++t) {
    for (auto& x : row) x = static_cast<float>(rng.uniform(-1, 1));
    b.push_token({seq, pos0 + static_cast<std::int64_t>(t), true}, row);
  }
  return b;
}

// Worst relative error of a partial against the reference, element-wise on
// outputs and lse of valid rows; masked rows must be exactly zero / -inf.
inline double max_error_vs_reference(const cp::PartialAttention& p, const cp::Embeddings& q, const cp::Embeddings& k,
                                     const cp::Embeddings& v, const cp::GqaConfig& cfg) {
  double worst = 0;
  for (std::size_t t = 0; t < q.num_tokens(); ++t) {
    const RefRow r = reference_attention(q, t, k, v, cfg);
    for (std::size_t h = 0; h < cfg.n_query_heads; ++h) {
      const double a = p.lse_at(t, h);
      const double b = r.lse[h];
      if (std::isinf(a) || std::isinf(b)) {
        if (a != b) return std::numeric_limits<double>::infinity();
      } else {
        worst = std::max(worst, cp::relative_error(a, b));
      }
      for (std::size_t d = 0; d < cfg.head_dim; ++d) {
        worst = std::max(worst, cp::relative_error(p.output.row(t, h)[d], r.out[h * cfg.head_dim + d]));
      }
    }
  }
  return worst;
}

struct SeqCase {
  std::int64_t cached = 0;
  std::int64_t fresh = 1;
};

// One prefill call over `seqs` on n ranks. Cached tokens are pre-placed in
// contiguous runs, rank r holding layout[s][r] of them.
struct PrefillCase {
  cp::GqaConfig cfg;
  int n = 1;
  std::vector<SeqCase> seqs;
  std::vector<std::vector<std::int64_t>> layout;
  std::uint64_t seed = 1;

  // All keys/values of every sequence (dense, unsharded) for the reference.
  cp::Embeddings all_k{1, 1}, all_v{1, 1};
  std::vector<cp::RankKvCache> caches;
  std::vector<cp::PrefillInputs> inputs;
  std::optional<cp::ShardPlan> plan;

  void build() {
    if (layout.empty()) {
      for (const auto& s : seqs) {
        std::vector<std::int64_t> row(static_cast<std::size_t>(n), s.cached / n);
        for (std::int64_t i = 0; i < s.cached % n; ++i) ++row[static_cast<std::size_t>(i)];
        layout.push_back(row);
      }
    }
    const cp::TokenGenerator gen(seed, cfg);
    all_k = cp::Embeddings(cfg.n_kv_heads, cfg.head_dim);
    all_v = cp::Embeddings(cfg.n_kv_heads, cfg.head_dim);
    caches.assign(static_cast<std::size_t>(n), cp::RankKvCache(cfg.n_kv_heads, cfg.head_dim));
    std::vector<cp::SequenceSpec> specs;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto id = static_cast<std::int64_t>(s);
      std::int64_t pos = 0;
      for (int r = 0; r < n; ++r) {
        cp::Embeddings k(cfg.n_kv_heads, cfg.head_dim), v(cfg.n_kv_heads, cfg.head_dim);
        for (std::int64_t i = 0; i < layout[s][static_cast<std::size_t>(r)]; ++i, ++pos) {
          k.push_token({id, pos, true}, gen.values(id, pos, cp::TokenGenerator::Tensor::key));
          v.push_token({id, pos, true}, gen.values(id, pos, cp::TokenGenerator::Tensor::value));
        }
        if (k.num_tokens() > 0) caches[static_cast<std::size_t>(r)].append(id, k, v);
      }
      for (std::int64_t p = 0; p < seqs[s].cached + seqs[s].fresh; ++p) {
        all_k.push_token({id, p, true}, gen.values(id, p, cp::TokenGenerator::Tensor::key));
        all_v.push_token({id, p, true}, gen.values(id, p, cp::TokenGenerator::Tensor::value));
      }
      specs.push_back({id, seqs[s].cached, seqs[s].fresh});
    }
    bool any_cached = false;
    for (const auto& s : seqs) any_cached = any_cached || s.cached > 0;
    plan = any_cached ? cp::plan_partial_prefill(specs, n, layout) : cp::plan_full_prefill(specs, n);
    inputs.clear();
    for (int r = 0; r < n; ++r) inputs.push_back(gen.prefill_inputs(plan->rank_slots(r)));
  }

  cp::RingResult run(cp::Protocol p, cp::RingOptions opt = {}) {
    build();
    return p == cp::Protocol::pass_kv ? cp::ring_pass_kv_prefill(*plan, caches, inputs, cfg, opt)
                                      : cp::ring_pass_q_prefill(*plan, caches, inputs, cfg, opt);
  }

  double max_error(const cp::RingResult& res) const {
    double worst = 0;
    for (int r = 0; r < n; ++r) {
      worst = std::max(worst, max_error_vs_reference(res.outputs[static_cast<std::size_t>(r)],
                                                     inputs[static_cast<std::size_t>(r)].q, all_k, all_v, cfg));
    }
    return worst;
  }
};

inline bool bit_identical(const std::vector<cp::PartialAttention>& a, const std::vector<cp::PartialAttention>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto da = a[i].output.data();
    const auto db = b[i].output.data();
    if (da.size() != db.size() || a[i].lse.size() != b[i].lse.size()) return false;
    if (std::memcmp(da.data(), db.data(), da.size_bytes()) != 0) return false;
    if (std::memcmp(a[i].lse.data(), b[i].lse.data(), a[i].lse.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

// Brute-force count of (query, admitted key) pairs for one rank of a full
// prefill plan.
inline std::int64_t causal_pairs(const cp::ShardPlan& plan, int rank) {
  std::int64_t pairs = 0;
  for (const auto& slot : plan.rank_slots(rank)) {
    if (!slot.valid) continue;
    for (const auto& s : plan.sequences()) {
      if (s.spec.seq_id != slot.seq) continue;
      for (std::int64_t k = 0; k < s.spec.cached_len + s.spec.new_len; ++k) pairs += k <= slot.pos ? 1 : 0;
    }
  }
  return pairs;
}

}  // namespace cp_test
