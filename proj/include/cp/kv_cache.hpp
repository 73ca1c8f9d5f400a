#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cp/tensor.hpp"

namespace cp {

/// One rank's persistent key/value store. Holds only valid tokens, kept in
/// ascending position order per sequence; padding is produced on snapshot.
class RankKvCache {
 public:
  struct Entry {
    Embeddings keys;
    Embeddings values;
  };

  RankKvCache(std::size_t n_kv_heads, std::size_t head_dim) : n_kv_heads_(n_kv_heads), head_dim_(head_dim) {
    if (n_kv_heads == 0 || head_dim == 0) throw std::invalid_argument("RankKvCache: empty head layout");
  }

  std::size_t n_kv_heads() const { return n_kv_heads_; }
  std::size_t head_dim() const { return head_dim_; }

  /// Stores the tokens of k_block/v_block under seq_id. Tokens may land on
  /// either side of existing ones (a rank holds interleaved chunks).
  std::int64_t append(std::int64_t seq_id, const Embeddings& k_block, const Embeddings& v_block) {
    if (k_block.num_heads() != n_kv_heads_ || k_block.head_dim() != head_dim_ || !k_block.same_layout(v_block)) {
      throw std::invalid_argument("RankKvCache::append: head layout mismatch with cache config");
    }
    if (k_block.num_tokens() != v_block.num_tokens()) {
      throw std::invalid_argument("RankKvCache::append: key/value token counts differ");
    }
    for (std::size_t t = 0; t < k_block.num_tokens(); ++t) {
      const TokenTag& tag = k_block.tag(t);
      if (tag != v_block.tag(t)) throw std::invalid_argument("RankKvCache::append: key/value positions differ");
      if (!tag.valid) throw std::invalid_argument("RankKvCache::append: padding rows cannot be cached");
      if (tag.seq != seq_id) {
        throw std::invalid_argument("RankKvCache::append: token of sequence " + std::to_string(tag.seq) +
                                    " appended under " + std::to_string(seq_id));
      }
    }

    auto [it, inserted] = entries_.try_emplace(seq_id, Entry{Embeddings(n_kv_heads_, head_dim_), Embeddings(n_kv_heads_, head_dim_)});
    Entry& e = it->second;
    Entry merged{Embeddings(n_kv_heads_, head_dim_), Embeddings(n_kv_heads_, head_dim_)};
    std::size_t a = 0;
    std::size_t b = 0;
    while (a < e.keys.num_tokens() || b < k_block.num_tokens()) {
      const bool take_old =
          b == k_block.num_tokens() || (a < e.keys.num_tokens() && e.keys.tag(a).pos < k_block.tag(b).pos);
      if (!take_old && a < e.keys.num_tokens() && e.keys.tag(a).pos == k_block.tag(b).pos) {
        throw std::invalid_argument("RankKvCache::append: position " + std::to_string(k_block.tag(b).pos) +
                                    " already cached for sequence " + std::to_string(seq_id));
      }
      if (take_old) {
        merged.keys.push_token(e.keys.tag(a), e.keys.token(a));
        merged.values.push_token(e.values.tag(a), e.values.token(a));
        ++a;
      } else {
        if (b > 0 && k_block.tag(b).pos <= k_block.tag(b - 1).pos) {
          throw std::invalid_argument("RankKvCache::append: block positions not strictly increasing");
        }
        merged.keys.push_token(k_block.tag(b), k_block.token(b));
        merged.values.push_token(v_block.tag(b), v_block.token(b));
        ++b;
      }
    }
    e = std::move(merged);
    return static_cast<std::int64_t>(e.keys.num_tokens());
  }

  std::int64_t cached_len(std::int64_t seq_id) const {
    auto it = entries_.find(seq_id);
    return it == entries_.end() ? 0 : static_cast<std::int64_t>(it->second.keys.num_tokens());
  }

  std::int64_t total_tokens() const {
    std::int64_t n = 0;
    for (const auto& [id, e] : entries_) n += static_cast<std::int64_t>(e.keys.num_tokens());
    return n;
  }

  bool contains(std::int64_t seq_id) const { return entries_.count(seq_id) != 0; }

  std::vector<std::int64_t> sequences() const {
    std::vector<std::int64_t> ids;
    for (const auto& [id, e] : entries_) ids.push_back(id);
    return ids;
  }

  /// Cached keys/values of seq_id padded with invalid rows up to max_len.
  std::pair<Embeddings, Embeddings> snapshot_padded(std::int64_t seq_id, std::int64_t max_len) const {
    const std::int64_t len = cached_len(seq_id);
    if (max_len < len) {
      throw std::invalid_argument("RankKvCache::snapshot_padded: max_len " + std::to_string(max_len) +
                                  " < cached_len " + std::to_string(len));
    }
    auto out = snapshot(seq_id);
    const auto pad = static_cast<std::size_t>(max_len - len);
    out.first.push_padding(pad);
    out.second.push_padding(pad);
    return out;
  }

  std::pair<Embeddings, Embeddings> snapshot(std::int64_t seq_id) const {
    auto it = entries_.find(seq_id);
    if (it == entries_.end()) return {Embeddings(n_kv_heads_, head_dim_), Embeddings(n_kv_heads_, head_dim_)};
    return {it->second.keys, it->second.values};
  }

 private:
  std::size_t n_kv_heads_;
  std::size_t head_dim_;
  std::map<std::int64_t, Entry> entries_;
};

}  // namespace cp
