#pragma once

// Dense numeric substrate: embedding blocks, GQA attention with position
// masks, and log-sum-exp carrying partial attention.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cp {

/// Per-token bookkeeping carried alongside embedding data.
struct TokenTag {
  std::int64_t seq = -1;
  std::int64_t pos = -1;
  bool valid = false;

  static constexpr TokenTag padding() { return {}; }

  friend bool operator==(const TokenTag&, const TokenTag&) = default;
};

/// Dense [num_tokens, num_heads, head_dim] block with a tag per token.
/// Padding rows (valid == false) hold zeros and are never read by attention.
template <class T>
class EmbeddingBlock {
 public:
  using value_type = T;

  EmbeddingBlock() = default;
  EmbeddingBlock(std::size_t num_heads, std::size_t head_dim)
      : num_heads_(num_heads), head_dim_(head_dim) {
    if (num_heads == 0 || head_dim == 0) {
      throw std::invalid_argument("EmbeddingBlock: num_heads and head_dim must be positive");
    }
  }

  /// num_tokens padding rows.
  static EmbeddingBlock padded(std::size_t num_tokens, std::size_t num_heads, std::size_t head_dim) {
    EmbeddingBlock b(num_heads, head_dim);
    b.tags_.assign(num_tokens, TokenTag::padding());
    b.data_.assign(num_tokens * num_heads * head_dim, T{});
    return b;
  }

  std::size_t num_tokens() const { return tags_.size(); }
  std::size_t num_heads() const { return num_heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t row_width() const { return num_heads_ * head_dim_; }
  bool empty() const { return tags_.empty(); }

  const TokenTag& tag(std::size_t t) const { return tags_[t]; }
  TokenTag& tag(std::size_t t) { return tags_[t]; }
  std::span<const TokenTag> tags() const { return tags_; }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }

  std::span<const T> token(std::size_t t) const {
    return std::span<const T>(data_).subspan(t * row_width(), row_width());
  }
  std::span<T> token(std::size_t t) { return std::span<T>(data_).subspan(t * row_width(), row_width()); }

  std::span<const T> row(std::size_t t, std::size_t h) const {
    return std::span<const T>(data_).subspan((t * num_heads_ + h) * head_dim_, head_dim_);
  }
  std::span<T> row(std::size_t t, std::size_t h) {
    return std::span<T>(data_).subspan((t * num_heads_ + h) * head_dim_, head_dim_);
  }

  std::size_t num_valid() const {
    return static_cast<std::size_t>(std::count_if(tags_.begin(), tags_.end(), [](const TokenTag& g) { return g.valid; }));
  }

  void push_token(TokenTag tag, std::span<const T> values) {
    if (values.size() != row_width()) {
      throw std::invalid_argument("EmbeddingBlock::push_token: expected " + std::to_string(row_width()) +
                                  " values, got " + std::to_string(values.size()));
    }
    tags_.push_back(tag);
    data_.insert(data_.end(), values.begin(), values.end());
  }

  void push_padding(std::size_t count = 1) {
    tags_.insert(tags_.end(), count, TokenTag::padding());
    data_.insert(data_.end(), count * row_width(), T{});
  }

  /// Appends every row of `other` (same head layout required).
  void append(const EmbeddingBlock& other) {
    require_same_layout(other, "EmbeddingBlock::append");
    tags_.insert(tags_.end(), other.tags_.begin(), other.tags_.end());
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
  }

  EmbeddingBlock slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > num_tokens()) throw std::out_of_range("EmbeddingBlock::slice");
    EmbeddingBlock out(num_heads_, head_dim_);
    out.tags_.assign(tags_.begin() + static_cast<std::ptrdiff_t>(begin), tags_.begin() + static_cast<std::ptrdiff_t>(end));
    out.data_.assign(data_.begin() + static_cast<std::ptrdiff_t>(begin * row_width()),
                     data_.begin() + static_cast<std::ptrdiff_t>(end * row_width()));
    return out;
  }

  bool same_layout(const EmbeddingBlock& other) const {
    return num_heads_ == other.num_heads_ && head_dim_ == other.head_dim_;
  }

  void require_same_layout(const EmbeddingBlock& other, const char* where) const {
    if (!same_layout(other)) {
      throw std::invalid_argument(std::string(where) + ": head layout mismatch");
    }
  }

  std::size_t byte_size() const { return data_.size() * sizeof(T); }

  friend bool operator==(const EmbeddingBlock&, const EmbeddingBlock&) = default;

 private:
  std::size_t num_heads_ = 0;
  std::size_t head_dim_ = 0;
  std::vector<TokenTag> tags_;
  std::vector<T> data_;
};

using Embeddings = EmbeddingBlock<float>;

struct GqaConfig {
  std::size_t n_query_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
  double scale = 0.0;  // 0 selects 1/sqrt(head_dim)

  double effective_scale() const { return scale != 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(head_dim)); }

  /// KV head read by query head h.
  std::size_t kv_head_for(std::size_t h) const { return h * n_kv_heads / n_query_heads; }

  void validate() const {
    if (n_query_heads == 0 || n_kv_heads == 0 || head_dim == 0) {
      throw std::invalid_argument("GqaConfig: head counts and head_dim must be positive");
    }
    if (n_query_heads % n_kv_heads != 0) {
      throw std::invalid_argument("GqaConfig: n_query_heads (" + std::to_string(n_query_heads) +
                                  ") not divisible by n_kv_heads (" + std::to_string(n_kv_heads) + ")");
    }
  }
};

/// Attention output over some subset of keys, plus the log-sum-exp of the
/// scores that produced it. lse == -inf marks a row that saw no keys.
struct PartialAttention {
  EmbeddingBlock<double> output;
  std::vector<double> lse;  // [num_tokens * num_heads]
  std::uint64_t admitted_pairs = 0;

  std::size_t num_tokens() const { return output.num_tokens(); }
  std::size_t num_heads() const { return output.num_heads(); }
  double lse_at(std::size_t t, std::size_t h) const { return lse[t * output.num_heads() + h]; }
  std::size_t byte_size() const { return output.byte_size() + lse.size() * sizeof(double); }

  friend bool operator==(const PartialAttention&, const PartialAttention&) = default;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline bool admits(const TokenTag& query, const TokenTag& key) {
  return query.valid && key.valid && query.seq == key.seq && key.pos <= query.pos;
}

/// Scaled dot-product GQA attention masked causally by token tags.
/// Keys are visited in ascending index order with an online softmax in fp64.
template <class T>
PartialAttention gqa_attention(const EmbeddingBlock<T>& q, const EmbeddingBlock<T>& k, const EmbeddingBlock<T>& v,
                               const GqaConfig& cfg) {
  cfg.validate();
  if (q.num_heads() != cfg.n_query_heads || q.head_dim() != cfg.head_dim) {
    throw std::invalid_argument("gqa_attention: query layout does not match config");
  }
  if (k.num_heads() != cfg.n_kv_heads || k.head_dim() != cfg.head_dim || !k.same_layout(v)) {
    throw std::invalid_argument("gqa_attention: key/value layout does not match config");
  }
  if (k.num_tokens() != v.num_tokens() || !std::equal(k.tags().begin(), k.tags().end(), v.tags().begin())) {
    throw std::invalid_argument("gqa_attention: keys and values differ in shape or positions");
  }

  const std::size_t n_q = q.num_tokens();
  const std::size_t n_heads = cfg.n_query_heads;
  const std::size_t dim = cfg.head_dim;
  const double scale = cfg.effective_scale();

  PartialAttention out{EmbeddingBlock<double>::padded(n_q, n_heads, dim), std::vector<double>(n_q * n_heads, kNegInf), 0};
  std::vector<double> acc(dim);
  std::vector<std::size_t> admitted;

  for (std::size_t i = 0; i < n_q; ++i) {
    const TokenTag& qt = q.tag(i);
    out.output.tag(i) = qt;
    admitted.clear();
    for (std::size_t j = 0; j < k.num_tokens(); ++j) {
      if (admits(qt, k.tag(j))) admitted.push_back(j);
    }
    out.admitted_pairs += admitted.size();
    if (admitted.empty()) continue;

    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t g = cfg.kv_head_for(h);
      const auto qrow = q.row(i, h);
      double running_max = kNegInf;
      double denom = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j : admitted) {
        const auto krow = k.row(j, g);
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += static_cast<double>(qrow[d]) * static_cast<double>(krow[d]);
        const double s = scale * dot;
        if (s > running_max) {
          const double rescale = std::exp(running_max - s);
          denom *= rescale;
          for (double& a : acc) a *= rescale;
          running_max = s;
        }
        const double w = std::exp(s - running_max);
        denom += w;
        const auto vrow = v.row(j, g);
        for (std::size_t d = 0; d < dim; ++d) acc[d] += w * static_cast<double>(vrow[d]);
      }
      auto orow = out.output.row(i, h);
      for (std::size_t d = 0; d < dim; ++d) orow[d] = acc[d] / denom;
      out.lse[i * n_heads + h] = running_max + std::log(denom);
    }
  }
  return out;
}

namespace detail {

inline void require_mergeable(const PartialAttention& a, const PartialAttention& b) {
  if (a.num_tokens() != b.num_tokens() || !a.output.same_layout(b.output) || a.lse.size() != b.lse.size()) {
    throw std::invalid_argument("merge_attention: partial shapes differ");
  }
  for (std::size_t t = 0; t < a.num_tokens(); ++t) {
    if (a.output.tag(t) != b.output.tag(t)) {
      throw std::invalid_argument("merge_attention: partials cover different query tokens");
    }
  }
}

}  // namespace detail

/// Folds `part` into `acc`: lse' = log(e^a + e^b) computed against the max,
/// each output reweighted by exp(lse_s - lse').
inline void merge_into(PartialAttention& acc, const PartialAttention& part) {
  detail::require_mergeable(acc, part);
  const std::size_t heads = acc.num_heads();
  for (std::size_t t = 0; t < acc.num_tokens(); ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      double& la = acc.lse[t * heads + h];
      const double lb = part.lse[t * heads + h];
      const double m = std::max(la, lb);
      if (m == kNegInf) continue;
      const double merged = m + std::log(std::exp(la - m) + std::exp(lb - m));
      const double wa = std::exp(la - merged);
      const double wb = std::exp(lb - merged);
      auto oa = acc.output.row(t, h);
      const auto ob = part.output.row(t, h);
      for (std::size_t d = 0; d < oa.size(); ++d) oa[d] = oa[d] * wa + ob[d] * wb;
      la = merged;
    }
  }
  acc.admitted_pairs += part.admitted_pairs;
}

/// Left fold of merge_into over `parts` in the given (ascending source) order.
inline PartialAttention merge_attention(std::span<const PartialAttention> parts) {
  if (parts.empty()) throw std::invalid_argument("merge_attention: empty list");
  PartialAttention acc = parts.front();
  for (std::size_t s = 1; s < parts.size(); ++s) merge_into(acc, parts[s]);
  return acc;
}

}  // namespace cp
