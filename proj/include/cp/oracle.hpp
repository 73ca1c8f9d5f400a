#pragma once

// Unsharded reference: replays a conversation on a single rank and computes
// causal GQA attention with an explicit two-pass softmax over the full
// history. Shares no code with gqa_attention.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cp/tensor.hpp"

namespace cp {

class DenseOracle {
 public:
  struct Row {
    std::vector<double> output;  // [n_query_heads * head_dim]
    std::vector<double> lse;     // [n_query_heads]
  };

  explicit DenseOracle(GqaConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// Records the key/value of (seq, pos); positions must arrive in order.
  void add_token(std::int64_t seq, std::int64_t pos, std::span<const float> key, std::span<const float> value) {
    auto& h = history_[seq];
    if (pos != static_cast<std::int64_t>(h.size())) {
      throw std::invalid_argument("DenseOracle: sequence " + std::to_string(seq) + " expected position " +
                                  std::to_string(h.size()) + ", got " + std::to_string(pos));
    }
    const std::size_t width = cfg_.n_kv_heads * cfg_.head_dim;
    if (key.size() != width || value.size() != width) throw std::invalid_argument("DenseOracle: key/value width");
    h.push_back({std::vector<float>(key.begin(), key.end()), std::vector<float>(value.begin(), value.end())});
  }

  std::int64_t length(std::int64_t seq) const {
    auto it = history_.find(seq);
    return it == history_.end() ? 0 : static_cast<std::int64_t>(it->second.size());
  }

  /// Attention of one query (all heads) at position pos over keys 0..pos.
  Row attend(std::int64_t seq, std::int64_t pos, std::span<const float> query) const {
    const std::size_t nh = cfg_.n_query_heads;
    const std::size_t dim = cfg_.head_dim;
    if (query.size() != nh * dim) throw std::invalid_argument("DenseOracle: query width");
    auto it = history_.find(seq);
    if (it == history_.end()) throw std::invalid_argument("DenseOracle: unknown sequence " + std::to_string(seq));
    const auto& h = it->second;
    const std::size_t n_keys = std::min<std::size_t>(h.size(), static_cast<std::size_t>(pos + 1));

    Row row{std::vector<double>(nh * dim, 0.0), std::vector<double>(nh, kNegInf)};
    if (n_keys == 0) return row;
    const double scale = cfg_.effective_scale();
    std::vector<double> scores(n_keys);
    for (std::size_t head = 0; head < nh; ++head) {
      const std::size_t g = head / (nh / cfg_.n_kv_heads);
      for (std::size_t j = 0; j < n_keys; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          dot += static_cast<double>(query[head * dim + d]) * static_cast<double>(h[j].key[g * dim + d]);
        }
        scores[j] = scale * dot;
      }
      double max_score = scores[0];
      for (double s : scores) max_score = std::max(max_score, s);
      double sum = 0.0;
      for (double s : scores) sum += std::exp(s - max_score);
      for (std::size_t j = 0; j < n_keys; ++j) {
        const double w = std::exp(scores[j] - max_score) / sum;
        for (std::size_t d = 0; d < dim; ++d) row.output[head * dim + d] += w * static_cast<double>(h[j].value[g * dim + d]);
      }
      row.lse[head] = max_score + std::log(sum);
    }
    return row;
  }

 private:
  struct KvRow {
    std::vector<float> key;
    std::vector<float> value;
  };

  GqaConfig cfg_;
  std::map<std::int64_t, std::vector<KvRow>> history_;
};

/// Elementwise relative error |a - b| / max(|a|, |b|); zero when both are zero.
inline double relative_error(double a, double b) {
  if (a == b) return 0.0;
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

}  // namespace cp
