#pragma once

// Analytical communication/compute model for context-parallel prefill:
// message sizes and attention FLOPs, the pass-KV / pass-Q overlap
// thresholds, strategy selection, per-step time prediction, TP-vs-CP
// traffic and MFU arithmetic.
//
// Units: bytes, FLOPs, seconds. Compute and bandwidth are per CP node
// (a node is one TP group); all token counts are per sequence batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cp {

enum class Protocol { pass_kv, pass_q };

inline const char* to_string(Protocol p) { return p == Protocol::pass_kv ? "pass-kv" : "pass-q"; }

/// Affine all-to-all latency: base + bytes * per_byte (bytes sent per rank).
struct A2aModel {
  double base_s = 0.0;
  double per_byte_s = 0.0;

  double seconds(double bytes) const { return base_s + bytes * per_byte_s; }
};

struct CostModel {
  double n_query_heads = 128;
  double n_kv_heads = 8;
  double model_dim = 16384;
  double n_layers = 126;
  double param_count = 405e9;
  double peak_compute = 8e14;       // FLOP/s per node
  double compute_efficiency = 1.0;  // achieved / peak
  double bandwidth = 5e10;          // bytes/s per rank link
  double bandwidth_efficiency = 1.0;
  double sendrecv_latency_s = 0.0;
  double elem_size = 2;
  int n_nodes = 1;
  int gpus_per_node = 1;
  A2aModel a2a;

  double head_dim() const { return model_dim / n_query_heads; }
  double kv_ratio() const { return n_kv_heads / n_query_heads; }
  double compute() const { return peak_compute * compute_efficiency; }
  double link_bandwidth() const { return bandwidth * bandwidth_efficiency; }

  void validate() const {
    const bool positive = n_query_heads > 0 && n_kv_heads > 0 && model_dim > 0 && n_layers > 0 && param_count > 0 &&
                          peak_compute > 0 && compute_efficiency > 0 && bandwidth > 0 && bandwidth_efficiency > 0 &&
                          elem_size > 0 && n_nodes > 0 && gpus_per_node > 0 && sendrecv_latency_s >= 0 &&
                          a2a.base_s >= 0 && a2a.per_byte_s >= 0;
    if (!positive) throw std::invalid_argument("CostModel: all constants must be positive");
    if (std::fmod(model_dim, n_query_heads) != 0.0) {
      throw std::invalid_argument("CostModel: model_dim must be a multiple of n_query_heads");
    }
  }

  CostModel with_nodes(int n) const {
    CostModel m = *this;
    m.n_nodes = n;
    return m;
  }
};

struct PrefillShape {
  double new_len = 0;     // T
  double cached_len = 0;  // P

  double context() const { return new_len + cached_len; }
  double miss_rate() const { return new_len / context(); }

  void validate() const {
    if (new_len < 0 || cached_len < 0 || new_len + cached_len < 1) {
      throw std::invalid_argument("PrefillShape: need T >= 0, P >= 0, T + P >= 1");
    }
  }
};

enum class CommKind { kv, q };

/// Whole-sequence message volume: Q = T*D*e, KV = 2*(T+P)*D*(N_KV/N_H)*e.
inline double comm_bytes(const PrefillShape& shape, const CostModel& m, CommKind kind) {
  if (kind == CommKind::q) return shape.new_len * m.model_dim * m.elem_size;
  return 2.0 * shape.context() * m.model_dim * m.kv_ratio() * m.elem_size;
}

/// Per-layer attention FLOPs 4*T*D*(T+P); full prefill is P = 0.
inline double attention_flops(const PrefillShape& shape, const CostModel& m) {
  return 4.0 * shape.new_len * m.model_dim * shape.context();
}

/// Causal (halved) attention FLOPs per layer, 2*T*D*(T+P).
inline double causal_attention_flops(const PrefillShape& shape, const CostModel& m) {
  return attention_flops(shape, m) / 2.0;
}

/// Pass-Q messages are no larger than pass-KV iff miss_rate <= 2*N_KV/N_H.
inline double size_threshold(const CostModel& m) { return 2.0 * m.n_kv_heads / m.n_query_heads; }

/// Smallest T for which ring pass-KV SendRecv hides under attention.
inline double pass_kv_overlap_min_T(const CostModel& m) {
  return m.n_nodes * m.compute() * m.n_kv_heads * m.elem_size / (2.0 * m.n_query_heads * m.link_bandwidth());
}

/// Smallest T+P for which ring pass-Q SendRecv hides under attention.
inline double pass_q_overlap_min_ctx(const CostModel& m) {
  return m.n_nodes * m.elem_size * m.compute() / (4.0 * m.link_bandwidth());
}

inline double sendrecv_seconds(double bytes, const CostModel& m) {
  return m.sendrecv_latency_s + bytes / m.link_bandwidth();
}

/// All-to-all bytes sent per rank after pass-Q: N-1 partial outputs of
/// T/N query rows each, plus fp32 lse per (row, head).
inline double a2a_bytes(const PrefillShape& shape, const CostModel& m) {
  const double n = m.n_nodes;
  return (n - 1.0) * (shape.new_len / n) * (m.model_dim * m.elem_size + m.n_query_heads * 4.0);
}

/// Per-layer, per-rank timings of one ring step (and the pass-Q all-to-all).
struct StepTimes {
  double sendrecv_kv_s = 0;
  double sendrecv_q_s = 0;
  double attn_s = 0;
  double a2a_s = 0;

  double exposed_kv_s(int n) const { return (n - 1) * std::max(0.0, sendrecv_kv_s - attn_s); }
  double exposed_q_s(int n) const { return (n - 1) * std::max(0.0, sendrecv_q_s - attn_s) + (n > 1 ? a2a_s : 0.0); }
};

inline StepTimes predict_step_times(const PrefillShape& shape, const CostModel& m) {
  shape.validate();
  const double n = m.n_nodes;
  StepTimes t;
  t.sendrecv_kv_s = sendrecv_seconds(comm_bytes(shape, m, CommKind::kv) / n, m);
  t.sendrecv_q_s = sendrecv_seconds(comm_bytes(shape, m, CommKind::q) / n, m);
  t.attn_s = attention_flops(shape, m) / (n * n) / m.compute();
  t.a2a_s = m.n_nodes > 1 ? m.a2a.seconds(a2a_bytes(shape, m)) : 0.0;
  return t;
}

/// Per-layer attention latency of one ring call: N compute steps, N-1 of
/// them overlapped with SendRecv, plus the all-to-all for pass-Q.
inline double attention_layer_seconds(const PrefillShape& shape, const CostModel& m, Protocol p) {
  const StepTimes t = predict_step_times(shape, m);
  const int n = m.n_nodes;
  const double sendrecv = p == Protocol::pass_kv ? t.sendrecv_kv_s : t.sendrecv_q_s;
  double total = (n - 1) * std::max(t.attn_s, sendrecv) + t.attn_s;
  if (p == Protocol::pass_q && n > 1) total += t.a2a_s;
  return total;
}

/// Modeled TTFT: every layer's ring attention plus linear layers (2*W*T
/// FLOPs split over N nodes).
inline double predict_prefill_seconds(const PrefillShape& shape, const CostModel& m, Protocol p) {
  const double linear = 2.0 * m.param_count * shape.new_len / (m.n_nodes * m.compute());
  return m.n_layers * attention_layer_seconds(shape, m, p) + linear;
}

/// Base mode: pass-KV iff T >= pass-KV overlap threshold or miss rate >=
/// size threshold. Refined mode keeps the size test and otherwise compares
/// exposed pass-KV ring communication with exposed pass-Q communication
/// including the all-to-all. Ties pick pass-KV.
inline Protocol choose_strategy(const PrefillShape& shape, const CostModel& m, bool refined) {
  shape.validate();
  if (shape.miss_rate() >= size_threshold(m)) return Protocol::pass_kv;
  if (!refined) return shape.new_len >= pass_kv_overlap_min_T(m) ? Protocol::pass_kv : Protocol::pass_q;
  const StepTimes t = predict_step_times(shape, m);
  return t.exposed_kv_s(m.n_nodes) <= t.exposed_q_s(m.n_nodes) ? Protocol::pass_kv : Protocol::pass_q;
}

struct TpCpComm {
  double tp_bytes_per_block = 0;
  double cp_bytes_per_block = 0;
  double tp_param_bytes = 0;  // W / N_TP per GPU
  double cp_param_bytes = 0;  // W per TP group replica
};

/// Per transformer block: TP all-reduces 2*T*N_H*D_H elements, CP passes
/// T*N_KV*D_H.
inline TpCpComm tp_vs_cp_comm(const CostModel& m, double tokens, double n_tp) {
  if (n_tp <= 0) throw std::invalid_argument("tp_vs_cp_comm: n_tp must be positive");
  TpCpComm c;
  c.tp_bytes_per_block = 2.0 * tokens * m.n_query_heads * m.head_dim() * m.elem_size;
  c.cp_bytes_per_block = tokens * m.n_kv_heads * m.head_dim() * m.elem_size;
  c.tp_param_bytes = m.param_count / n_tp;
  c.cp_param_bytes = m.param_count;
  return c;
}

struct MfuReport {
  double total_flops = 0;
  double achieved_flops_per_gpu = 0;
  double utilization = 0;
};

/// Linear layers 2*W*T plus causal attention n_layers*2*T^2*D, divided by
/// latency and GPU count; utilization against the per-GPU peak.
inline MfuReport mfu(double tokens, int n_gpus, double latency_s, const CostModel& m) {
  if (latency_s <= 0) throw std::invalid_argument("mfu: latency must be positive");
  if (n_gpus <= 0) throw std::invalid_argument("mfu: n_gpus must be positive");
  MfuReport r;
  r.total_flops = 2.0 * m.param_count * tokens + m.n_layers * causal_attention_flops({tokens, 0}, m);
  r.achieved_flops_per_gpu = r.total_flops / (latency_s * n_gpus);
  r.utilization = r.achieved_flops_per_gpu / (m.peak_compute / m.gpus_per_node);
  return r;
}

}  // namespace cp
