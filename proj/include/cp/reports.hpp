#pragma once

// Table builders behind the CLI: miss-rate sweeps, CP scaling and MFU.
// Column sets and order are part of the CLI contract.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "cp/perf_model.hpp"
#include "cp/profiles.hpp"
#include "cp/scenario.hpp"

namespace cp {

/// Desk-scale execution attached to a sweep row.
struct SweepExecution {
  std::int64_t context = 512;
  GqaConfig attention{8, 1, 16, 0.0};
  std::uint64_t seed = 0;
  Executor executor = Executor::round_based;
};

struct SweepRow {
  double miss_rate = 0;
  double new_len = 0;
  double cached_len = 0;
  double pass_kv_ms = 0;
  double pass_q_ms = 0;
  Protocol base_choice = Protocol::pass_kv;
  Protocol refined_choice = Protocol::pass_kv;
  StepTimes step;

  struct Executed {
    std::int64_t new_len = 0;
    std::int64_t cached_len = 0;
    std::uint64_t kv_ring_bytes = 0;
    std::uint64_t q_ring_bytes = 0;
    std::uint64_t a2a_bytes = 0;
    int ring_steps = 0;
    double max_rel_error = 0;
  };
  std::optional<Executed> executed;
};

inline constexpr const char* kSweepColumns =
    "miss_rate,T,P,pass_kv_ms,pass_q_ms,base_choice,refined_choice,kv_sendrecv_us,q_sendrecv_us,attn_us,a2a_us,"
    "exec_T,exec_P,exec_kv_ring_bytes,exec_q_ring_bytes,exec_a2a_bytes,exec_ring_steps,exec_max_rel_err";

inline constexpr const char* kScalingColumns =
    "T,N,latency_ms,scaling_ratio,kv_overlapped,tp_bytes_per_block,cp_bytes_per_block";

namespace detail {

inline SweepRow::Executed execute_sweep_point(double miss_rate, const SweepExecution& ex, int n_ranks) {
  const auto t = std::max<std::int64_t>(1, std::llround(miss_rate * static_cast<double>(ex.context)));
  const std::int64_t p = ex.context - t;
  SweepRow::Executed out{t, p, 0, 0, 0, 0, 0.0};
  for (Strategy s : {Strategy::pass_kv, Strategy::pass_q}) {
    Scenario sc;
    sc.n_ranks = n_ranks;
    sc.seed = ex.seed;
    sc.strategy = s;
    sc.attention = ex.attention;
    if (p > 0) sc.turns.push_back({TurnKind::full_prefill, {p}, 1});
    sc.turns.push_back({p > 0 ? TurnKind::partial_prefill : TurnKind::full_prefill, {t}, 1});
    const Transcript tr = run_turns(sc, {ex.executor, false});
    const CallRecord& last = tr.calls.back();
    std::uint64_t ring = 0;
    for (const auto& r : last.trace.ring) ring += r.bytes;
    std::uint64_t a2a = 0;
    for (const auto& r : last.trace.all_to_all) a2a += r.bytes;
    if (s == Strategy::pass_kv) {
      out.kv_ring_bytes = ring;
    } else {
      out.q_ring_bytes = ring;
      out.a2a_bytes = a2a;
    }
    out.ring_steps = n_ranks - 1;
    out.max_rel_error = std::max(out.max_rel_error, tr.max_rel_error());
  }
  return out;
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

/// Rates are fractions in (0, 1]; T = round(rate * total), P = total - T.
inline std::vector<SweepRow> sweep_miss_rate(double total, const std::vector<double>& rates, const CostModel& m,
                                             const std::optional<SweepExecution>& execute = std::nullopt) {
  std::vector<SweepRow> rows;
  for (double rate : rates) {
    if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("sweep: miss rates must lie in (0, 1]");
    SweepRow row;
    row.miss_rate = rate;
    row.new_len = std::round(rate * total);
    row.cached_len = total - row.new_len;
    const PrefillShape shape{row.new_len, row.cached_len};
    row.pass_kv_ms = predict_prefill_seconds(shape, m, Protocol::pass_kv) * 1e3;
    row.pass_q_ms = predict_prefill_seconds(shape, m, Protocol::pass_q) * 1e3;
    row.base_choice = choose_strategy(shape, m, false);
    row.refined_choice = choose_strategy(shape, m, true);
    row.step = predict_step_times(shape, m);
    if (execute) row.executed = detail::execute_sweep_point(rate, *execute, m.n_nodes);
    rows.push_back(row);
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kSweepColumns) + "\n";
  for (const auto& r : rows) {
    out += detail::fmt("%.4f", r.miss_rate) + "," + detail::fmt("%.0f", r.new_len) + "," + detail::fmt("%.0f", r.cached_len) +
           "," + detail::fmt("%.3f", r.pass_kv_ms) + "," + detail::fmt("%.3f", r.pass_q_ms) + "," + to_string(r.base_choice) +
           "," + to_string(r.refined_choice) + "," + detail::fmt("%.2f", r.step.sendrecv_kv_s * 1e6) + "," +
           detail::fmt("%.2f", r.step.sendrecv_q_s * 1e6) + "," + detail::fmt("%.2f", r.step.attn_s * 1e6) + "," +
           detail::fmt("%.2f", r.step.a2a_s * 1e6);
    if (r.executed) {
      const auto& e = *r.executed;
      out += "," + std::to_string(e.new_len) + "," + std::to_string(e.cached_len) + "," + std::to_string(e.kv_ring_bytes) +
             "," + std::to_string(e.q_ring_bytes) + "," + std::to_string(e.a2a_bytes) + "," + std::to_string(e.ring_steps) +
             "," + detail::fmt("%.3e", e.max_rel_error);
    } else {
      out += ",,,,,,,";
    }
    out += "\n";
  }
  return out;
}

struct ScalingRow {
  double tokens = 0;
  int n_nodes = 1;
  double latency_s = 0;
  double scaling_ratio = 1;  // tau_1 / tau_N
  bool kv_overlapped = true;
  TpCpComm comm;
};

/// Full-prefill pass-KV latency per (T, N) and tau_1 / tau_N.
inline std::vector<ScalingRow> scaling_table(const std::vector<double>& tokens, const std::vector<int>& nodes,
                                             const CostModel& base) {
  std::vector<ScalingRow> rows;
  for (double t : tokens) {
    const PrefillShape shape{t, 0};
    const double tau1 = predict_prefill_seconds(shape, base.with_nodes(1), Protocol::pass_kv);
    for (int n : nodes) {
      const CostModel m = base.with_nodes(n);
      ScalingRow r;
      r.tokens = t;
      r.n_nodes = n;
      r.latency_s = predict_prefill_seconds(shape, m, Protocol::pass_kv);
      r.scaling_ratio = tau1 / r.latency_s;
      const StepTimes st = predict_step_times(shape, m);
      r.kv_overlapped = n == 1 || st.sendrecv_kv_s <= st.attn_s;
      r.comm = tp_vs_cp_comm(m, t, static_cast<double>(m.gpus_per_node) * n);
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::string out = std::string(kScalingColumns) + "\n";
  for (const auto& r : rows) {
    out += detail::fmt("%.0f", r.tokens) + "," + std::to_string(r.n_nodes) + "," + detail::fmt("%.3f", r.latency_s * 1e3) +
           "," + detail::fmt("%.4f", r.scaling_ratio) + "," + (r.kv_overlapped ? "1" : "0") + "," +
           detail::fmt("%.0f", r.comm.tp_bytes_per_block) + "," + detail::fmt("%.0f", r.comm.cp_bytes_per_block) + "\n";
  }
  return out;
}

inline std::string mfu_text(double tokens, int n_gpus, double latency_s, const CostModel& m) {
  const MfuReport r = mfu(tokens, n_gpus, latency_s, m);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "total_flops=%.6e\nachieved_flops_per_gpu=%.6e\npeak_flops_per_gpu=%.6e\nutilization=%.4f\n", r.total_flops,
                r.achieved_flops_per_gpu, m.peak_compute / m.gpus_per_node, r.utilization);
  return buf;
}

}  // namespace cp
