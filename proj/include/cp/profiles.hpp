#pragma once

// Model and hardware profiles feeding CostModel. Built-in profiles mirror the
// JSON files under profiles/; files use the same keys and may be loaded at
// run time. Hardware peaks are per GPU and scaled by gpus_per_node.

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cp/perf_model.hpp"
#include "json.hpp"

namespace cp {

struct ModelProfile {
  std::string name;
  double n_query_heads = 0;
  double n_kv_heads = 0;
  double model_dim = 0;
  double n_layers = 0;
  double param_count = 0;
  double elem_size = 2;
};

struct HardwareProfile {
  std::string name;
  int gpus_per_node = 8;
  double peak_compute = 0;  // FLOP/s per GPU
  double compute_efficiency = 1.0;
  double bandwidth = 0;  // bytes/s per GPU inter-node link
  double bandwidth_efficiency = 1.0;
  double sendrecv_latency_s = 0.0;
  double a2a_base_s = 0.0;
  double a2a_per_byte_s = 0.0;  // per byte sent by one node
};

class ProfileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Llama3 405B: 126 layers, D = 16384, 128 query heads, 8 KV heads, BF16 activations.
inline ModelProfile llama3_405b() { return {"llama3-405b", 128, 8, 16384, 126, 405e9, 2}; }

// H100 peak of 8e14 FLOP/s is the figure implied by 502 TF/s at 63% utilization.
// GTT efficiencies and latencies are fit to the CP4 128K time breakdown
// (SendRecv 627/631/166/544 us, Attn 414/1608 us, All2All 424/1023 us).
inline HardwareProfile gtt_h100() { return {"gtt-h100", 8, 8e14, 0.63, 50e9, 0.56, 55e-6, 224.3e-6, 2.5e-12}; }

// 100 Gb/s frontend TCP/IP; ~3 GB/s achieved per rank.
inline HardwareProfile gti_h100() { return {"gti-h100", 8, 8e14, 0.63, 12.5e9, 0.24, 55e-6, 224.3e-6, 1.0e-11}; }

inline const std::map<std::string, ModelProfile>& builtin_models() {
  static const std::map<std::string, ModelProfile> m{{"llama3-405b", llama3_405b()}};
  return m;
}

inline const std::map<std::string, HardwareProfile>& builtin_hardware() {
  static const std::map<std::string, HardwareProfile> h{{"gtt-h100", gtt_h100()}, {"gti-h100", gti_h100()}};
  return h;
}

inline ModelProfile model_profile(const std::string& name) {
  auto it = builtin_models().find(name);
  if (it == builtin_models().end()) throw ProfileError("unknown model profile '" + name + "'");
  return it->second;
}

inline HardwareProfile hardware_profile(const std::string& name) {
  auto it = builtin_hardware().find(name);
  if (it == builtin_hardware().end()) throw ProfileError("unknown hardware profile '" + name + "'");
  return it->second;
}

namespace detail {

inline double require_number(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j[key].is_number()) throw ProfileError(where + ": missing numeric key '" + key + "'");
  return j[key].get<double>();
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ProfileError("cannot open profile file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ProfileError(path + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelProfile& p) {
  return {{"kind", "model"},           {"name", p.name},           {"n_query_heads", p.n_query_heads},
          {"n_kv_heads", p.n_kv_heads}, {"model_dim", p.model_dim}, {"n_layers", p.n_layers},
          {"param_count", p.param_count}, {"elem_size", p.elem_size}};
}

inline nlohmann::json to_json(const HardwareProfile& p) {
  return {{"kind", "hardware"},
          {"name", p.name},
          {"gpus_per_node", p.gpus_per_node},
          {"peak_compute", p.peak_compute},
          {"compute_efficiency", p.compute_efficiency},
          {"bandwidth", p.bandwidth},
          {"bandwidth_efficiency", p.bandwidth_efficiency},
          {"sendrecv_latency_s", p.sendrecv_latency_s},
          {"a2a_base_s", p.a2a_base_s},
          {"a2a_per_byte_s", p.a2a_per_byte_s}};
}

inline ModelProfile model_from_json(const nlohmann::json& j, const std::string& where) {
  ModelProfile p;
  p.name = j.value("name", where);
  p.n_query_heads = detail::require_number(j, "n_query_heads", where);
  p.n_kv_heads = detail::require_number(j, "n_kv_heads", where);
  p.model_dim = detail::require_number(j, "model_dim", where);
  p.n_layers = detail::require_number(j, "n_layers", where);
  p.param_count = detail::require_number(j, "param_count", where);
  p.elem_size = detail::require_number(j, "elem_size", where);
  return p;
}

inline HardwareProfile hardware_from_json(const nlohmann::json& j, const std::string& where) {
  HardwareProfile p;
  p.name = j.value("name", where);
  p.gpus_per_node = static_cast<int>(detail::require_number(j, "gpus_per_node", where));
  p.peak_compute = detail::require_number(j, "peak_compute", where);
  p.compute_efficiency = j.value("compute_efficiency", 1.0);
  p.bandwidth = detail::require_number(j, "bandwidth", where);
  p.bandwidth_efficiency = j.value("bandwidth_efficiency", 1.0);
  p.sendrecv_latency_s = j.value("sendrecv_latency_s", 0.0);
  p.a2a_base_s = detail::require_number(j, "a2a_base_s", where);
  p.a2a_per_byte_s = detail::require_number(j, "a2a_per_byte_s", where);
  return p;
}

/// A profile reference resolves to a built-in name or, if it names an
/// existing file, a JSON profile whose "kind" is "model" or "hardware".
struct ProfileSet {
  std::optional<ModelProfile> model;
  std::optional<HardwareProfile> hardware;

  void add(const std::string& ref) {
    if (builtin_models().count(ref)) {
      model = model_profile(ref);
      return;
    }
    if (builtin_hardware().count(ref)) {
      hardware = hardware_profile(ref);
      return;
    }
    if (std::ifstream(ref).good()) {
      const auto j = detail::read_json(ref);
      const std::string kind = j.value("kind", "");
      if (kind == "model") {
        model = model_from_json(j, ref);
      } else if (kind == "hardware") {
        hardware = hardware_from_json(j, ref);
      } else {
        throw ProfileError(ref + ": \"kind\" must be \"model\" or \"hardware\"");
      }
      return;
    }
    throw ProfileError("unknown profile '" + ref + "'");
  }
};

/// Environment overrides, e.g. CP_BANDWIDTH=25e9. Malformed values are errors.
inline void apply_env_overrides(HardwareProfile& hw, ModelProfile& model) {
  auto read = [](const char* var) -> std::optional<double> {
    const char* raw = std::getenv(var);
    if (raw == nullptr || *raw == '\0') return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(raw, &end);
    if (end == raw || *end != '\0') throw ProfileError(std::string(var) + ": not a number: '" + raw + "'");
    return v;
  };
  if (auto v = read("CP_PEAK_COMPUTE")) hw.peak_compute = *v;
  if (auto v = read("CP_COMPUTE_EFFICIENCY")) hw.compute_efficiency = *v;
  if (auto v = read("CP_BANDWIDTH")) hw.bandwidth = *v;
  if (auto v = read("CP_BANDWIDTH_EFFICIENCY")) hw.bandwidth_efficiency = *v;
  if (auto v = read("CP_SENDRECV_LATENCY_S")) hw.sendrecv_latency_s = *v;
  if (auto v = read("CP_A2A_BASE_S")) hw.a2a_base_s = *v;
  if (auto v = read("CP_A2A_PER_BYTE_S")) hw.a2a_per_byte_s = *v;
  if (auto v = read("CP_GPUS_PER_NODE")) hw.gpus_per_node = static_cast<int>(*v);
  if (auto v = read("CP_ELEM_SIZE")) model.elem_size = *v;
}

/// Node-level cost model for `n_nodes` CP ranks.
inline CostModel make_cost_model(const ModelProfile& model, const HardwareProfile& hw, int n_nodes) {
  CostModel m;
  m.n_query_heads = model.n_query_heads;
  m.n_kv_heads = model.n_kv_heads;
  m.model_dim = model.model_dim;
  m.n_layers = model.n_layers;
  m.param_count = model.param_count;
  m.elem_size = model.elem_size;
  m.gpus_per_node = hw.gpus_per_node;
  m.peak_compute = hw.peak_compute * hw.gpus_per_node;
  m.compute_efficiency = hw.compute_efficiency;
  m.bandwidth = hw.bandwidth * hw.gpus_per_node;
  m.bandwidth_efficiency = hw.bandwidth_efficiency;
  m.sendrecv_latency_s = hw.sendrecv_latency_s;
  m.a2a = {hw.a2a_base_s, hw.a2a_per_byte_s};
  m.n_nodes = n_nodes;
  m.validate();
  return m;
}

}  // namespace cp
