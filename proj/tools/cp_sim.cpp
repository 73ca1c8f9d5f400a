// cp_sim: run context-parallel attention scenarios against the dense oracle
// and emit performance-model tables.
//
// Exit codes: 0 all checks pass, 1 verification failure, 2 configuration error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cp/cp.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kConfigError = 2;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_file(path, text);
  }
}

cp::CostModel resolve_cost_model(const std::vector<std::string>& refs, const std::string& default_model,
                                 const std::string& default_hardware, int n_ranks) {
  cp::ProfileSet set;
  set.add(default_model);
  set.add(default_hardware);
  for (const auto& r : refs) set.add(r);
  cp::ModelProfile model = *set.model;
  cp::HardwareProfile hw = *set.hardware;
  cp::apply_env_overrides(hw, model);
  return cp::make_cost_model(model, hw, n_ranks);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
    if (used != item.size()) throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

struct VerifyArgs {
  std::string scenario;
  std::optional<int> ranks;
  std::string strategy;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> profiles;
  std::string executor = "round";
  std::string transcript;
  std::string csv;
  std::string cache_csv;
  std::string dump_plan;
  double tolerance = 1e-6;
  bool corrupt_merge = false;
  bool quiet = false;
};

int cmd_verify(const VerifyArgs& a) {
  std::ifstream in(a.scenario);
  if (!in) throw ConfigError("cannot open scenario " + a.scenario);
  cp::Scenario sc;
  try {
    sc = cp::parse_scenario(in);
  } catch (const cp::ScenarioError& e) {
    throw ConfigError(a.scenario + ": " + e.what());
  }
  if (a.ranks) sc.n_ranks = *a.ranks;
  if (a.seed) sc.seed = *a.seed;
  if (!a.strategy.empty()) {
    auto s = cp::parse_strategy(a.strategy);
    if (!s) throw ConfigError("--strategy must be pass-kv, pass-q or adaptive");
    sc.strategy = *s;
  }
  if (a.executor != "round" && a.executor != "concurrent") throw ConfigError("--executor must be round or concurrent");

  cp::RunOptions opt{a.executor == "round" ? cp::Executor::round_based : cp::Executor::concurrent, a.corrupt_merge};
  std::optional<cp::CostModel> cost;
  if (sc.strategy == cp::Strategy::adaptive) cost = resolve_cost_model(a.profiles, sc.model, sc.hardware, sc.n_ranks);

  cp::Transcript tr;
  try {
    tr = cp::run_turns(sc, opt, cost);
  } catch (const cp::ScenarioError& e) {
    throw ConfigError(a.scenario + ": " + e.what());
  }

  bool pass = true;
  for (const auto& c : tr.calls) {
    const bool ok = c.max_rel_error <= a.tolerance;
    pass = pass && ok;
    if (!a.quiet) {
      std::printf("turn %zu iter %zu %-15s %-7s T=%lld P=%lld max_rel_err=%.3e %s\n", c.turn, c.iteration,
                  cp::to_string(c.kind), cp::to_string(c.protocol), static_cast<long long>(c.new_tokens),
                  static_cast<long long>(c.cached_tokens), c.max_rel_error, ok ? "PASS" : "FAIL");
    }
  }
  std::printf("%s: %zu calls, ranks=%d, max_rel_err=%.3e (tolerance %.1e)\n", pass ? "PASS" : "FAIL", tr.calls.size(),
              sc.n_ranks, tr.max_rel_error(), a.tolerance);

  if (!a.transcript.empty()) emit(a.transcript, tr.to_text());
  if (!a.csv.empty()) emit(a.csv, tr.trace_csv());
  if (!a.cache_csv.empty()) emit(a.cache_csv, tr.cache_csv());
  if (!a.dump_plan.empty()) {
    nlohmann::json plans = nlohmann::json::array();
    for (const auto& c : tr.calls) {
      plans.push_back({{"turn", c.turn}, {"iteration", c.iteration}, {"kind", cp::to_string(c.kind)}, {"plan", c.plan}});
    }
    emit(a.dump_plan, plans.dump(2) + "\n");
  }
  return pass ? kOk : kVerifyFailed;
}

struct SweepArgs {
  double total = 128000;
  std::string rates = "1,2.5,3.25,5,10,20,30,40,50,60,70,80,90,100";
  int ranks = 4;
  std::vector<std::string> profiles;
  bool execute = false;
  std::int64_t desk_context = 512;
  std::uint64_t seed = 0;
  std::string csv;
};

int cmd_sweep(const SweepArgs& a) {
  if (a.ranks < 1) throw ConfigError("--ranks must be >= 1");
  const cp::CostModel m = resolve_cost_model(a.profiles, "llama3-405b", "gtt-h100", a.ranks);
  std::vector<double> rates;
  for (double pct : parse_list(a.rates)) rates.push_back(pct / 100.0);
  std::optional<cp::SweepExecution> exec;
  if (a.execute) {
    exec = cp::SweepExecution{};
    exec->context = a.desk_context;
    exec->seed = a.seed;
  }
  std::vector<cp::SweepRow> rows;
  try {
    rows = cp::sweep_miss_rate(a.total, rates, m, exec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  emit(a.csv, cp::sweep_csv(rows));
  for (const auto& r : rows) {
    if (r.executed && r.executed->max_rel_error > 1e-6) return kVerifyFailed;
  }
  return kOk;
}

struct ScalingArgs {
  std::string tokens = "2000,8000,32000,128000";
  std::string ranks = "1,2,4,8";
  std::vector<std::string> profiles;
  std::string csv;
};

int cmd_scaling(const ScalingArgs& a) {
  const cp::CostModel m = resolve_cost_model(a.profiles, "llama3-405b", "gtt-h100", 1);
  std::vector<int> nodes;
  for (double n : parse_list(a.ranks)) {
    if (n < 1) throw ConfigError("--ranks entries must be >= 1");
    nodes.push_back(static_cast<int>(n));
  }
  emit(a.csv, cp::scaling_csv(cp::scaling_table(parse_list(a.tokens), nodes, m)));
  return kOk;
}

struct MfuArgs {
  double tokens = 1e6;
  int gpus = 128;
  double latency = 77;
  std::vector<std::string> profiles;
};

int cmd_mfu(const MfuArgs& a) {
  const cp::CostModel m = resolve_cost_model(a.profiles, "llama3-405b", "gtt-h100", 1);
  if (a.latency <= 0 || a.gpus <= 0) throw ConfigError("--latency and --gpus must be positive");
  std::cout << cp::mfu_text(a.tokens, a.gpus, a.latency, m);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-parallel attention simulator and performance model"};
  app.require_subcommand(1);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Run a scenario on the ring engine and check it against the dense oracle");
  verify->add_option("--scenario", va.scenario, "Scenario file")->required();
  verify->add_option("--ranks", va.ranks, "Override the number of CP ranks");
  verify->add_option("--strategy", va.strategy, "pass-kv | pass-q | adaptive");
  verify->add_option("--seed", va.seed, "Override the embedding seed");
  verify->add_option("--profile", va.profiles, "Model/hardware profile name or JSON file (repeatable)");
  verify->add_option("--executor", va.executor, "round | concurrent");
  verify->add_option("--transcript", va.transcript, "Write the transcript to this path ('-' for stdout)");
  verify->add_option("--csv", va.csv, "Write the step trace CSV to this path");
  verify->add_option("--cache-csv", va.cache_csv, "Write the per-rank cached_len table to this path");
  verify->add_option("--dump-plan", va.dump_plan, "Write every call's shard plan as JSON to this path");
  verify->add_option("--tolerance", va.tolerance, "Max relative error");
  verify->add_flag("--corrupt-merge", va.corrupt_merge, "Test hook: corrupt merge weights (must FAIL)")->group("");
  verify->add_flag("--quiet", va.quiet, "Only print the summary line");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Predicted pass-KV vs pass-Q latency over KV cache miss rates");
  sweep->add_option("--total", sa.total, "T + P");
  sweep->add_option("--rates", sa.rates, "Comma-separated miss rates in percent");
  sweep->add_option("--ranks", sa.ranks, "CP ranks");
  sweep->add_option("--profile", sa.profiles, "Model/hardware profile name or JSON file (repeatable)");
  sweep->add_flag("--execute", sa.execute, "Also run the ring engine at desk scale");
  sweep->add_option("--desk-context", sa.desk_context, "T + P used by --execute");
  sweep->add_option("--seed", sa.seed, "Embedding seed for --execute");
  sweep->add_option("--csv", sa.csv, "Output CSV path (default stdout)");

  ScalingArgs ca;
  auto* scaling = app.add_subcommand("scaling", "Modeled full-prefill latency and scaling ratio per (T, N)");
  scaling->add_option("--tokens", ca.tokens, "Comma-separated context lengths");
  scaling->add_option("--ranks", ca.ranks, "Comma-separated CP node counts");
  scaling->add_option("--profile", ca.profiles, "Model/hardware profile name or JSON file (repeatable)");
  scaling->add_option("--csv", ca.csv, "Output CSV path (default stdout)");

  MfuArgs ma;
  auto* mfu = app.add_subcommand("mfu", "Model FLOPS utilization of a measured prefill");
  mfu->add_option("--tokens", ma.tokens, "Context length");
  mfu->add_option("--gpus", ma.gpus, "Total GPUs");
  mfu->add_option("--latency", ma.latency, "Measured latency in seconds");
  mfu->add_option("--profile", ma.profiles, "Model/hardware profile name or JSON file (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (verify->parsed()) return cmd_verify(va);
    if (sweep->parsed()) return cmd_sweep(sa);
    if (scaling->parsed()) return cmd_scaling(ca);
    if (mfu->parsed()) return cmd_mfu(ma);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const cp::ProfileError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}
