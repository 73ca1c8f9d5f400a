#pragma once

// Multi-turn conversations driven through the ring engine and checked
// against the unsharded oracle.
//
// Scenario text format, one directive per line ('#' starts a comment):
//
//   model = llama3-405b          model profile used by adaptive selection
//   hardware = gtt-h100          hardware profile used by adaptive selection
//   ranks = 4                    number of CP ranks
//   seed = 7                     embedding seed
//   strategy = adaptive          pass-kv | pass-q | adaptive
//   selection = refined          refined | base (adaptive heuristic)
//   heads = 8 2                  query heads, kv heads
//   head_dim = 16
//   turn full_prefill 64 32      new tokens per sequence (defines the batch)
//   turn decode 16               decode iterations over the whole batch
//   turn partial_prefill 8 4     new tokens per sequence (0 skips a sequence)

#include <algorithm>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cp/kv_cache.hpp"
#include "cp/oracle.hpp"
#include "cp/perf_model.hpp"
#include "cp/profiles.hpp"
#include "cp/ring_engine.hpp"
#include "cp/rng.hpp"
#include "cp/sharding.hpp"
#include "cp/tensor.hpp"
#include "json.hpp"

namespace cp {

enum class Strategy { pass_kv, pass_q, adaptive };
enum class TurnKind { full_prefill, partial_prefill, decode };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::pass_kv: return "pass-kv";
    case Strategy::pass_q: return "pass-q";
    case Strategy::adaptive: return "adaptive";
  }
  return "?";
}

inline const char* to_string(TurnKind k) {
  switch (k) {
    case TurnKind::full_prefill: return "full_prefill";
    case TurnKind::partial_prefill: return "partial_prefill";
    case TurnKind::decode: return "decode";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(const std::string& s) {
  if (s == "pass-kv" || s == "pass_kv") return Strategy::pass_kv;
  if (s == "pass-q" || s == "pass_q") return Strategy::pass_q;
  if (s == "adaptive") return Strategy::adaptive;
  return std::nullopt;
}

struct Turn {
  TurnKind kind = TurnKind::full_prefill;
  std::vector<std::int64_t> lengths;  // prefill: new tokens per sequence
  int repeat = 1;                     // decode iterations
};

struct Scenario {
  std::string model = "llama3-405b";
  std::string hardware = "gtt-h100";
  int n_ranks = 1;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::adaptive;
  bool refined_selection = true;
  GqaConfig attention{4, 2, 8, 0.0};
  std::vector<Turn> turns;
};

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Scenario parse_scenario(std::istream& in) {
  Scenario sc;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& key, const std::string& msg) -> ScenarioError {
    return ScenarioError("line " + std::to_string(line_no) + ": key '" + key + "': " + msg);
  };
  auto to_int = [&](const std::string& key, const std::string& text) -> std::int64_t {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (const std::exception&) {
      throw fail(key, "expected an integer, got '" + text + "'");
    }
    if (used != text.size()) throw fail(key, "expected an integer, got '" + text + "'");
    return v;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream words(line);
    std::string first;
    if (!(words >> first)) continue;

    if (first == "turn") {
      std::string kind;
      if (!(words >> kind)) throw fail("turn", "missing turn kind");
      Turn t;
      std::vector<std::string> args;
      for (std::string w; words >> w;) args.push_back(w);
      if (kind == "full_prefill" || kind == "partial_prefill") {
        t.kind = kind == "full_prefill" ? TurnKind::full_prefill : TurnKind::partial_prefill;
        if (args.empty()) throw fail("turn", kind + " needs at least one sequence length");
        for (const auto& a : args) {
          const auto v = to_int("turn", a);
          if (v < 0 || (t.kind == TurnKind::full_prefill && v == 0)) throw fail("turn", "invalid length " + a);
          t.lengths.push_back(v);
        }
      } else if (kind == "decode") {
        t.kind = TurnKind::decode;
        if (args.size() > 1) throw fail("turn", "decode takes one repeat count");
        t.repeat = args.empty() ? 1 : static_cast<int>(to_int("turn", args[0]));
        if (t.repeat < 1) throw fail("turn", "decode repeat must be >= 1");
      } else {
        throw fail("turn", "unknown turn kind '" + kind + "'");
      }
      sc.turns.push_back(std::move(t));
      continue;
    }

    std::string eq;
    if (!(words >> eq) || eq != "=") throw fail(first, "expected 'key = value'");
    std::vector<std::string> vals;
    for (std::string w; words >> w;) vals.push_back(w);
    if (vals.empty()) throw fail(first, "missing value");
    auto single = [&]() -> const std::string& {
      if (vals.size() != 1) throw fail(first, "expected a single value");
      return vals[0];
    };

    if (first == "model") {
      sc.model = single();
    } else if (first == "hardware") {
      sc.hardware = single();
    } else if (first == "ranks") {
      sc.n_ranks = static_cast<int>(to_int(first, single()));
      if (sc.n_ranks < 1) throw fail(first, "must be >= 1");
    } else if (first == "seed") {
      const auto v = to_int(first, single());
      if (v < 0) throw fail(first, "must be non-negative");
      sc.seed = static_cast<std::uint64_t>(v);
    } else if (first == "strategy") {
      auto s = parse_strategy(single());
      if (!s) throw fail(first, "expected pass-kv, pass-q or adaptive");
      sc.strategy = *s;
    } else if (first == "selection") {
      const auto& v = single();
      if (v != "refined" && v != "base") throw fail(first, "expected refined or base");
      sc.refined_selection = v == "refined";
    } else if (first == "heads") {
      if (vals.size() != 2) throw fail(first, "expected '<query heads> <kv heads>'");
      const auto nq = to_int(first, vals[0]);
      const auto nkv = to_int(first, vals[1]);
      if (nq < 1 || nkv < 1 || nq % nkv != 0) throw fail(first, "query heads must be a positive multiple of kv heads");
      sc.attention.n_query_heads = static_cast<std::size_t>(nq);
      sc.attention.n_kv_heads = static_cast<std::size_t>(nkv);
    } else if (first == "head_dim") {
      const auto d = to_int(first, single());
      if (d < 1) throw fail(first, "must be >= 1");
      sc.attention.head_dim = static_cast<std::size_t>(d);
    } else {
      throw fail(first, "unknown key");
    }
  }
  if (sc.turns.empty()) throw ScenarioError("scenario has no turns");
  return sc;
}

inline Scenario parse_scenario(const std::string& text) {
  std::istringstream in(text);
  return parse_scenario(in);
}

/// Deterministic embeddings: every (seed, seq, pos, tensor) maps to the same
/// values on every platform.
class TokenGenerator {
 public:
  enum class Tensor : std::uint64_t { query = 1, key = 2, value = 3 };

  TokenGenerator(std::uint64_t seed, GqaConfig cfg) : seed_(seed), cfg_(cfg) {}

  std::vector<float> values(std::int64_t seq, std::int64_t pos, Tensor t) const {
    const std::size_t heads = t == Tensor::query ? cfg_.n_query_heads : cfg_.n_kv_heads;
    std::vector<float> out(heads * cfg_.head_dim);
    SplitMix64 rng(stream_key(seed_, static_cast<std::uint64_t>(seq), static_cast<std::uint64_t>(pos), static_cast<std::uint64_t>(t)));
    for (auto& x : out) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return out;
  }

  TokenTag tag(std::int64_t seq, std::int64_t pos) const { return {seq, pos, true}; }

  /// q/k/v rows for a rank's plan slots (padding rows stay zero).
  PrefillInputs prefill_inputs(const std::vector<TokenSlot>& slots) const {
    PrefillInputs in{Embeddings(cfg_.n_query_heads, cfg_.head_dim), Embeddings(cfg_.n_kv_heads, cfg_.head_dim),
                     Embeddings(cfg_.n_kv_heads, cfg_.head_dim)};
    for (const auto& s : slots) {
      if (!s.valid) {
        in.q.push_padding();
        in.k.push_padding();
        in.v.push_padding();
        continue;
      }
      in.q.push_token(tag(s.seq, s.pos), values(s.seq, s.pos, Tensor::query));
      in.k.push_token(tag(s.seq, s.pos), values(s.seq, s.pos, Tensor::key));
      in.v.push_token(tag(s.seq, s.pos), values(s.seq, s.pos, Tensor::value));
    }
    return in;
  }

  DecodeToken decode_token(std::int64_t seq, std::int64_t pos) const {
    DecodeToken t{Embeddings(cfg_.n_query_heads, cfg_.head_dim), Embeddings(cfg_.n_kv_heads, cfg_.head_dim),
                  Embeddings(cfg_.n_kv_heads, cfg_.head_dim)};
    t.q.push_token(tag(seq, pos), values(seq, pos, Tensor::query));
    t.k.push_token(tag(seq, pos), values(seq, pos, Tensor::key));
    t.v.push_token(tag(seq, pos), values(seq, pos, Tensor::value));
    return t;
  }

 private:
  std::uint64_t seed_;
  GqaConfig cfg_;
};

/// One ring call: a prefill turn or one decode iteration.
struct CallRecord {
  std::size_t turn = 0;
  std::size_t iteration = 0;
  TurnKind kind = TurnKind::full_prefill;
  Protocol protocol = Protocol::pass_kv;
  std::int64_t new_tokens = 0;
  std::int64_t cached_tokens = 0;
  double max_rel_error = 0.0;
  std::uint64_t digest = 0;
  StepTrace trace;
  nlohmann::json plan;
};

struct Transcript {
  int n_ranks = 1;
  std::vector<CallRecord> calls;
  std::vector<std::int64_t> seq_ids;
  std::vector<std::vector<std::int64_t>> cached_len;  // [seq][rank] after the last call

  double max_rel_error() const {
    double e = 0.0;
    for (const auto& c : calls) e = std::max(e, c.max_rel_error);
    return e;
  }

  std::string to_text() const {
    std::string out;
    char buf[512];
    for (const auto& c : calls) {
      std::snprintf(buf, sizeof buf,
                    "turn=%zu iter=%zu kind=%s protocol=%s T=%" PRId64 " P=%" PRId64
                    " ring_steps=%d a2a_rounds=%d bytes=%" PRIu64 " max_rel_err=%.6e digest=%016" PRIx64 "\n",
                    c.turn, c.iteration, to_string(c.kind), to_string(c.protocol), c.new_tokens, c.cached_tokens,
                    static_cast<int>(c.trace.ring.size() / static_cast<std::size_t>(std::max(1, n_ranks))),
                    c.trace.all_to_all_rounds(), c.trace.total_bytes(), c.max_rel_error, c.digest);
      out += buf;
    }
    return out;
  }

  std::string trace_csv() const {
    std::string out = "turn,iter,step,rank,kind,bytes,pairs\n";
    for (const auto& c : calls) {
      out += to_csv(c.trace, false, std::to_string(c.turn) + "," + std::to_string(c.iteration));
    }
    return out;
  }

  std::string cache_csv() const {
    std::ostringstream os;
    os << "seq_id,rank,cached_len\n";
    for (std::size_t i = 0; i < seq_ids.size(); ++i) {
      for (std::size_t r = 0; r < cached_len[i].size(); ++r) os << seq_ids[i] << ',' << r << ',' << cached_len[i][r] << '\n';
    }
    return os.str();
  }
};

struct RunOptions {
  Executor executor = Executor::round_based;
  bool rotate_merge_weights = false;
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t digest(const std::vector<PartialAttention>& outputs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : outputs) {
    h = fnv1a(h, p.output.data().data(), p.output.data().size_bytes());
    h = fnv1a(h, p.lse.data(), p.lse.size() * sizeof(double));
  }
  return h;
}

/// Max relative error of every valid output row against the oracle.
inline double compare_with_oracle(const std::vector<PartialAttention>& outputs, const std::vector<Embeddings>& queries,
                                  const DenseOracle& oracle) {
  double worst = 0.0;
  for (std::size_t r = 0; r < outputs.size(); ++r) {
    const auto& out = outputs[r];
    for (std::size_t t = 0; t < out.num_tokens(); ++t) {
      const TokenTag& tag = out.output.tag(t);
      if (!tag.valid) continue;
      const auto ref = oracle.attend(tag.seq, tag.pos, queries[r].token(t));
      const auto got = out.output.token(t);
      for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, relative_error(got[i], ref.output[i]));
      for (std::size_t h = 0; h < ref.lse.size(); ++h) worst = std::max(worst, relative_error(out.lse_at(t, h), ref.lse[h]));
    }
  }
  return worst;
}

}  // namespace detail

/// Executes every turn on n_ranks simulated ranks and records, per call,
/// the protocol used, the trace and the max relative error vs the oracle.
class ConversationRunner {
 public:
  /// `cost` overrides the profile-derived model used by adaptive selection.
  ConversationRunner(Scenario sc, RunOptions opt, std::optional<CostModel> cost = std::nullopt)
      : sc_(std::move(sc)),
        opt_(opt),
        gen_(sc_.seed, sc_.attention),
        oracle_(sc_.attention),
        caches_(static_cast<std::size_t>(sc_.n_ranks), RankKvCache(sc_.attention.n_kv_heads, sc_.attention.head_dim)) {
    sc_.attention.validate();
    if (cost) {
      cost_ = cost->with_nodes(sc_.n_ranks);
    } else if (sc_.strategy == Strategy::adaptive) {
      cost_ = make_cost_model(model_profile(sc_.model), hardware_profile(sc_.hardware), sc_.n_ranks);
    }
  }

  Transcript run() {
    Transcript tr;
    tr.n_ranks = sc_.n_ranks;
    for (std::size_t i = 0; i < sc_.turns.size(); ++i) {
      const Turn& turn = sc_.turns[i];
      if (turn.kind == TurnKind::decode) {
        for (int it = 0; it < turn.repeat; ++it) tr.calls.push_back(decode(i, static_cast<std::size_t>(it)));
      } else {
        tr.calls.push_back(prefill(i, turn));
      }
    }
    tr.seq_ids = seq_ids_;
    for (auto id : seq_ids_) {
      std::vector<std::int64_t> row;
      for (const auto& c : caches_) row.push_back(c.cached_len(id));
      tr.cached_len.push_back(std::move(row));
    }
    return tr;
  }

  const std::vector<RankKvCache>& caches() const { return caches_; }

 private:
  RingOptions ring_options() const { return {opt_.executor, opt_.rotate_merge_weights}; }

  CallRecord prefill(std::size_t turn_index, const Turn& turn) {
    const int n = sc_.n_ranks;
    std::vector<SequenceSpec> batch;
    if (turn.kind == TurnKind::full_prefill) {
      if (!seq_ids_.empty()) throw ScenarioError("turn " + std::to_string(turn_index) + ": full_prefill after the batch exists");
      for (std::size_t s = 0; s < turn.lengths.size(); ++s) {
        seq_ids_.push_back(static_cast<std::int64_t>(s));
        batch.push_back({static_cast<std::int64_t>(s), 0, turn.lengths[s]});
      }
    } else {
      if (turn.lengths.size() > seq_ids_.size()) {
        throw ScenarioError("turn " + std::to_string(turn_index) + ": partial_prefill references unknown sequence " +
                            std::to_string(seq_ids_.size()));
      }
      for (std::size_t s = 0; s < turn.lengths.size(); ++s) {
        if (turn.lengths[s] == 0) continue;
        batch.push_back({seq_ids_[s], oracle_.length(seq_ids_[s]), turn.lengths[s]});
      }
      if (batch.empty()) throw ScenarioError("turn " + std::to_string(turn_index) + ": partial_prefill with no new tokens");
    }

    ShardPlan plan = [&] {
      if (turn.kind == TurnKind::full_prefill) return plan_full_prefill(batch, n);
      std::vector<std::vector<std::int64_t>> layout;
      for (const auto& s : batch) {
        std::vector<std::int64_t> row;
        for (const auto& c : caches_) row.push_back(c.cached_len(s.seq_id));
        layout.push_back(std::move(row));
      }
      return plan_partial_prefill(batch, n, layout);
    }();

    for (const auto& s : batch) {
      for (std::int64_t p = s.cached_len; p < s.cached_len + s.new_len; ++p) {
        oracle_.add_token(s.seq_id, p, gen_.values(s.seq_id, p, TokenGenerator::Tensor::key),
                          gen_.values(s.seq_id, p, TokenGenerator::Tensor::value));
      }
    }
    std::vector<PrefillInputs> inputs;
    for (int r = 0; r < n; ++r) inputs.push_back(gen_.prefill_inputs(plan.rank_slots(r)));

    const PrefillShape shape{static_cast<double>(plan.total_new_tokens()), static_cast<double>(plan.total_cached_tokens())};
    const Protocol protocol = select(shape);
    RingResult res = protocol == Protocol::pass_kv
                         ? ring_pass_kv_prefill(plan, caches_, inputs, sc_.attention, ring_options())
                         : ring_pass_q_prefill(plan, caches_, inputs, sc_.attention, ring_options());

    std::vector<Embeddings> queries;
    for (auto& in : inputs) queries.push_back(std::move(in.q));
    CallRecord rec;
    rec.turn = turn_index;
    rec.kind = turn.kind;
    rec.protocol = protocol;
    rec.new_tokens = plan.total_new_tokens();
    rec.cached_tokens = plan.total_cached_tokens();
    rec.max_rel_error = detail::compare_with_oracle(res.outputs, queries, oracle_);
    rec.digest = detail::digest(res.outputs);
    rec.trace = std::move(res.trace);
    rec.plan = to_json(plan);
    return rec;
  }

  CallRecord decode(std::size_t turn_index, std::size_t iteration) {
    if (seq_ids_.empty()) throw ScenarioError("turn " + std::to_string(turn_index) + ": decode before any prefill");
    const DecodeAssignment assignment = plan_decode(seq_ids_, sc_.n_ranks, decode_iteration_++);
    std::vector<DecodeToken> tokens;
    std::int64_t history = 0;
    for (auto id : seq_ids_) {
      const std::int64_t pos = oracle_.length(id);
      history += pos;
      tokens.push_back(gen_.decode_token(id, pos));
      oracle_.add_token(id, pos, tokens.back().k.token(0), tokens.back().v.token(0));
    }
    RingResult res = ring_pass_q_decode(assignment, caches_, tokens, sc_.attention, ring_options());

    std::vector<Embeddings> queries;
    for (int r = 0; r < sc_.n_ranks; ++r) {
      Embeddings q(sc_.attention.n_query_heads, sc_.attention.head_dim);
      for (const auto& slot : assignment.per_rank[static_cast<std::size_t>(r)]) q.append(tokens[slot.slot].q);
      q.push_padding(assignment.padded_queries() - q.num_tokens());
      queries.push_back(std::move(q));
    }
    CallRecord rec;
    rec.turn = turn_index;
    rec.iteration = iteration;
    rec.kind = TurnKind::decode;
    rec.protocol = Protocol::pass_q;
    rec.new_tokens = static_cast<std::int64_t>(seq_ids_.size());
    rec.cached_tokens = history;
    rec.max_rel_error = detail::compare_with_oracle(res.outputs, queries, oracle_);
    rec.digest = detail::digest(res.outputs);
    rec.trace = std::move(res.trace);
    nlohmann::json per_rank = nlohmann::json::array();
    for (const auto& slots : assignment.per_rank) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& s : slots) row.push_back({{"seq_id", s.seq_id}, {"slot", s.slot}});
      per_rank.push_back(row);
    }
    rec.plan = {{"n_ranks", assignment.n_ranks}, {"iteration", decode_iteration_ - 1}, {"per_rank", per_rank}};
    return rec;
  }

  Protocol select(const PrefillShape& shape) const {
    switch (sc_.strategy) {
      case Strategy::pass_kv: return Protocol::pass_kv;
      case Strategy::pass_q: return Protocol::pass_q;
      case Strategy::adaptive: return choose_strategy(shape, *cost_, sc_.refined_selection);
    }
    return Protocol::pass_kv;
  }

  Scenario sc_;
  RunOptions opt_;
  TokenGenerator gen_;
  DenseOracle oracle_;
  std::vector<RankKvCache> caches_;
  std::optional<CostModel> cost_;
  std::vector<std::int64_t> seq_ids_;
  std::uint64_t decode_iteration_ = 0;
};

/// Runs a scenario end to end.
inline Transcript run_turns(const Scenario& sc, const RunOptions& opt = {}, std::optional<CostModel> cost = std::nullopt) {
  return ConversationRunner(sc, opt, std::move(cost)).run();
}

}  // namespace cp
