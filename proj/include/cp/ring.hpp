#pragma once

// Simulated ring transport: per-(src, dst) FIFO channels, a ring rotation
// driver and a pairwise all-to-all, each runnable round-based on the calling
// thread or with one thread per rank. Both executors run the same per-rank
// code, so results do not depend on the schedule.

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace cp {

struct RingTopology {
  int n_ranks = 1;

  int next(int k) const { return (k + 1) % n_ranks; }
  int prev(int k) const { return (k - 1 + n_ranks) % n_ranks; }
  /// Original owner of the block resident on rank k at ring step j.
  int source_at(int k, int j) const { return ((k - j) % n_ranks + n_ranks) % n_ranks; }
};

enum class Executor { round_based, concurrent };

enum class MessageKind { kv, q, a2a, none };

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::kv: return "KV";
    case MessageKind::q: return "Q";
    case MessageKind::a2a: return "A2A";
    case MessageKind::none: return "-";
  }
  return "?";
}

struct TraceRecord {
  int step = 0;
  int rank = 0;
  MessageKind kind = MessageKind::none;
  std::uint64_t bytes = 0;
  std::uint64_t pairs = 0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

/// Per-call record of ring steps and the all-to-all that follows pass-Q.
/// Ring rows use step = 0..N-1 (the last step computes without sending);
/// all-to-all rows use step = round 1..N-1.
struct StepTrace {
  int n_ranks = 1;
  std::vector<TraceRecord> ring;
  std::vector<TraceRecord> all_to_all;

  int ring_sends_per_rank(int rank) const {
    int n = 0;
    for (const auto& r : ring) n += (r.rank == rank && r.bytes > 0) ? 1 : 0;
    return n;
  }

  int all_to_all_rounds() const {
    int n = 0;
    for (const auto& r : all_to_all) n = std::max(n, r.step);
    return n;
  }

  std::uint64_t total_bytes() const {
    std::uint64_t n = 0;
    for (const auto& r : ring) n += r.bytes;
    for (const auto& r : all_to_all) n += r.bytes;
    return n;
  }

  /// True when every rank sent the same byte count within each step.
  bool equal_message_sizes() const {
    auto check = [](const std::vector<TraceRecord>& rows) {
      for (const auto& a : rows) {
        for (const auto& b : rows) {
          if (a.step == b.step && a.bytes != b.bytes) return false;
        }
      }
      return true;
    };
    return check(ring) && check(all_to_all);
  }

  friend bool operator==(const StepTrace&, const StepTrace&) = default;
};

/// Unbounded blocking FIFO. Sends never block, so a program in which every
/// receive has a matching send cannot deadlock.
template <class T>
class Channel {
 public:
  void send(T value) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(value));
    }
    cv_.notify_one();
  }

  T receive() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() || closed_; });
    if (queue_.empty()) throw std::runtime_error("Channel::receive: channel closed by a failing peer");
    T v = std::move(queue_.front());
    queue_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool empty() const {
    std::lock_guard lock(mu_);
    return queue_.empty();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> queue_;
  bool closed_ = false;
};

/// Full mesh of point-to-point channels; channel(src, dst).
template <class T>
class Mesh {
 public:
  explicit Mesh(int n) : n_(n), channels_(static_cast<std::size_t>(n) * static_cast<std::size_t>(n)) {}

  Channel<T>& channel(int src, int dst) { return channels_[static_cast<std::size_t>(src * n_ + dst)]; }

  void close_all() {
    for (auto& c : channels_) c.close();
  }

  bool drained() const {
    for (const auto& c : channels_) {
      if (!c.empty()) return false;
    }
    return true;
  }

 private:
  int n_;
  std::vector<Channel<T>> channels_;
};

namespace detail {

/// Runs body(rank) on one thread per rank and rethrows the first failure.
inline void run_ranks(int n, const std::function<void(int)>& body, const std::function<void()>& on_failure) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  {
    std::vector<std::jthread> threads;
    threads.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      threads.emplace_back([&, k] {
        try {
          body(k);
        } catch (...) {
          errors[static_cast<std::size_t>(k)] = std::current_exception();
          on_failure();
        }
      });
    }
  }
  // Prefer a root-cause error over the "channel closed" errors it triggers.
  std::exception_ptr first;
  for (int k = 0; k < n; ++k) {
    auto& e = errors[static_cast<std::size_t>(k)];
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const std::runtime_error& ex) {
      if (std::string(ex.what()).find("channel closed") == std::string::npos) std::rethrow_exception(e);
      if (!first) first = e;
    } catch (...) {
      std::rethrow_exception(e);
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace detail

/// Rotates one block per rank around the ring for N steps. At step j rank k
/// holds the block that originated on rank (k - j) mod N and calls
/// compute(k, j, source, block); after steps 0..N-2 it forwards the block to
/// next(k) and takes the one arriving from prev(k). Returns per-rank send
/// records (bytes_of(block) for steps that send, 0 for the final step).
template <class Msg, class Compute, class BytesOf>
std::vector<TraceRecord> ring_rotate(RingTopology topo, std::vector<Msg> resident, Compute&& compute, BytesOf&& bytes_of,
                                     MessageKind kind, Executor executor) {
  const int n = topo.n_ranks;
  if (static_cast<int>(resident.size()) != n) throw std::invalid_argument("ring_rotate: one block per rank required");
  Mesh<Msg> mesh(n);
  std::vector<std::vector<TraceRecord>> log(static_cast<std::size_t>(n));

  auto send_phase = [&](int k, int j) {
    auto& r = resident[static_cast<std::size_t>(k)];
    const std::uint64_t bytes = j < n - 1 ? bytes_of(r) : 0;
    log[static_cast<std::size_t>(k)].push_back({j, k, j < n - 1 ? kind : MessageKind::none, bytes, 0});
    if (j < n - 1) mesh.channel(k, topo.next(k)).send(r);
  };
  auto compute_phase = [&](int k, int j) {
    const std::uint64_t pairs = compute(k, j, topo.source_at(k, j), std::as_const(resident[static_cast<std::size_t>(k)]));
    log[static_cast<std::size_t>(k)].back().pairs = pairs;
  };
  auto receive_phase = [&](int k, int j) {
    if (j < n - 1) resident[static_cast<std::size_t>(k)] = mesh.channel(topo.prev(k), k).receive();
  };

  if (executor == Executor::round_based) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) send_phase(k, j);
      for (int k = 0; k < n; ++k) compute_phase(k, j);
      for (int k = 0; k < n; ++k) receive_phase(k, j);
    }
  } else {
    detail::run_ranks(
        n,
        [&](int k) {
          for (int j = 0; j < n; ++j) {
            send_phase(k, j);
            compute_phase(k, j);
            receive_phase(k, j);
          }
        },
        [&] { mesh.close_all(); });
  }
  if (!mesh.drained()) throw std::logic_error("ring_rotate: undelivered messages left in the ring");

  std::vector<TraceRecord> out;
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < n; ++k) out.push_back(log[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
  }
  return out;
}

/// Pairwise all-to-all: outbox[src][dst] -> inbox[dst][src]. Round r = 1..N-1
/// has rank k send to (k + r) mod N and receive from (k - r) mod N; the
/// diagonal entry stays local.
template <class Msg, class BytesOf>
std::pair<std::vector<std::vector<Msg>>, std::vector<TraceRecord>> all_to_all(RingTopology topo,
                                                                             std::vector<std::vector<Msg>> outbox,
                                                                             BytesOf&& bytes_of, Executor executor) {
  const int n = topo.n_ranks;
  if (static_cast<int>(outbox.size()) != n) throw std::invalid_argument("all_to_all: outbox rank count mismatch");
  for (const auto& row : outbox) {
    if (static_cast<int>(row.size()) != n) throw std::invalid_argument("all_to_all: payload count != n_ranks");
  }
  Mesh<Msg> mesh(n);
  std::vector<std::vector<std::optional<Msg>>> inbox(static_cast<std::size_t>(n),
                                                     std::vector<std::optional<Msg>>(static_cast<std::size_t>(n)));
  std::vector<std::vector<TraceRecord>> log(static_cast<std::size_t>(n));

  auto keep_local = [&](int k) {
    inbox[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)] = std::move(outbox[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]);
  };
  auto send_round = [&](int k, int r) {
    const int dst = (k + r) % n;
    auto& payload = outbox[static_cast<std::size_t>(k)][static_cast<std::size_t>(dst)];
    log[static_cast<std::size_t>(k)].push_back({r, k, MessageKind::a2a, bytes_of(payload), 0});
    mesh.channel(k, dst).send(std::move(payload));
  };
  auto receive_round = [&](int k, int r) {
    const int src = (k - r + n) % n;
    inbox[static_cast<std::size_t>(k)][static_cast<std::size_t>(src)] = mesh.channel(src, k).receive();
  };

  if (executor == Executor::round_based) {
    for (int k = 0; k < n; ++k) keep_local(k);
    for (int r = 1; r < n; ++r) {
      for (int k = 0; k < n; ++k) send_round(k, r);
      for (int k = 0; k < n; ++k) receive_round(k, r);
    }
  } else {
    detail::run_ranks(
        n,
        [&](int k) {
          keep_local(k);
          for (int r = 1; r < n; ++r) {
            send_round(k, r);
            receive_round(k, r);
          }
        },
        [&] { mesh.close_all(); });
  }

  std::vector<std::vector<Msg>> result(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    for (int s = 0; s < n; ++s) {
      auto& slot = inbox[static_cast<std::size_t>(k)][static_cast<std::size_t>(s)];
      if (!slot) throw std::logic_error("all_to_all: missing payload");
      result[static_cast<std::size_t>(k)].push_back(std::move(*slot));
    }
  }
  std::vector<TraceRecord> trace;
  for (int r = 1; r < n; ++r) {
    for (int k = 0; k < n; ++k) trace.push_back(log[static_cast<std::size_t>(k)][static_cast<std::size_t>(r - 1)]);
  }
  return {std::move(result), std::move(trace)};
}

inline std::string to_csv(const StepTrace& trace, bool header = true, const std::string& prefix = "") {
  std::ostringstream os;
  if (header) os << (prefix.empty() ? "" : "call,") << "step,rank,kind,bytes,pairs\n";
  auto emit = [&](const TraceRecord& r) {
    os << (prefix.empty() ? "" : prefix + ",") << r.step << ',' << r.rank << ',' << to_string(r.kind) << ',' << r.bytes
       << ',' << r.pairs << '\n';
  };
  for (const auto& r : trace.ring) emit(r);
  for (const auto& r : trace.all_to_all) emit(r);
  return os.str();
}

}  // namespace cp
