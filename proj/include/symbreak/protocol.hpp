#pragma once

// Anonymous broadcast rank protocol: n identical players each sample k bits,
// broadcast them once over a source-anonymous channel, and take the rank of
// their own string in the received multiset as their action.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "symbreak/random.hpp"

namespace symbreak {

// ---------------------------------------------------------------------------
// Exact probabilities

struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  [[nodiscard]] double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

inline Fraction make_fraction(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw std::invalid_argument("fraction with zero denominator");
  const auto g = std::gcd(num, den);
  return g == 0 ? Fraction{0, 1} : Fraction{num / g, den / g};
}

/// A probability with an exact rational form when it fits in 64 bits.
struct Probability {
  double value = 0.0;
  std::optional<Fraction> exact;
};

// ---------------------------------------------------------------------------
// Bit strings

/// A player's k sampled bits. Ordered as an unsigned integer with the first
/// bit most significant; strings of different length order by length first.
class BitString {
 public:
  BitString() = default;
  explicit BitString(std::vector<bool> bits) : bits_(std::move(bits)) {}

  /// Parses "0101"-style text.
  static BitString from_string(std::string_view text) {
    std::vector<bool> bits;
    bits.reserve(text.size());
    for (char c : text) {
      if (c != '0' && c != '1') throw std::invalid_argument("bit string may only contain '0' and '1'");
      bits.push_back(c == '1');
    }
    return BitString(std::move(bits));
  }

  [[nodiscard]] std::size_t size() const noexcept { return bits_.size(); }
  [[nodiscard]] bool operator[](std::size_t i) const { return bits_[i]; }
  [[nodiscard]] const std::vector<bool>& bits() const noexcept { return bits_; }

  [[nodiscard]] std::string to_string() const {
    std::string s;
    s.reserve(bits_.size());
    for (bool b : bits_) s.push_back(b ? '1' : '0');
    return s;
  }

  friend bool operator==(const BitString&, const BitString&) = default;
  friend std::strong_ordering operator<=>(const BitString& a, const BitString& b) {
    if (auto c = a.bits_.size() <=> b.bits_.size(); c != 0) return c;
    // Equal length: lexicographic with MSB first is integer order.
    for (std::size_t i = 0; i < a.bits_.size(); ++i) {
      if (a.bits_[i] != b.bits_[i]) return a.bits_[i] ? std::strong_ordering::greater : std::strong_ordering::less;
    }
    return std::strong_ordering::equal;
  }

 private:
  std::vector<bool> bits_;
};

/// Draws exactly k bits from `source`.
inline BitString sample_bitstring(BitSource& source, int k) {
  if (k < 0) throw std::invalid_argument("bit count must be non-negative");
  std::vector<bool> bits(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) bits[static_cast<std::size_t>(i)] = source.next_bit();
  return BitString(std::move(bits));
}

// ---------------------------------------------------------------------------
// Broadcast channel

/// One round of source-anonymous broadcast. Every receiver sees the same
/// sorted multiset, its own message included; only multiplicities survive.
class BroadcastRound {
 public:
  explicit BroadcastRound(std::vector<BitString> messages) : messages_(std::move(messages)) {
    std::sort(messages_.begin(), messages_.end());
  }

  [[nodiscard]] std::size_t n() const noexcept { return messages_.size(); }
  [[nodiscard]] std::span<const BitString> messages() const noexcept { return messages_; }

  [[nodiscard]] std::size_t multiplicity(const BitString& s) const {
    auto [lo, hi] = std::equal_range(messages_.begin(), messages_.end(), s);
    return static_cast<std::size_t>(hi - lo);
  }

  /// Number of received strings strictly below `s`: the lowest rank of the
  /// block of strings equal to `s`.
  [[nodiscard]] std::size_t rank_of(const BitString& s) const {
    return static_cast<std::size_t>(std::lower_bound(messages_.begin(), messages_.end(), s) - messages_.begin());
  }

 private:
  std::vector<BitString> messages_;
};

// ---------------------------------------------------------------------------
// Player

/// The rank-protocol program as a Sample -> Broadcast -> Receive -> Compute
/// state machine. Players hold no identity; two players fed the same bits
/// and the same round behave identically.
class RankPlayer {
 public:
  enum class Phase { Sample, Broadcast, Receive, Compute, Halted };

  explicit RankPlayer(int k) : k_(k) {
    if (k < 0) throw std::invalid_argument("bit count must be non-negative");
  }

  [[nodiscard]] Phase phase() const noexcept { return phase_; }

  void sample(BitSource& source) {
    expect(Phase::Sample);
    own_ = sample_bitstring(source, k_);
    phase_ = Phase::Broadcast;
  }

  [[nodiscard]] BitString broadcast() {
    expect(Phase::Broadcast);
    phase_ = Phase::Receive;
    return own_;
  }

  void receive(const BroadcastRound& round) {
    expect(Phase::Receive);
    round_ = &round;
    phase_ = Phase::Compute;
  }

  /// Returns the chosen action and halts.
  int compute() {
    expect(Phase::Compute);
    collided_ = round_->multiplicity(own_) > 1;
    action_ = static_cast<int>(round_->rank_of(own_));
    round_ = nullptr;
    phase_ = Phase::Halted;
    return action_;
  }

  [[nodiscard]] const BitString& message() const noexcept { return own_; }
  [[nodiscard]] bool saw_collision() const noexcept { return collided_; }
  [[nodiscard]] int action() const noexcept { return action_; }

 private:
  void expect(Phase p) const {
    if (phase_ != p) throw std::logic_error("rank player routine called out of order");
  }

  int k_;
  Phase phase_ = Phase::Sample;
  BitString own_;
  const BroadcastRound* round_ = nullptr;
  bool collided_ = false;
  int action_ = -1;
};

// ---------------------------------------------------------------------------
// Reward

/// Generalized XOR payoff: 1 iff every action is distinct.
inline int xor_reward(std::span<const int> actions, int k) {
  std::vector<bool> seen(static_cast<std::size_t>(std::max(k, 0)), false);
  int reward = 1;
  for (int a : actions) {
    if (a < 0 || a >= k) throw std::out_of_range("action " + std::to_string(a) + " outside [0, " + std::to_string(k) + ")");
    if (seen[static_cast<std::size_t>(a)]) reward = 0;
    seen[static_cast<std::size_t>(a)] = true;
  }
  return reward;
}

// ---------------------------------------------------------------------------
// Protocol runs

struct ProtocolOutcome {
  std::vector<int> actions;
  bool collided = false;
  bool success = false;
};

/// Runs the compute phase given the broadcast messages, in player order.
inline ProtocolOutcome run_rank_protocol(std::span<const BitString> messages) {
  if (messages.empty()) throw std::invalid_argument("protocol needs at least one player");
  const BroadcastRound round(std::vector<BitString>(messages.begin(), messages.end()));
  ProtocolOutcome out;
  out.actions.reserve(messages.size());
  for (const auto& m : messages) {
    out.collided = out.collided || round.multiplicity(m) > 1;
    out.actions.push_back(static_cast<int>(round.rank_of(m)));
  }
  out.success = !out.collided && xor_reward(out.actions, static_cast<int>(messages.size())) == 1;
  return out;
}

/// One full protocol execution. Player i draws its bits from `trial.split(i)`.
inline ProtocolOutcome run_rank_protocol(int n, int k, const Stream& trial) {
  if (n < 1) throw std::invalid_argument("protocol needs at least one player");
  std::vector<RankPlayer> players(static_cast<std::size_t>(n), RankPlayer(k));
  std::vector<BitString> sent;
  sent.reserve(players.size());
  for (std::size_t i = 0; i < players.size(); ++i) {
    BitSource bits(trial.split(i));
    players[i].sample(bits);
    sent.push_back(players[i].broadcast());
  }
  const BroadcastRound round(std::move(sent));
  ProtocolOutcome out;
  for (auto& p : players) {
    p.receive(round);
    out.actions.push_back(p.compute());
    out.collided = out.collided || p.saw_collision();
  }
  out.success = !out.collided && xor_reward(out.actions, n) == 1;
  return out;
}

// ---------------------------------------------------------------------------
// Closed forms

/// P(all n strings of k uniform bits are distinct) = C(2^k, n) n! / 2^{nk}.
/// Exact rational for nk <= 32, log-space beyond.
inline Probability p_no_collision_exact(int n, int k) {
  if (n < 1 || k < 0) throw std::invalid_argument("p_no_collision_exact needs n >= 1, k >= 0");
  if (n == 1) return {1.0, Fraction{1, 1}};
  // n > 2^k: pigeonhole.
  if (k < 63 && static_cast<std::uint64_t>(n) > (std::uint64_t{1} << k)) return {0.0, Fraction{0, 1}};

  if (static_cast<long long>(n) * k <= 32) {
    const std::uint64_t space = std::uint64_t{1} << k;
    std::uint64_t num = 1;
    for (int i = 0; i < n; ++i) num *= space - static_cast<std::uint64_t>(i);
    const auto f = make_fraction(num, std::uint64_t{1} << (n * k));
    return {f.value(), f};
  }
  double log_p = 0.0;
  for (int i = 1; i < n; ++i) log_p += std::log1p(-std::ldexp(static_cast<double>(i), -k));
  return {std::exp(log_p), std::nullopt};
}

/// n! / n^n: the chance that n uniformly random picks among n actions are all
/// distinct. Exact for n <= 15.
inline Probability random_play_floor(int n) {
  if (n < 1) throw std::invalid_argument("random_play_floor needs n >= 1");
  if (n <= 15) {
    std::uint64_t fact = 1;
    std::uint64_t pow = 1;
    for (int i = 1; i <= n; ++i) {
      fact *= static_cast<std::uint64_t>(i);
      pow *= static_cast<std::uint64_t>(n);
    }
    const auto f = make_fraction(fact, pow);
    return {f.value(), f};
  }
  return {std::exp(std::lgamma(n + 1.0) - n * std::log(static_cast<double>(n))), std::nullopt};
}

// ---------------------------------------------------------------------------
// Monte-Carlo verification

struct ProtocolReport {
  int n = 0;
  int k = 0;
  std::uint64_t trials = 0;
  std::uint64_t seed = 0;
  std::uint64_t successes = 0;
  double empirical = 0.0;
  double exact = 0.0;
  double z = 0.0;
};

/// Standardized distance of an empirical frequency from p. Zero when p is
/// degenerate and matched exactly, infinite when it is degenerate and missed.
inline double binomial_z(double empirical, double p, std::uint64_t trials) {
  const double var = p * (1.0 - p);
  if (var <= 0.0) {
    if (empirical == p) return 0.0;
    return empirical > p ? HUGE_VAL : -HUGE_VAL;
  }
  return (empirical - p) / std::sqrt(var / static_cast<double>(trials));
}

/// Runs the protocol `trials` times from master seed `seed` and compares the
/// success frequency with the closed form. Trial t uses stream
/// Stream(seed).split(t), so the count does not depend on `threads`.
inline ProtocolReport verify_theorem1(int n, int k, std::uint64_t trials, std::uint64_t seed, unsigned threads = 0) {
  if (trials < 1) throw std::invalid_argument("verify_theorem1 needs at least one trial");
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::uint64_t>(threads, trials));

  const Stream master(seed);
  std::vector<std::uint64_t> counts(threads, 0);
  auto work = [&](unsigned w) {
    const std::uint64_t begin = trials * w / threads;
    const std::uint64_t end = trials * (w + 1) / threads;
    std::uint64_t hits = 0;
    for (std::uint64_t t = begin; t < end; ++t) hits += run_rank_protocol(n, k, master.split(t)).success ? 1 : 0;
    counts[w] = hits;
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }

  ProtocolReport r;
  r.n = n;
  r.k = k;
  r.trials = trials;
  r.seed = seed;
  r.successes = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  r.empirical = static_cast<double>(r.successes) / static_cast<double>(trials);
  r.exact = p_no_collision_exact(n, k).value;
  r.z = binomial_z(r.empirical, r.exact, trials);
  return r;
}

inline constexpr const char* kProtocolCsvHeader = "n,k,trials,empirical,exact,z";

inline std::string to_csv_row(const ProtocolReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%d,%llu,%.10g,%.10g,%.6g", r.n, r.k, static_cast<unsigned long long>(r.trials),
                r.empirical, r.exact, r.z);
  return buf;
}

inline std::string to_pretty(const ProtocolReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "rank protocol  n=%d k=%d trials=%llu seed=%llu\n"
                "  empirical success  %.6f (%llu hits)\n"
                "  exact P(distinct)  %.6f\n"
                "  z                  %+.3f\n",
                r.n, r.k, static_cast<unsigned long long>(r.trials), static_cast<unsigned long long>(r.seed),
                r.empirical, static_cast<unsigned long long>(r.successes), r.exact, r.z);
  return buf;
}

}  // namespace symbreak
