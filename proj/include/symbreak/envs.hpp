#pragma once

// The generalized XOR game and the evaluation harness for greedy and sampled
// action selection.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "symbreak/attention.hpp"
#include "symbreak/protocol.hpp"
#include "symbreak/random.hpp"
#include "symbreak/tensor.hpp"

namespace symbreak {

inline constexpr std::size_t kDefaultTaskWidth = 8;

struct StepResult {
  int reward = 0;
  bool done = true;
};

/// n players, k actions, one step per episode. Every agent sees the same
/// constant raw features; tasks are the k actions as one-hot rows.
class XorEnv {
 public:
  XorEnv(int n, int k, std::size_t task_width = kDefaultTaskWidth) : n_(n), k_(k), task_width_(task_width) {
    if (n < 1 || k < 1) throw std::invalid_argument("xor game needs n >= 1 and k >= 1");
    if (static_cast<std::size_t>(k) > task_width)
      throw ShapeError("k = " + std::to_string(k) + " exceeds the one-hot task width " + std::to_string(task_width));
  }

  [[nodiscard]] int players() const noexcept { return n_; }
  [[nodiscard]] int actions() const noexcept { return k_; }
  [[nodiscard]] std::size_t task_width() const noexcept { return task_width_; }

  /// [n x 1] of ones.
  [[nodiscard]] Tensor agent_features() const { return Tensor::full({static_cast<std::size_t>(n_), 1}, 1.0f); }

  /// [k x task_width], row j = e_j.
  [[nodiscard]] Tensor task_features() const {
    auto t = Tensor::zeros({static_cast<std::size_t>(k_), task_width_});
    for (int j = 0; j < k_; ++j) t.data()[static_cast<std::size_t>(j) * task_width_ + static_cast<std::size_t>(j)] = 1.0f;
    return t;
  }

  /// Team reward for the joint action; the episode always ends.
  [[nodiscard]] StepResult step(std::span<const int> joint_action) const {
    if (joint_action.size() != static_cast<std::size_t>(n_))
      throw std::invalid_argument("joint action has " + std::to_string(joint_action.size()) + " entries, game has " +
                                  std::to_string(n_) + " players");
    return {xor_reward(joint_action, k_), true};
  }

 private:
  int n_;
  int k_;
  std::size_t task_width_;
};

/// What a policy sees in one XOR episode.
struct XorObservation {
  const XorEnv* env = nullptr;
  RandomScalars r;
};

/// Produces row-major [n x k] action logits. `rng` is the policy's private
/// randomness for the episode (dropout masks draw from it).
template <class P>
concept XorPolicy = requires(const P& p, const XorObservation& obs, Stream& rng) {
  { p.logits(obs, rng) } -> std::convertible_to<std::vector<float>>;
};

/// Constant logits: every action equally likely, argmax always action 0.
struct UniformPolicy {
  [[nodiscard]] std::vector<float> logits(const XorObservation& obs, Stream&) const {
    return std::vector<float>(static_cast<std::size_t>(obs.env->players() * obs.env->actions()), 0.0f);
  }
};

/// Agent i puts all mass on the rank of r_i among all scalars (descending,
/// so the largest scalar takes action 0). Distinct scalars give a permutation.
struct RankOraclePolicy {
  [[nodiscard]] std::vector<float> logits(const XorObservation& obs, Stream&) const {
    const auto n = static_cast<std::size_t>(obs.env->players());
    const auto k = static_cast<std::size_t>(obs.env->actions());
    std::vector<float> out(n * k, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < n; ++j) rank += obs.r.r[j] > obs.r.r[i];
      if (rank < k) out[i * k + rank] = 1.0f;
    }
    return out;
  }
};

/// Adapts a PolicyNet; the mask comes from the network's own variant.
class NetworkPolicy {
 public:
  explicit NetworkPolicy(const PolicyNet& net) : net_(&net) {}

  [[nodiscard]] std::vector<float> logits(const XorObservation& obs, Stream& rng) const {
    NoGradGuard no_grad;
    const RankMask mask = net_->make_mask(obs.r, rng);
    auto out = net_->forward(obs.env->agent_features(), obs.env->task_features(), obs.r, mask, false);
    return {out.logits.data().begin(), out.logits.data().end()};
  }

 private:
  const PolicyNet* net_;
};

static_assert(XorPolicy<UniformPolicy> && XorPolicy<RankOraclePolicy> && XorPolicy<NetworkPolicy>);

// ---------------------------------------------------------------------------
// Action selection

enum class EvalMode { Greedy, Sampled };

inline const char* to_string(EvalMode m) { return m == EvalMode::Greedy ? "greedy" : "sampled"; }

inline EvalMode parse_mode(const std::string& s) {
  if (s == "greedy") return EvalMode::Greedy;
  if (s == "sampled") return EvalMode::Sampled;
  throw std::invalid_argument("unknown mode '" + s + "' (expected greedy or sampled)");
}

/// First index of the maximum.
inline int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Categorical draw from softmax(row).
inline int sample_categorical(std::span<const float> row, Stream& rng) {
  const float mx = *std::max_element(row.begin(), row.end());
  std::vector<double> w(row.size());
  double z = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) z += w[j] = std::exp(static_cast<double>(row[j] - mx));
  double u = rng.uniform_double() * z;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (u < w[j]) return static_cast<int>(j);
    u -= w[j];
  }
  return static_cast<int>(row.size() - 1);
}

/// One action per agent from [n x k] logits.
inline std::vector<int> select_actions(std::span<const float> logits, int n, int k, EvalMode mode, Stream& rng) {
  std::vector<int> actions(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto row = logits.subspan(static_cast<std::size_t>(i * k), static_cast<std::size_t>(k));
    actions[static_cast<std::size_t>(i)] = mode == EvalMode::Greedy ? argmax(row) : sample_categorical(row, rng);
  }
  return actions;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double success_rate = 0.0;
  EvalMode mode = EvalMode::Greedy;
  std::uint64_t episodes = 0;
  int n_train = 0;
  int k_train = 0;
  int n_eval = 0;
  int k_eval = 0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kEvalCsvHeader = "n_train,k_train,n_eval,k_eval,mode,episodes,success_rate,seed";

inline std::string to_csv_row(const EvalReport& r) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,%s,%llu,%.6f,%llu", r.n_train, r.k_train, r.n_eval, r.k_eval, to_string(r.mode),
                static_cast<unsigned long long>(r.episodes), r.success_rate, static_cast<unsigned long long>(r.seed));
  return buf;
}

/// Mean team reward over `episodes` single-step episodes. Episode e draws its
/// scalars, policy randomness and action samples from Stream(seed).split(e).
template <XorPolicy P>
EvalReport evaluate(const P& policy, const XorEnv& env, EvalMode mode, std::uint64_t episodes, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate needs at least one episode");
  const Stream master(seed);
  std::uint64_t total = 0;
  for (std::uint64_t e = 0; e < episodes; ++e) {
    Stream rng = master.split(e);
    XorObservation obs{&env, RandomScalars::sample(static_cast<std::size_t>(env.players()), rng)};
    Stream policy_rng = rng.split(1);
    Stream action_rng = rng.split(2);
    const std::vector<float> logits = policy.logits(obs, policy_rng);
    if (logits.size() != static_cast<std::size_t>(env.players() * env.actions()))
      throw ShapeError("policy returned " + std::to_string(logits.size()) + " logits for an n x k game");
    const auto actions = select_actions(logits, env.players(), env.actions(), mode, action_rng);
    total += static_cast<std::uint64_t>(env.step(actions).reward);
  }
  EvalReport r;
  r.success_rate = static_cast<double>(total) / static_cast<double>(episodes);
  r.mode = mode;
  r.episodes = episodes;
  r.n_train = r.n_eval = env.players();
  r.k_train = r.k_eval = env.actions();
  r.seed = seed;
  return r;
}

/// Evaluates a policy trained at (n_train, k_train) on a different game
/// without retraining. The task feature width must match the network's.
inline EvalReport cross_config_evaluate(const PolicyNet& net, int n_train, int k_train, int n_eval, int k_eval, EvalMode mode,
                                        std::uint64_t episodes, std::uint64_t seed) {
  const XorEnv env(n_eval, k_eval, net.config().task_features);
  EvalReport r = evaluate(NetworkPolicy(net), env, mode, episodes, seed);
  r.n_train = n_train;
  r.k_train = k_train;
  return r;
}

}  // namespace symbreak
