#pragma once

// PPO-clip for the XOR game: one shared policy, a common critic, and the team
// reward handed to every agent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "symbreak/attention.hpp"
#include "symbreak/checkpoint.hpp"
#include "symbreak/envs.hpp"
#include "symbreak/optim.hpp"
#include "symbreak/random.hpp"
#include "symbreak/tensor.hpp"

namespace symbreak {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int n = 2;
  int k = 2;
  int num_envs = 64;
  int n_steps = 2;
  int batch_size = 128;
  int n_epochs = 1;
  double gamma = 0.99;
  double vf_coef = 0.5;
  double ent_coef = 0.0;
  double target_kl = 0.25;
  double max_grad_norm = 10.0;
  double lr = 1e-4;
  long total_timesteps = 50000;
  double clip_eps = 0.2;
  std::uint64_t seed = 0;
  MaskVariant variant = MaskVariant::Structured;

  [[nodiscard]] int rollout_size() const { return num_envs * n_steps; }
  [[nodiscard]] long num_updates() const { return (total_timesteps + rollout_size() - 1) / rollout_size(); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct ConfigError : std::invalid_argument {
  ConfigError(std::string key, const std::string& what) : std::invalid_argument(what), key(std::move(key)) {}
  std::string key;
};

inline void validate(const TrainConfig& c) {
  auto positive = [](const char* key, double v) {
    if (!(v > 0)) throw ConfigError(key, std::string(key) + " must be positive");
  };
  positive("n", c.n);
  positive("k", c.k);
  positive("num_envs", c.num_envs);
  positive("n_steps", c.n_steps);
  positive("batch_size", c.batch_size);
  positive("n_epochs", c.n_epochs);
  positive("lr", c.lr);
  positive("total_timesteps", static_cast<double>(c.total_timesteps));
  positive("clip_eps", c.clip_eps);
  positive("max_grad_norm", c.max_grad_norm);
  positive("target_kl", c.target_kl);
  if (c.gamma < 0 || c.gamma > 1) throw ConfigError("gamma", "gamma must lie in [0, 1]");
  if (c.vf_coef < 0) throw ConfigError("vf_coef", "vf_coef must be non-negative");
  if (c.ent_coef < 0) throw ConfigError("ent_coef", "ent_coef must be non-negative");
  if (c.rollout_size() % c.batch_size != 0)
    throw ConfigError("batch_size", "batch_size must divide num_envs * n_steps = " + std::to_string(c.rollout_size()));
  if (c.k > static_cast<int>(kDefaultTaskWidth))
    throw ConfigError("k", "k exceeds the one-hot task width " + std::to_string(kDefaultTaskWidth));
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Canonical `key = value` lines, in field order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  using detail::format_double;
  return {{"n", std::to_string(c.n)},
          {"k", std::to_string(c.k)},
          {"num_envs", std::to_string(c.num_envs)},
          {"n_steps", std::to_string(c.n_steps)},
          {"batch_size", std::to_string(c.batch_size)},
          {"n_epochs", std::to_string(c.n_epochs)},
          {"gamma", format_double(c.gamma)},
          {"vf_coef", format_double(c.vf_coef)},
          {"ent_coef", format_double(c.ent_coef)},
          {"target_kl", format_double(c.target_kl)},
          {"max_grad_norm", format_double(c.max_grad_norm)},
          {"lr", format_double(c.lr)},
          {"total_timesteps", std::to_string(c.total_timesteps)},
          {"clip_eps", format_double(c.clip_eps)},
          {"seed", std::to_string(c.seed)},
          {"variant", to_string(c.variant)}};
}

inline std::string to_config_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + " = " + v + "\n";
  return out;
}

/// Parses `key = value` lines; '#' starts a comment. Every TrainConfig field
/// must appear exactly once and no other key is accepted.
inline TrainConfig parse_config(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (!kv.emplace(key, value).second) throw ConfigError(key, "duplicate key: " + key);
  }

  TrainConfig c;
  const auto fields = config_entries(c);
  for (const auto& [key, _] : kv) {
    const bool known = std::any_of(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (!known) throw ConfigError(key, "unknown key: " + key);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(key, std::string("missing key: ") + key);
    return it->second;
  };
  auto as_long = [&](const char* key) {
    const auto& s = get(key);
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError(key, std::string("bad integer for ") + key + ": '" + s + "'");
    return v;
  };
  auto as_double = [&](const char* key) {
    const auto& s = get(key);
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError(key, std::string("bad number for ") + key + ": '" + s + "'");
    return v;
  };

  c.n = static_cast<int>(as_long("n"));
  c.k = static_cast<int>(as_long("k"));
  c.num_envs = static_cast<int>(as_long("num_envs"));
  c.n_steps = static_cast<int>(as_long("n_steps"));
  c.batch_size = static_cast<int>(as_long("batch_size"));
  c.n_epochs = static_cast<int>(as_long("n_epochs"));
  c.gamma = as_double("gamma");
  c.vf_coef = as_double("vf_coef");
  c.ent_coef = as_double("ent_coef");
  c.target_kl = as_double("target_kl");
  c.max_grad_norm = as_double("max_grad_norm");
  c.lr = as_double("lr");
  c.total_timesteps = as_long("total_timesteps");
  c.clip_eps = as_double("clip_eps");
  const auto seed = as_long("seed");
  if (seed < 0) throw ConfigError("seed", "seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  try {
    c.variant = parse_variant(get("variant"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("variant", e.what());
  }
  validate(c);
  return c;
}

inline TrainConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

/// FNV-1a over the canonical config text: stable across runs and platforms.
inline std::uint64_t config_hash(const TrainConfig& c) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : to_config_text(c)) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Rollouts

struct Transition {
  RandomScalars r;
  RankMask mask;
  std::vector<int> actions;
  std::vector<float> log_probs;  // per agent, under the behaviour policy
  float reward = 0.0f;
  float value = 0.0f;
  bool done = true;
  float advantage = 0.0f;  // raw, filled by compute_advantages
  float ret = 0.0f;
};

struct RolloutBuffer {
  int n = 0;
  int k = 0;
  std::vector<Transition> transitions;

  [[nodiscard]] std::size_t size() const noexcept { return transitions.size(); }
  void clear() { transitions.clear(); }
};

/// Collects num_envs x n_steps single-step episodes with fresh scalars (and
/// masks) for every step. Randomness for update u comes from
/// Stream(seed).split(u).
inline RolloutBuffer collect_rollouts(const PolicyNet& net, const TrainConfig& cfg, std::uint64_t update) {
  const XorEnv env(cfg.n, cfg.k, net.config().task_features);
  const Tensor agent_x = env.agent_features();
  const Tensor task_x = env.task_features();
  const Stream master = Stream(cfg.seed).split(0xC011EC7ULL, update);

  RolloutBuffer buf;
  buf.n = cfg.n;
  buf.k = cfg.k;
  buf.transitions.reserve(static_cast<std::size_t>(cfg.rollout_size()));
  NoGradGuard no_grad;
  for (int step = 0; step < cfg.n_steps; ++step) {
    for (int e = 0; e < cfg.num_envs; ++e) {
      Stream rng = master.split(static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.num_envs) + static_cast<std::uint64_t>(e));
      Transition t;
      t.r = RandomScalars::sample(static_cast<std::size_t>(cfg.n), rng);
      Stream mask_rng = rng.split(1);
      Stream action_rng = rng.split(2);
      t.mask = net.make_mask(t.r, mask_rng);
      const auto out = net.forward(agent_x, task_x, t.r, t.mask, true);
      const Tensor logp = log_softmax(out.logits, 1);
      t.actions = select_actions(out.logits.data(), cfg.n, cfg.k, EvalMode::Sampled, action_rng);
      for (int i = 0; i < cfg.n; ++i) t.log_probs.push_back(logp.at(static_cast<std::size_t>(i), static_cast<std::size_t>(t.actions[static_cast<std::size_t>(i)])));
      const auto res = env.step(t.actions);
      t.reward = static_cast<float>(res.reward);
      t.done = res.done;
      t.value = out.value.item();
      buf.transitions.push_back(std::move(t));
    }
  }
  return buf;
}

/// One-step returns and raw advantages. Every XOR transition is terminal, so
/// nothing is bootstrapped and gamma drops out.
inline void compute_advantages(RolloutBuffer& buf, double gamma) {
  if (buf.transitions.empty()) throw std::invalid_argument("compute_advantages on an empty buffer");
  for (auto& t : buf.transitions) {
    if (!t.done) throw std::logic_error("non-terminal transition: episodes must have length 1");
    t.ret = t.reward + static_cast<float>(gamma) * 0.0f;
    t.advantage = t.ret - t.value;
  }
}

/// Zero mean, unit variance. A batch whose spread is at float noise level
/// maps to all zeros.
inline std::vector<float> normalize_advantages(std::span<const float> raw, double eps = 1e-8) {
  std::vector<float> out(raw.size(), 0.0f);
  if (raw.empty()) return out;
  double mean = 0.0;
  for (float a : raw) mean += a;
  mean /= static_cast<double>(raw.size());
  double var = 0.0;
  for (float a : raw) var += (a - mean) * (a - mean);
  var /= static_cast<double>(raw.size());
  const double sd = std::sqrt(var);
  if (sd <= 1e-6 * std::max(1.0, std::abs(mean))) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>((raw[i] - mean) / (sd + eps));
  return out;
}

// ---------------------------------------------------------------------------
// Update

struct RunRecord {
  long update = 0;
  long timesteps = 0;
  double mean_reward = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;  // after clipping, last minibatch
  std::optional<double> eval_greedy;
  std::optional<double> eval_sampled;
  int minibatches = 0;     // gradient steps actually taken
  bool early_stopped = false;
};

struct RunLog {
  std::vector<RunRecord> records;

  void append(RunRecord r) {
    if (!records.empty() && r.update <= records.back().update) throw std::logic_error("run log update index must increase");
    records.push_back(std::move(r));
  }
};

/// Trailing moving average (over `window` updates) of rollout success, one
/// value per update in the last `fraction` of the log. Rollouts are drawn
/// from the sampling policy, so this tracks sampled success at every update.
inline std::vector<double> smoothed_tail_reward(const RunLog& log, double fraction = 0.2, std::size_t window = 10) {
  const std::size_t n = log.records.size();
  if (n == 0 || window == 0) return {};
  const auto tail = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  std::vector<double> out;
  for (std::size_t end = n - std::min(tail, n); end < n; ++end) {
    const std::size_t begin = end + 1 >= window ? end + 1 - window : 0;
    double s = 0.0;
    for (std::size_t i = begin; i <= end; ++i) s += log.records[i].mean_reward;
    out.push_back(s / static_cast<double>(end + 1 - begin));
  }
  return out;
}

/// Index of the first decrease in `xs`, or -1 when it never decreases.
inline long first_decrease(std::span<const double> xs) {
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] < xs[i - 1]) return static_cast<long>(i);
  return -1;
}

inline constexpr const char* kRunLogCsvHeader =
    "update,timesteps,mean_reward,policy_loss,value_loss,entropy,approx_kl,grad_norm,eval_greedy,eval_sampled";

inline std::string to_csv_row(const RunRecord& r) {
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char b[32];
    std::snprintf(b, sizeof b, "%.6f", *v);
    return std::string(b);
  };
  char buf[320];
  std::snprintf(buf, sizeof buf, "%ld,%ld,%.6f,%.8g,%.8g,%.8g,%.8g,%.8g,", r.update, r.timesteps, r.mean_reward, r.policy_loss,
                r.value_loss, r.entropy, r.approx_kl, r.grad_norm);
  return std::string(buf) + opt(r.eval_greedy) + "," + opt(r.eval_sampled);
}

struct MinibatchLoss {
  Tensor total;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
};

/// Clipped surrogate (summed over agents) + vf_coef * squared value error
/// - ent_coef * entropy (summed over agents), averaged over the minibatch.
/// `advantages` are already normalized, one per transition.
inline MinibatchLoss ppo_loss(const PolicyNet& net, const RolloutBuffer& buf, std::span<const std::size_t> batch,
                              std::span<const float> advantages, const TrainConfig& cfg) {
  const XorEnv env(buf.n, buf.k, net.config().task_features);
  const Tensor agent_x = env.agent_features();
  const Tensor task_x = env.task_features();
  const auto lo = static_cast<float>(1.0 - cfg.clip_eps);
  const auto hi = static_cast<float>(1.0 + cfg.clip_eps);

  std::vector<Tensor> per_transition;
  per_transition.reserve(batch.size());
  MinibatchLoss out;
  double kl_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Transition& t = buf.transitions[batch[b]];
    const auto fwd = net.forward(agent_x, task_x, t.r, t.mask, true);
    const Tensor logp_all = log_softmax(fwd.logits, 1);
    std::vector<std::size_t> cols(t.actions.begin(), t.actions.end());
    const Tensor logp = pick_per_row(logp_all, std::move(cols));
    const Tensor old = Tensor::matrix(static_cast<std::size_t>(buf.n), 1, t.log_probs);
    const Tensor ratio = exp(sub(logp, old));
    const Tensor adv = Tensor::full({static_cast<std::size_t>(buf.n), 1}, advantages[b]);
    const Tensor surrogate = minimum(mul(ratio, adv), mul(clamp(ratio, lo, hi), adv));
    const Tensor policy_loss = neg(sum(surrogate));
    const Tensor value_loss = square(add_scalar(fwd.value, -t.ret));
    const Tensor entropy = neg(sum(mul(exp(logp_all), logp_all)));

    Tensor loss = add(policy_loss, mul_scalar(value_loss, static_cast<float>(cfg.vf_coef)));
    if (cfg.ent_coef != 0.0) loss = sub(loss, mul_scalar(entropy, static_cast<float>(cfg.ent_coef)));
    per_transition.push_back(reshape(loss, {1, 1}));

    out.policy_loss += policy_loss.item();
    out.value_loss += value_loss.item();
    out.entropy += entropy.item();
    for (std::size_t i = 0; i < logp.numel(); ++i) {
      const double log_ratio = static_cast<double>(logp.data()[i]) - t.log_probs[i];
      kl_sum += std::expm1(log_ratio) - log_ratio;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.total = mean(concat_rows(per_transition));
  out.policy_loss *= inv;
  out.value_loss *= inv;
  out.entropy *= inv;
  out.approx_kl = kl_sum / static_cast<double>(batch.size() * static_cast<std::size_t>(buf.n));
  return out;
}

/// n_epochs passes over shuffled minibatches. Stops the whole update as soon
/// as a minibatch's approximate KL exceeds target_kl (before stepping on it).
inline RunRecord ppo_update(PolicyNet& net, AdamState& adam, const RolloutBuffer& buf, const TrainConfig& cfg, std::uint64_t update) {
  if (buf.transitions.empty()) throw std::invalid_argument("ppo_update on an empty buffer");
  ParameterList params = net.parameters();
  Stream shuffle = Stream(cfg.seed).split(0x5B0FF1EULL, update);
  std::vector<std::size_t> order(buf.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  RunRecord rec;
  rec.update = static_cast<long>(update);
  double reward_sum = 0.0;
  for (const auto& t : buf.transitions) reward_sum += t.reward;
  rec.mean_reward = reward_sum / static_cast<double>(buf.size());

  for (int epoch = 0; epoch < cfg.n_epochs && !rec.early_stopped; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
      std::vector<float> raw;
      raw.reserve(batch.size());
      for (auto idx : batch) raw.push_back(buf.transitions[idx].advantage);
      const auto adv = normalize_advantages(raw);

      MinibatchLoss loss = ppo_loss(net, buf, batch, adv, cfg);
      if (!std::isfinite(loss.total.item()))
        throw std::runtime_error("non-finite PPO loss at update " + std::to_string(update) + " (policy " +
                                 std::to_string(loss.policy_loss) + ", value " + std::to_string(loss.value_loss) + ")");
      rec.approx_kl = loss.approx_kl;
      if (loss.approx_kl > cfg.target_kl) {
        rec.early_stopped = true;
        break;
      }
      backward(loss.total);
      clip_grad_norm(params, cfg.max_grad_norm);
      rec.grad_norm = grad_norm(params);
      adam.step(params);
      rec.policy_loss = loss.policy_loss;
      rec.value_loss = loss.value_loss;
      rec.entropy = loss.entropy;
      ++rec.minibatches;
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  PolicyConfig policy;            // variant is overwritten from TrainConfig
  long eval_every = 50;           // updates between evaluations
  std::uint64_t eval_episodes = 2000;
  std::optional<std::filesystem::path> run_dir;  // init.ckpt / best.ckpt / final.ckpt land here
  std::function<void(const RunRecord&)> on_record;
};

struct TrainResult {
  PolicyNet policy;  // final parameters
  PolicyNet best;    // highest greedy evaluation (earliest on ties)
  double best_greedy = -1.0;
  long best_update = -1;
  RunLog log;
};

inline PolicyConfig policy_config_for(const TrainConfig& cfg, PolicyConfig base = {}) {
  base.variant = cfg.variant;
  return base;
}

/// Collect / advantage / update until total_timesteps, evaluating greedily and
/// by sampling every `eval_every` updates and after the last one.
inline TrainResult train(const TrainConfig& cfg, const TrainOptions& opt = {}) {
  validate(cfg);
  PolicyNet net(policy_config_for(cfg, opt.policy), mix64(cfg.seed));
  AdamState adam(net.parameters(), AdamConfig{static_cast<float>(cfg.lr)});
  PolicyNet best = net.clone();
  double best_greedy = -1.0;
  long best_update = -1;
  RunLog log;

  if (opt.run_dir) save_checkpoint(net, *opt.run_dir / "init.ckpt");

  const XorEnv env(cfg.n, cfg.k, net.config().task_features);
  const long updates = cfg.num_updates();
  for (long u = 1; u <= updates; ++u) {
    RolloutBuffer buf = collect_rollouts(net, cfg, static_cast<std::uint64_t>(u));
    compute_advantages(buf, cfg.gamma);
    RunRecord rec = ppo_update(net, adam, buf, cfg, static_cast<std::uint64_t>(u));
    rec.timesteps = u * cfg.rollout_size();

    if (u % opt.eval_every == 0 || u == updates) {
      const std::uint64_t eval_seed = mix64(cfg.seed ^ 0xE7A1ULL);
      rec.eval_greedy = evaluate(NetworkPolicy(net), env, EvalMode::Greedy, opt.eval_episodes, eval_seed).success_rate;
      rec.eval_sampled = evaluate(NetworkPolicy(net), env, EvalMode::Sampled, opt.eval_episodes, eval_seed).success_rate;
      if (*rec.eval_greedy > best_greedy) {
        best_greedy = *rec.eval_greedy;
        best_update = u;
        best = net.clone();
        if (opt.run_dir) save_checkpoint(net, *opt.run_dir / "best.ckpt");
      }
    }
    if (opt.on_record) opt.on_record(rec);
    log.append(std::move(rec));
  }
  if (opt.run_dir) save_checkpoint(net, *opt.run_dir / "final.ckpt");
  return TrainResult{std::move(net), std::move(best), best_greedy, best_update, std::move(log)};
}

}  // namespace symbreak
