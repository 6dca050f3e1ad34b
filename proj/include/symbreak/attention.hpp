#pragma once

// Rank masks, the Diamond Attention block and the shared policy network.
//
// Every agent runs the same network. Agent i embeds the agent set (its own
// row carrying its random scalar r_i) and the task set, then passes both
// through a stack of Diamond blocks under its own mask M(i): column k of M(i)
// is 0 when r_k >= r_i and masked otherwise, identical down every task row.
// The task side of the attention is never masked.

#include <cmath>
#include <span>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "symbreak/optim.hpp"
#include "symbreak/random.hpp"
#include "symbreak/tensor.hpp"

namespace symbreak {

/// One scalar per agent, drawn uniformly from [0, 1) every step.
struct RandomScalars {
  std::vector<float> r;

  static RandomScalars sample(std::size_t n, Stream& rng) {
    RandomScalars s;
    s.r.resize(n);
    for (auto& v : s.r) v = rng.uniform_float();
    return s;
  }

  [[nodiscard]] std::size_t size() const noexcept { return r.size(); }
};

/// Which peers each agent suppresses. `masks(i, k)` means agent i's attention
/// cannot see agent k. An agent never masks itself.
class RankMask {
 public:
  explicit RankMask(std::size_t n = 0) : n_(n), masked_(n * n, 0) {}

  [[nodiscard]] std::size_t agents() const noexcept { return n_; }
  [[nodiscard]] bool masks(std::size_t i, std::size_t k) const { return masked_[i * n_ + k] != 0; }

  void set(std::size_t i, std::size_t k, bool on) {
    if (i == k && on) throw std::invalid_argument("an agent cannot mask itself");
    masked_[i * n_ + k] = on ? 1 : 0;
  }

  /// Agent i's additive mask over (task row, agent column): 0 or kMaskedScore.
  [[nodiscard]] Tensor matrix(std::size_t i, std::size_t num_tasks) const {
    auto m = Tensor::zeros({num_tasks, n_});
    for (std::size_t t = 0; t < num_tasks; ++t)
      for (std::size_t k = 0; k < n_; ++k)
        if (masks(i, k)) m.data()[t * n_ + k] = kMaskedScore;
    return m;
  }

  [[nodiscard]] std::vector<char> row(std::size_t i) const {
    return {masked_.begin() + static_cast<std::ptrdiff_t>(i * n_), masked_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_)};
  }

  [[nodiscard]] std::size_t masked_count() const {
    std::size_t c = 0;
    for (char v : masked_) c += v != 0;
    return c;
  }

  friend bool operator==(const RankMask&, const RankMask&) = default;

 private:
  std::size_t n_;
  std::vector<char> masked_;
};

/// Structured rank mask: agent i masks agent k iff r_k < r_i.
inline RankMask build_mask(const RandomScalars& s) {
  if (s.size() == 0) throw std::invalid_argument("build_mask needs at least one agent");
  RankMask m(s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t k = 0; k < s.size(); ++k)
      if (i != k && !(s.r[k] >= s.r[i])) m.set(i, k, true);
  return m;
}

inline RankMask empty_mask(std::size_t n) { return RankMask(n); }

/// Each non-self column masked independently with probability p_drop.
inline RankMask dropout_mask(std::size_t n, double p_drop, Stream& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw std::invalid_argument("p_drop must lie in [0, 1)");
  RankMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      if (i != k && rng.bernoulli(p_drop)) m.set(i, k, true);
  return m;
}

// ---------------------------------------------------------------------------
// Layers

/// Fills a [rows x cols] buffer with a (semi-)orthogonal matrix times
/// `gain`: Gram-Schmidt on Gaussian rows (or columns, whichever are fewer).
inline void orthogonal_init(std::span<float> out, std::size_t rows, std::size_t cols, float gain, Stream& rng) {
  const bool tall = rows > cols;
  const std::size_t count = tall ? cols : rows;  // vectors to orthonormalize
  const std::size_t len = tall ? rows : cols;
  std::vector<double> v(count * len);
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double u1 = 1.0 - rng.uniform_double();
    const double u2 = rng.uniform_double();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    v[i] = rad * std::cos(2.0 * M_PI * u2);
    if (i + 1 < v.size()) v[i + 1] = rad * std::sin(2.0 * M_PI * u2);
  }
  for (std::size_t a = 0; a < count; ++a) {
    double* va = v.data() + a * len;
    for (std::size_t b = 0; b < a; ++b) {
      const double* vb = v.data() + b * len;
      double dot = 0.0;
      for (std::size_t t = 0; t < len; ++t) dot += va[t] * vb[t];
      for (std::size_t t = 0; t < len; ++t) va[t] -= dot * vb[t];
    }
    double norm = 0.0;
    for (std::size_t t = 0; t < len; ++t) norm += va[t] * va[t];
    norm = std::sqrt(norm);
    for (std::size_t t = 0; t < len; ++t) va[t] /= norm;
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = static_cast<float>(gain * (tall ? v[c * len + r] : v[r * len + c]));
}

inline const float kHiddenGain = std::sqrt(2.0f);

/// Orthogonal weights scaled by `gain`, zero bias.
struct Linear {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, float gain, Stream& rng) {
    weight = Tensor::zeros({out, in}, true);
    bias = Tensor::zeros({out}, true);
    orthogonal_init(weight.data(), out, in, gain, rng);
  }

  [[nodiscard]] Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Linear -> SiLU -> Linear.
struct Mlp2 {
  Linear first;
  Linear second;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Stream& rng, float out_gain = kHiddenGain)
      : first(in, hidden, kHiddenGain, rng), second(hidden, out, out_gain, rng) {}

  [[nodiscard]] Tensor operator()(const Tensor& x) const { return second(silu(first(x))); }

  void collect(ParameterList& out, const std::string& prefix) const {
    first.collect(out, prefix + ".0");
    second.collect(out, prefix + ".2");
  }
};

/// Projection matrices W_A, W_T (d x d) plus the MLPs that bring each 2d-wide
/// output stream back to width d.
struct DiamondBlock {
  Tensor w_agent;
  Tensor w_task;
  Mlp2 agent_proj;
  Mlp2 task_proj;

  DiamondBlock() = default;
  DiamondBlock(std::size_t d, std::size_t hidden, Stream& rng)
      : agent_proj(2 * d, hidden, d, rng), task_proj(2 * d, hidden, d, rng) {
    w_agent = Tensor::zeros({d, d}, true);
    w_task = Tensor::zeros({d, d}, true);
    orthogonal_init(w_agent.data(), d, d, 1.0f, rng);
    orthogonal_init(w_task.data(), d, d, 1.0f, rng);
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_agent", w_agent});
    out.push_back({prefix + ".w_task", w_task});
    agent_proj.collect(out, prefix + ".agent_proj");
    task_proj.collect(out, prefix + ".task_proj");
  }
};

struct DiamondOutput {
  Tensor task_out;     // [m x 2d]: aggregated agent values (+) own task rows
  Tensor agent_out;    // [1 x 2d]: aggregated task values (+) own agent row
  Tensor weights;      // [m x n]: attention, normalized over agents
  Tensor task_values;  // [m x d]: T W_T^T
};

/// Row `self` of S^T (T W_T^T), concatenated with agent `self`'s embedding.
inline Tensor diamond_agent_out(const Tensor& weights, const Tensor& task_values, const Tensor& agents, std::size_t self) {
  const Tensor own_column = slice_cols(weights, self, self + 1);
  return concat_features(matmul(transpose(own_column), task_values), gather_rows(agents, {self}));
}

/// One Diamond attention evaluation from agent `self`'s point of view.
///
/// S = softmax_agents(T A^T / sqrt(d) + M); task_out = S (A W_A^T) (+) T;
/// agent_out = row `self` of S^T (T W_T^T) (+) A. `agent_values` may carry a
/// precomputed A W_A^T shared by all agents of the block.
inline DiamondOutput diamond_attention(const Tensor& agents, const Tensor& tasks, const Tensor& mask, std::size_t self,
                                       const Tensor& w_agent, const Tensor& w_task, const Tensor& agent_values = {}) {
  agents.require_matrix("diamond_attention");
  tasks.require_matrix("diamond_attention");
  const std::size_t d = agents.cols();
  if (tasks.cols() != d)
    throw ShapeError("diamond_attention: agent width " + std::to_string(d) + " vs task width " + std::to_string(tasks.cols()));
  if (self >= agents.rows()) throw ShapeError("diamond_attention: agent index out of range");

  const float scale = 1.0f / std::sqrt(static_cast<float>(d));
  const Tensor scores = mul_scalar(linear(tasks, agents), scale);
  Tensor weights = masked_softmax(scores, mask, 1);
  const Tensor av = agent_values.defined() ? agent_values : linear(agents, w_agent);
  Tensor task_out = concat_features(matmul(weights, av), tasks);
  Tensor tv = linear(tasks, w_task);
  Tensor agent_out = diamond_agent_out(weights, tv, agents, self);
  return {std::move(task_out), std::move(agent_out), std::move(weights), std::move(tv)};
}

// ---------------------------------------------------------------------------
// Policy network

enum class MaskVariant { Structured, NoMask, Dropout };

inline const char* to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::Structured: return "structured";
    case MaskVariant::NoMask: return "no_mask";
    case MaskVariant::Dropout: return "dropout";
  }
  return "?";
}

inline MaskVariant parse_variant(const std::string& s) {
  if (s == "structured") return MaskVariant::Structured;
  if (s == "no_mask") return MaskVariant::NoMask;
  if (s == "dropout") return MaskVariant::Dropout;
  throw std::invalid_argument("unknown variant '" + s + "' (expected structured, no_mask or dropout)");
}

struct PolicyConfig {
  std::size_t agent_features = 1;  // raw width, before the random scalar is appended
  std::size_t task_features = 8;
  std::size_t d = 64;
  std::size_t hidden = 64;
  std::size_t blocks = 3;
  MaskVariant variant = MaskVariant::Structured;
  float p_drop = 0.5f;
  bool observe_scalar = true;  // false feeds 0 in place of r_i
  float logit_scale = 1.0f;    // multiplies <agent, task> in the action head

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

struct PolicyOutput {
  Tensor logits;  // [n x m]
  Tensor value;   // scalar, undefined when not requested
};

class PolicyNet {
 public:
  PolicyNet(PolicyConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.d == 0 || cfg.hidden == 0 || cfg.blocks == 0 || cfg.task_features == 0)
      throw std::invalid_argument("policy widths and block count must be positive");
    Stream rng = Stream(seed).split(0x1417);
    agent_embed_ = Mlp2(cfg.agent_features + 1, cfg.hidden, cfg.d, rng);
    task_embed_ = Mlp2(cfg.task_features, cfg.hidden, cfg.d, rng);
    for (std::size_t b = 0; b < cfg.blocks; ++b) blocks_.emplace_back(cfg.d, cfg.hidden, rng);
    value_head_ = Mlp2(cfg.d, cfg.hidden, 1, rng);
  }

  [[nodiscard]] const PolicyConfig& config() const noexcept { return cfg_; }

  /// Every learned tensor, each exactly once, with unique names.
  [[nodiscard]] ParameterList parameters() const {
    ParameterList out;
    agent_embed_.collect(out, "agent_embed");
    task_embed_.collect(out, "task_embed");
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "block" + std::to_string(b));
    value_head_.collect(out, "value_head");
    return out;
  }

  /// Deep copy; the handles in `parameters()` of the copy are independent.
  [[nodiscard]] PolicyNet clone() const {
    PolicyNet copy(cfg_, 0);
    copy.copy_parameters_from(*this);
    return copy;
  }

  void copy_parameters_from(const PolicyNet& other) {
    auto dst = parameters();
    const auto src = other.parameters();
    if (dst.size() != src.size()) throw ShapeError("parameter count differs");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].tensor.shape() != src[i].tensor.shape()) throw ShapeError("parameter " + dst[i].name + " has a different shape");
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
    }
  }

  /// The mask this network's variant uses for scalars `r`. Only the dropout
  /// variant consumes `rng`.
  [[nodiscard]] RankMask make_mask(const RandomScalars& r, Stream& rng) const {
    switch (cfg_.variant) {
      case MaskVariant::Structured: return build_mask(r);
      case MaskVariant::NoMask: return empty_mask(r.size());
      case MaskVariant::Dropout: return dropout_mask(r.size(), cfg_.p_drop, rng);
    }
    throw std::logic_error("unreachable");
  }

  /// Logits [n x m] under `mask`, and optionally the team value. The value is
  /// always computed with no mask so it is invariant to agent order.
  [[nodiscard]] PolicyOutput forward(const Tensor& agent_features, const Tensor& task_features, const RandomScalars& r,
                                     const RankMask& mask, bool with_value = true) const {
    const Tensor agents0 = embed_agents(agent_features, r);
    const Tensor tasks0 = embed_tasks(task_features);
    const std::size_t n = agents0.rows();
    if (mask.agents() != n) throw ShapeError("mask covers " + std::to_string(mask.agents()) + " agents, input has " + std::to_string(n));

    PolicyOutput out;
    auto [agent_tokens, task_streams, group_of] = run_blocks(agents0, tasks0, mask);
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor token = gather_rows(agent_tokens, {i});
      rows.push_back(mul_scalar(linear(token, task_streams[group_of[i]]), cfg_.logit_scale));
    }
    out.logits = concat_rows(rows);

    if (with_value) {
      auto unmasked = run_blocks(agents0, tasks0, empty_mask(n));
      out.value = reshape(value_head_(mean_rows(std::get<0>(unmasked))), {});
    }
    return out;
  }

  [[nodiscard]] Tensor value(const Tensor& agent_features, const Tensor& task_features, const RandomScalars& r) const {
    const Tensor agents0 = embed_agents(agent_features, r);
    const Tensor tasks0 = embed_tasks(task_features);
    auto unmasked = run_blocks(agents0, tasks0, empty_mask(agents0.rows()));
    return reshape(value_head_(mean_rows(std::get<0>(unmasked))), {});
  }

 private:
  [[nodiscard]] Tensor embed_agents(const Tensor& features, const RandomScalars& r) const {
    features.require_matrix("policy agents");
    if (features.cols() != cfg_.agent_features)
      throw ShapeError("agent features have width " + std::to_string(features.cols()) + ", network expects " +
                       std::to_string(cfg_.agent_features));
    const std::size_t n = features.rows();
    if (n == 0) throw ShapeError("policy needs at least one agent");
    if (r.size() != n) throw ShapeError("need one random scalar per agent");
    std::vector<float> col(n, 0.0f);
    if (cfg_.observe_scalar) col = r.r;
    return agent_embed_(concat_features(features, Tensor::matrix(n, 1, std::move(col))));
  }

  [[nodiscard]] Tensor embed_tasks(const Tensor& features) const {
    features.require_matrix("policy tasks");
    if (features.cols() != cfg_.task_features)
      throw ShapeError("task features have width " + std::to_string(features.cols()) + ", network expects " +
                       std::to_string(cfg_.task_features));
    if (features.rows() == 0) throw ShapeError("policy needs at least one task");
    return task_embed_(features);
  }

  // Agents whose mask rows agree see the same task stream in every block, so
  // the per-agent task computation is done once per distinct mask row.
  // Returns (agent tokens [n x d], task stream per group [m x d], group of agent).
  [[nodiscard]] std::tuple<Tensor, std::vector<Tensor>, std::vector<std::size_t>> run_blocks(const Tensor& agents0,
                                                                                              const Tensor& tasks0,
                                                                                              const RankMask& mask) const {
    const std::size_t n = agents0.rows();
    const std::size_t m = tasks0.rows();
    std::map<std::vector<char>, std::size_t> group_index;
    std::vector<std::size_t> group_of(n);
    std::vector<std::size_t> leader;
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, fresh] = group_index.try_emplace(mask.row(i), leader.size());
      if (fresh) leader.push_back(i);
      group_of[i] = it->second;
    }
    std::vector<Tensor> group_mask;
    for (std::size_t g : leader) group_mask.push_back(mask.matrix(g, m));

    Tensor agents = agents0;
    std::vector<Tensor> streams(leader.size(), tasks0);
    for (const auto& block : blocks_) {
      const Tensor av = linear(agents, block.w_agent);
      std::vector<Tensor> next_streams(leader.size());
      std::vector<Tensor> tokens(n);
      for (std::size_t g = 0; g < leader.size(); ++g) {
        auto out = diamond_attention(agents, streams[g], group_mask[g], leader[g], block.w_agent, block.w_task, av);
        next_streams[g] = block.task_proj(out.task_out);
        for (std::size_t i = 0; i < n; ++i) {
          if (group_of[i] != g) continue;
          const Tensor agent_out = i == leader[g] ? out.agent_out : diamond_agent_out(out.weights, out.task_values, agents, i);
          tokens[i] = block.agent_proj(agent_out);
        }
      }
      agents = concat_rows(tokens);
      streams = std::move(next_streams);
    }
    return {agents, streams, group_of};
  }

  PolicyConfig cfg_;
  Mlp2 agent_embed_;
  Mlp2 task_embed_;
  std::vector<DiamondBlock> blocks_;
  Mlp2 value_head_;
};

/// Structured-mask forward pass.
inline PolicyOutput forward_policy(const PolicyNet& net, const Tensor& agents, const Tensor& tasks, const RandomScalars& r,
                                   bool with_value = true) {
  return net.forward(agents, tasks, r, build_mask(r), with_value);
}

/// Forward pass with every mask entry open. The scalars still reach the
/// agent features.
inline PolicyOutput ablation_no_mask(const PolicyNet& net, const Tensor& agents, const Tensor& tasks, const RandomScalars& r,
                                     bool with_value = true) {
  return net.forward(agents, tasks, r, empty_mask(r.size()), with_value);
}

/// Forward pass with the rank mask replaced by i.i.d. peer dropout.
inline PolicyOutput ablation_dropout(const PolicyNet& net, const Tensor& agents, const Tensor& tasks, const RandomScalars& r,
                                     double p_drop, Stream& rng, bool with_value = true) {
  return net.forward(agents, tasks, r, dropout_mask(r.size(), p_drop, rng), with_value);
}

}  // namespace symbreak
