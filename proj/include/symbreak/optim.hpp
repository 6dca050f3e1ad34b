#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "symbreak/tensor.hpp"

namespace symbreak {

struct Parameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<Parameter>;

/// Throws if any name repeats or any tensor appears twice.
inline void validate_parameters(const ParameterList& params) {
  std::unordered_set<std::string> names;
  std::unordered_set<const void*> tensors;
  for (const auto& p : params) {
    if (!names.insert(p.name).second) throw std::invalid_argument("duplicate parameter name: " + p.name);
    if (!tensors.insert(p.tensor.impl().get()).second) throw std::invalid_argument("parameter listed twice: " + p.name);
  }
}

inline void zero_grads(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// Global L2 norm of all gradients (absent grads count as zero).
inline double grad_norm(const ParameterList& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (float g : p.tensor.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
inline double clip_grad_norm(ParameterList& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const auto scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& p : params)
      for (float& g : p.tensor.grad()) g *= scale;
  }
  return norm;
}

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class AdamState {
 public:
  AdamState(const ParameterList& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.numel(), 0.0f);
      v_.emplace_back(p.tensor.numel(), 0.0f);
    }
  }

  [[nodiscard]] const AdamConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] long step_count() const noexcept { return t_; }
  [[nodiscard]] std::size_t size() const noexcept { return m_.size(); }

  /// Bias-corrected Adam update, then clears the grads. Every parameter must
  /// carry a gradient.
  void step(ParameterList& params) {
    if (params.size() != m_.size()) throw std::invalid_argument("adam: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].tensor.has_grad()) throw std::logic_error("adam: missing gradient for " + params[i].name);
      if (params[i].tensor.numel() != m_[i].size()) throw ShapeError("adam: moment buffer shape mismatch for " + params[i].name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].tensor.data();
      auto g = params[i].tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    zero_grads(params);
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  long t_ = 0;
};

inline void adam_step(ParameterList& params, AdamState& state) { state.step(params); }

}  // namespace symbreak
