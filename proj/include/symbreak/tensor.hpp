#pragma once

// Dense row-major float tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a shared handle. Ops on tensors that require grad record a Node
// holding the op's inputs and a backward rule; backward() walks that graph in
// reverse topological order. The graph is rebuilt on every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace symbreak {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GraphError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Additive mask value for a suppressed attention entry.
inline constexpr float kMaskedScore = -1e9f;

/// Any mask entry at or below this is treated as masked; anything else must be 0.
inline constexpr float kMaskedThreshold = -1e8f;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output's grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data, bool requires_grad = false) {
    return from_data({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows, bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return matrix(r, c, std::move(data), requires_grad);
  }

  static Tensor scalar(float v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0f;
    return t;
  }

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] std::size_t rank() const { return impl_->shape.size(); }
  [[nodiscard]] std::size_t numel() const { return impl_->data.size(); }
  [[nodiscard]] std::size_t rows() const {
    require_matrix("rows");
    return impl_->shape[0];
  }
  [[nodiscard]] std::size_t cols() const {
    require_matrix("cols");
    return impl_->shape[1];
  }

  [[nodiscard]] std::span<float> data() { return impl_->data; }
  [[nodiscard]] std::span<const float> data() const { return impl_->data; }

  /// Empty span until a backward pass has reached this tensor.
  [[nodiscard]] std::span<float> grad() { return impl_->grad; }
  [[nodiscard]] std::span<const float> grad() const { return impl_->grad; }
  [[nodiscard]] bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  [[nodiscard]] float at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  [[nodiscard]] float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  [[nodiscard]] bool is_leaf() const { return impl_->node == nullptr; }

  /// Copy of the values with no graph attached.
  [[nodiscard]] Tensor detach() const { return from_data(shape(), impl_->data, false); }

  [[nodiscard]] const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  void require_matrix(const char* op) const {
    if (impl_->shape.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(shape()));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<float>, std::initializer_list<Tensor>,
                            std::function<void(const detail::TensorImpl&)>);
  friend Tensor make_result_v(Shape, std::vector<float>, const std::vector<Tensor>&,
                              std::function<void(const detail::TensorImpl&)>);
};

// ---------------------------------------------------------------------------
// Graph plumbing

namespace detail {

inline void check_finite([[maybe_unused]] const std::vector<float>& v, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (float x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": produced a non-finite value");
#endif
}

}  // namespace detail

inline Tensor make_result_v(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                            std::function<void(const detail::TensorImpl&)> backward) {
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  if (!detail::grad_mode()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node>();
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl_->node = std::move(node);
  out.impl_->requires_grad = true;
  return out;
}

inline Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                          std::function<void(const detail::TensorImpl&)> backward) {
  return make_result_v(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

namespace detail {

// Accumulates `g` into `t`'s grad if it participates in the graph.
inline void accumulate(TensorImpl& t, std::span<const float> g) {
  if (!t.requires_grad) return;
  t.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

}  // namespace detail

/// Populates grads of every tensor reachable from `loss`. Each graph may be
/// walked once; a second call without a fresh forward pass throws.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw GraphError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  if (!loss.requires_grad()) throw GraphError("backward() on a loss that is detached from every tracked tensor");

  using detail::TensorImpl;
  std::vector<TensorImpl*> order;
  std::unordered_set<const TensorImpl*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (auto* t : order)
    if (t->node && t->node->consumed) throw GraphError("backward() called twice on the same graph; run a new forward pass");

  TensorImpl& root = *loss.impl();
  root.ensure_grad();
  root.grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node) continue;
    t->ensure_grad();
    t->node->backward(*t);
    t->node->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// Eight interleaved partial sums so the loop vectorizes; the summation order
// is fixed, so results stay deterministic.
inline float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[k + l] * b[k + l];
  float s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  a.require_matrix("matmul");
  b.require_matrix("matmul");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  if (b.rows() != p) throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<float> out(m * q, 0.0f);
  const float* A = a.data().data();
  const float* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < p; ++k) {
      const float aik = A[i * p + k];
      const float* brow = B + k * q;
      float* orow = out.data() + i * q;
      for (std::size_t j = 0; j < q; ++j) orow[j] += aik * brow[j];
    }
  detail::check_finite(out, "matmul");
  auto ai = a.impl(), bi = b.impl();
  return make_result({m, q}, std::move(out), {a, b}, [ai, bi, m, p, q](const detail::TensorImpl& o) {
    const float* G = o.grad.data();
    if (ai->requires_grad) {  // dA = G B^T
      ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < p; ++k) {
          ai->grad[i * p + k] += detail::dot(G + i * q, bi->data.data() + k * q, q);
        }
    }
    if (bi->requires_grad) {  // dB = A^T G
      bi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < p; ++k) {
          const float aik = ai->data[i * p + k];
          for (std::size_t j = 0; j < q; ++j) bi->grad[k * q + j] += aik * G[i * q + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  x.require_matrix("transpose");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<float> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  auto xi = x.impl();
  return make_result({c, r}, std::move(out), {x}, [xi, r, c](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += o.grad[j * r + i];
  });
}

/// x W^T + b, with x [m x in], W [out x in], b [out]. The bias is the only
/// broadcast in this library: it is added to every row. An undefined `b`
/// means no bias.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  x.require_matrix("linear");
  w.require_matrix("linear");
  const std::size_t m = x.rows(), in = x.cols(), out_w = w.rows();
  if (w.cols() != in) throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != out_w) throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  std::vector<float> out(m * out_w);
  const float* X = x.data().data();
  const float* W = w.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < out_w; ++o)
      out[i * out_w + o] = (has_bias ? b.data()[o] : 0.0f) + detail::dot(X + i * in, W + o * in, in);
  detail::check_finite(out, "linear");
  auto xi = x.impl(), wi = w.impl();
  auto bi = has_bias ? b.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result_v({m, out_w}, std::move(out), inputs, [xi, wi, bi, m, in, out_w](const detail::TensorImpl& o) {
    const float* G = o.grad.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t oo = 0; oo < out_w; ++oo) {
          const float g = G[i * out_w + oo];
          float* dst = xi->grad.data() + i * in;
          const float* src = wi->data.data() + oo * in;
          for (std::size_t k = 0; k < in; ++k) dst[k] += g * src[k];
        }
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t oo = 0; oo < out_w; ++oo) {
          const float g = G[i * out_w + oo];
          float* dst = wi->grad.data() + oo * in;
          const float* src = xi->data.data() + i * in;
          for (std::size_t k = 0; k < in; ++k) dst[k] += g * src[k];
        }
    }
    if (bi && bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t oo = 0; oo < out_w; ++oo) bi->grad[oo] += G[i * out_w + oo];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// y = f(x), dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  check_finite(out, name);
  auto xi = x.impl();
  std::vector<float> y = out;
  return make_result(x.shape(), std::move(out), {x}, [xi, df, y = std::move(y)](const TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < y.size(); ++i) xi->grad[i] += o.grad[i] * df(xi->data[i], y[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& o) {
    detail::accumulate(*ai, o.grad);
    detail::accumulate(*bi, o.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& o) {
    detail::accumulate(*ai, o.grad);
    if (!bi->requires_grad) return;
    bi->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](const detail::TensorImpl& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
    }
  });
}

inline Tensor mul_scalar(const Tensor& x, float s) {
  return detail::unary(x, "mul_scalar", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

inline Tensor add_scalar(const Tensor& x, float s) {
  return detail::unary(x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0f); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, "square", [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

/// x * sigmoid(x).
inline Tensor silu(const Tensor& x) {
  auto sig = [](float v) { return 1.0f / (1.0f + std::exp(-v)); };
  return detail::unary(
      x, "silu", [sig](float v) { return v * sig(v); },
      [sig](float v, float) {
        const float s = sig(v);
        return s * (1.0f + v * (1.0f - s));
      });
}

/// Clamps to [lo, hi]; the gradient is zero where the clamp is active.
inline Tensor clamp(const Tensor& x, float lo, float hi) {
  return detail::unary(
      x, "clamp", [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float v, float) { return (v < lo || v > hi) ? 0.0f : 1.0f; });
}

/// Elementwise min. Ties route the gradient to `a`.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "minimum");
  std::vector<float> out(a.numel());
  std::vector<char> pick_a(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    pick_a[i] = a.data()[i] <= b.data()[i];
    out[i] = pick_a[i] ? a.data()[i] : b.data()[i];
  }
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi, pick_a = std::move(pick_a)](const detail::TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      auto& dst = pick_a[i] ? *ai : *bi;
      if (!dst.requires_grad) continue;
      dst.ensure_grad();
      dst.grad[i] += o.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  float s = 0.0f;
  for (float v : x.data()) s += v;
  auto xi = x.impl();
  return make_result({}, {s}, {x}, [xi](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (auto& g : xi->grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return mul_scalar(sum(x), 1.0f / static_cast<float>(x.numel()));
}

/// Column means of a matrix: [m x n] -> [1 x n].
inline Tensor mean_rows(const Tensor& x) {
  x.require_matrix("mean_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (r == 0) throw ShapeError("mean_rows of a matrix with no rows");
  std::vector<float> out(c, 0.0f);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  const float inv = 1.0f / static_cast<float>(r);
  for (auto& v : out) v *= inv;
  auto xi = x.impl();
  return make_result({1, c}, std::move(out), {x}, [xi, r, c, inv](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += o.grad[j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

// Visits each slice of a matrix along `axis` as (offset, stride, length).
template <class F>
void for_each_slice(std::size_t rows, std::size_t cols, int axis, F&& f) {
  if (axis == 1) {
    for (std::size_t i = 0; i < rows; ++i) f(i * cols, std::size_t{1}, cols);
  } else if (axis == 0) {
    for (std::size_t j = 0; j < cols; ++j) f(j, cols, rows);
  } else {
    throw ShapeError("softmax axis must be 0 or 1");
  }
}

}  // namespace detail

/// Softmax of `scores + mask` along `axis`. Mask entries must be 0 or masked
/// (<= kMaskedThreshold, e.g. kMaskedScore or -inf). Masked positions get
/// weight exactly 0. A slice with no unmasked entry is an error.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& mask, int axis) {
  scores.require_matrix("masked_softmax");
  detail::require_same(scores, mask, "masked_softmax");
  const std::size_t r = scores.rows(), c = scores.cols();
  const float* S = scores.data().data();
  const float* M = mask.data().data();
  std::vector<float> out(r * c, 0.0f);
  for (std::size_t i = 0; i < r * c; ++i)
    if (M[i] != 0.0f && !(M[i] <= kMaskedThreshold))
      throw std::invalid_argument("masked_softmax: mask entries must be 0 or masked, got " + std::to_string(M[i]));

  detail::for_each_slice(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
    float mx = -HUGE_VALF;
    bool any = false;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t idx = off + t * stride;
      if (M[idx] != 0.0f) continue;
      mx = any ? std::max(mx, S[idx]) : S[idx];
      any = true;
    }
    if (!any) throw std::invalid_argument("masked_softmax: a slice is fully masked");
    float z = 0.0f;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t idx = off + t * stride;
      if (M[idx] != 0.0f) continue;
      out[idx] = std::exp(S[idx] - mx);
      z += out[idx];
    }
    for (std::size_t t = 0; t < len; ++t) out[off + t * stride] /= z;
  });
  detail::check_finite(out, "masked_softmax");

  auto si = scores.impl();
  std::vector<float> y = out;
  return make_result({r, c}, std::move(out), {scores}, [si, y = std::move(y), r, c, axis](const detail::TensorImpl& o) {
    if (!si->requires_grad) return;
    si->ensure_grad();
    detail::for_each_slice(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
      float dot = 0.0f;
      for (std::size_t t = 0; t < len; ++t) dot += o.grad[off + t * stride] * y[off + t * stride];
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = off + t * stride;
        si->grad[idx] += y[idx] * (o.grad[idx] - dot);
      }
    });
  });
}

/// Unmasked softmax along `axis`.
inline Tensor softmax(const Tensor& scores, int axis) {
  return masked_softmax(scores, Tensor::zeros(scores.shape()), axis);
}

inline Tensor log_softmax(const Tensor& x, int axis = 1) {
  x.require_matrix("log_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<float> out(r * c);
  detail::for_each_slice(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
    float mx = -HUGE_VALF;
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, x.data()[off + t * stride]);
    float z = 0.0f;
    for (std::size_t t = 0; t < len; ++t) z += std::exp(x.data()[off + t * stride] - mx);
    const float lz = mx + std::log(z);
    for (std::size_t t = 0; t < len; ++t) out[off + t * stride] = x.data()[off + t * stride] - lz;
  });
  detail::check_finite(out, "log_softmax");
  auto xi = x.impl();
  std::vector<float> y = out;
  return make_result({r, c}, std::move(out), {x}, [xi, y = std::move(y), r, c, axis](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    detail::for_each_slice(r, c, axis, [&](std::size_t off, std::size_t stride, std::size_t len) {
      float gs = 0.0f;
      for (std::size_t t = 0; t < len; ++t) gs += o.grad[off + t * stride];
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = off + t * stride;
        xi->grad[idx] += o.grad[idx] - std::exp(y[idx]) * gs;
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Row-wise feature concatenation: [m x p] (+) [m x q] -> [m x (p+q)].
inline Tensor concat_features(const Tensor& a, const Tensor& b) {
  a.require_matrix("concat_features");
  b.require_matrix("concat_features");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  if (b.rows() != m) throw ShapeError("concat_features: leading extents " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<float> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
  }
  auto ai = a.impl(), bi = b.impl();
  return make_result({m, p + q}, std::move(out), {a, b}, [ai, bi, m, p, q](const detail::TensorImpl& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) ai->grad[i * p + j] += o.grad[i * (p + q) + j];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) bi->grad[i * q + j] += o.grad[i * (p + q) + p + j];
    }
  });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  x.require_matrix("slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (begin > end || end > c) throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  const std::size_t w = end - begin;
  std::vector<float> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data().data() + i * c + begin, w, out.data() + i * w);
  auto xi = x.impl();
  return make_result({r, w}, std::move(out), {x}, [xi, r, c, w, begin](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) xi->grad[i * c + begin + j] += o.grad[i * w + j];
  });
}

/// Stacks matrices of equal width vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: widths differ");
    r += p.rows();
  }
  std::vector<float> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result_v({r, c}, std::move(out), parts, [impls = std::move(impls)](const detail::TensorImpl& o) {
    std::size_t off = 0;
    for (const auto& p : impls) {
      const std::size_t n = p->data.size();
      detail::accumulate(*p, std::span<const float>(o.grad).subspan(off, n));
      off += n;
    }
  });
}

/// Selects rows by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
  x.require_matrix("gather_rows");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<float> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.data().data() + idx[i] * c, c, out.data() + i * c);
  }
  auto xi = x.impl();
  const std::size_t n = idx.size();
  return make_result({n, c}, std::move(out), {x}, [xi, idx = std::move(idx), c](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) xi->grad[idx[i] * c + j] += o.grad[i * c + j];
  });
}

/// out[i] = x[i, cols[i]]: one entry per row, as an [m x 1] column.
inline Tensor pick_per_row(const Tensor& x, std::vector<std::size_t> cols) {
  x.require_matrix("pick_per_row");
  const std::size_t r = x.rows(), c = x.cols();
  if (cols.size() != r) throw ShapeError("pick_per_row: need one column index per row");
  std::vector<float> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i] >= c) throw ShapeError("pick_per_row: column index out of range");
    out[i] = x.data()[i * c + cols[i]];
  }
  auto xi = x.impl();
  return make_result({r, 1}, std::move(out), {x}, [xi, cols = std::move(cols), c](const detail::TensorImpl& o) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < cols.size(); ++i) xi->grad[i * c + cols[i]] += o.grad[i];
  });
}

/// Same values, new shape with the same element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  auto xi = x.impl();
  return make_result(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()), {x},
                     [xi](const detail::TensorImpl& o) { detail::accumulate(*xi, o.grad); });
}

}  // namespace symbreak
