#pragma once

// Central finite-difference checks of every differentiable op and of the full
// policy network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "symbreak/attention.hpp"
#include "symbreak/random.hpp"
#include "symbreak/tensor.hpp"

namespace symbreak {

struct GradcheckOptions {
  double h = 1e-3;
  double tolerance = 1e-3;
  int instances = 10;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::string op;
  int instances = 0;
  std::size_t entries = 0;  // gradient entries compared
  double max_error = 0.0;
  double tolerance = 1e-3;

  [[nodiscard]] bool passed() const { return max_error < tolerance; }
};

/// Error between an analytic and a numeric derivative: |a - n| divided by
/// max(1, |a|, |n|), i.e. relative once gradients exceed unit scale.
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares backward() of the scalar `f(inputs)` against central differences
/// in every entry of every input. Inputs must be grad-tracked leaves; their
/// data is restored afterwards. Returns the worst error and the entry count.
inline std::pair<double, std::size_t> gradcheck(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-3) {
  for (auto& t : inputs) {
    if (!t.requires_grad() || !t.is_leaf()) throw GraphError("gradcheck inputs must be grad-tracked leaves");
    t.zero_grad();
  }
  backward(f(inputs));
  std::vector<std::vector<float>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    else analytic.emplace_back(t.numel(), 0.0f);
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  std::size_t entries = 0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    auto data = inputs[a].data();
    for (std::size_t e = 0; e < data.size(); ++e) {
      const float x = data[e];
      const float xp = x + static_cast<float>(h);
      const float xm = x - static_cast<float>(h);
      data[e] = xp;
      const double fp = f(inputs).item();
      data[e] = xm;
      const double fm = f(inputs).item();
      data[e] = x;
      const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
      worst = std::max(worst, gradient_error(analytic[a][e], numeric));
      ++entries;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return {worst, entries};
}

namespace detail {

inline Tensor random_tensor(Shape shape, Stream& rng, float lo = -1.0f, float hi = 1.0f, bool requires_grad = true) {
  auto t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform_float();
  return t;
}

inline std::size_t random_extent(Stream& rng, std::size_t lo = 1, std::size_t hi = 4) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

/// sum(w * y) with fixed random weights, so every output entry matters.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

/// Random 0 / kMaskedScore mask with at least one open entry per slice along `axis`.
inline Tensor random_mask(std::size_t r, std::size_t c, int axis, Stream& rng) {
  auto m = Tensor::zeros({r, c});
  for (auto& v : m.data()) v = rng.bernoulli(0.4) ? kMaskedScore : 0.0f;
  if (axis == 1)
    for (std::size_t i = 0; i < r; ++i) m.data()[i * c + rng.below(c)] = 0.0f;
  else
    for (std::size_t j = 0; j < c; ++j) m.data()[rng.below(r) * c + j] = 0.0f;
  return m;
}

/// Values in [-1, 1] kept at least `gap` away from every point in `kinks`.
inline Tensor random_away_from(Shape shape, Stream& rng, std::vector<float> kinks, float gap) {
  auto t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) {
    do v = -1.0f + 2.0f * rng.uniform_float();
    while (std::any_of(kinks.begin(), kinks.end(), [&](float k) { return std::abs(v - k) < gap; }));
  }
  return t;
}

}  // namespace detail

/// One case of the suite: builds the inputs and the scalar loss for an instance.
struct GradcheckCase {
  std::string op;
  std::function<std::pair<ScalarFn, std::vector<Tensor>>(Stream&)> make;
};

inline std::vector<GradcheckCase> gradcheck_cases() {
  using detail::random_extent;
  using detail::random_tensor;
  using detail::weighted_sum;
  std::vector<GradcheckCase> cases;

  // Elementwise unary ops on a random matrix.
  auto unary_case = [&](std::string name, std::function<Tensor(const Tensor&)> op) {
    cases.push_back({std::move(name), [op](Stream& rng) {
                       const std::size_t r = random_extent(rng), c = random_extent(rng);
                       auto w = random_tensor({r, c}, rng, -1, 1, false);
                       ScalarFn f = [op, w](const std::vector<Tensor>& in) { return weighted_sum(op(in[0]), w); };
                       return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                     }});
  };
  auto binary_case = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op) {
    cases.push_back({std::move(name), [op](Stream& rng) {
                       const std::size_t r = random_extent(rng), c = random_extent(rng);
                       auto w = random_tensor({r, c}, rng, -1, 1, false);
                       ScalarFn f = [op, w](const std::vector<Tensor>& in) { return weighted_sum(op(in[0], in[1]), w); };
                       return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng), random_tensor({r, c}, rng)}};
                     }});
  };

  cases.push_back({"matmul", [](Stream& rng) {
                     const std::size_t m = random_extent(rng), p = random_extent(rng), q = random_extent(rng);
                     auto w = random_tensor({m, q}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1]), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({m, p}, rng), random_tensor({p, q}, rng)}};
                   }});
  cases.push_back({"transpose", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     auto w = random_tensor({c, r}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(transpose(in[0]), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"linear", [](Stream& rng) {
                     const std::size_t m = random_extent(rng), in = random_extent(rng), out = random_extent(rng);
                     auto w = random_tensor({m, out}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& x) { return weighted_sum(linear(x[0], x[1], x[2]), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({m, in}, rng), random_tensor({out, in}, rng),
                                                             random_tensor({out}, rng)}};
                   }});
  cases.push_back({"linear(no bias)", [](Stream& rng) {
                     const std::size_t m = random_extent(rng), in = random_extent(rng), out = random_extent(rng);
                     auto w = random_tensor({m, out}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& x) { return weighted_sum(linear(x[0], x[1]), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({m, in}, rng), random_tensor({out, in}, rng)}};
                   }});
  binary_case("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
  binary_case("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
  binary_case("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
  unary_case("mul_scalar", [](const Tensor& x) { return mul_scalar(x, -1.7f); });
  unary_case("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3f); });
  unary_case("neg", [](const Tensor& x) { return neg(x); });
  unary_case("exp", [](const Tensor& x) { return exp(x); });
  unary_case("square", [](const Tensor& x) { return square(x); });
  unary_case("silu", [](const Tensor& x) { return silu(mul_scalar(x, 3.0f)); });
  cases.push_back({"clamp", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     auto w = random_tensor({r, c}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(clamp(in[0], -0.5f, 0.5f), w); };
                     return std::pair{f, std::vector<Tensor>{detail::random_away_from({r, c}, rng, {-0.5f, 0.5f}, 0.01f)}};
                   }});
  cases.push_back({"minimum", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     auto w = random_tensor({r, c}, rng, -1, 1, false);
                     auto a = random_tensor({r, c}, rng);
                     auto b = random_tensor({r, c}, rng);
                     for (std::size_t i = 0; i < a.numel(); ++i)
                       if (std::abs(a.data()[i] - b.data()[i]) < 0.01f) b.data()[i] = a.data()[i] + 0.5f;
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(minimum(in[0], in[1]), w); };
                     return std::pair{f, std::vector<Tensor>{a, b}};
                   }});
  cases.push_back({"sum", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     ScalarFn f = [](const std::vector<Tensor>& in) { return mul_scalar(sum(in[0]), 0.7f); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"mean", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     ScalarFn f = [](const std::vector<Tensor>& in) { return mean(square(in[0])); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"mean_rows", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     auto w = random_tensor({1, c}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(mean_rows(in[0]), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  for (int axis : {0, 1}) {
    cases.push_back({"masked_softmax(axis=" + std::to_string(axis) + ")", [axis](Stream& rng) {
                       const std::size_t r = random_extent(rng, 1, 5), c = random_extent(rng, 1, 5);
                       auto w = random_tensor({r, c}, rng, -1, 1, false);
                       auto m = detail::random_mask(r, c, axis, rng);
                       ScalarFn f = [w, m, axis](const std::vector<Tensor>& in) {
                         return weighted_sum(masked_softmax(mul_scalar(in[0], 2.0f), m, axis), w);
                       };
                       return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                     }});
    cases.push_back({"log_softmax(axis=" + std::to_string(axis) + ")", [axis](Stream& rng) {
                       const std::size_t r = random_extent(rng, 1, 5), c = random_extent(rng, 1, 5);
                       auto w = random_tensor({r, c}, rng, -1, 1, false);
                       ScalarFn f = [w, axis](const std::vector<Tensor>& in) { return weighted_sum(log_softmax(in[0], axis), w); };
                       return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                     }});
  }
  cases.push_back({"concat_features", [](Stream& rng) {
                     const std::size_t m = random_extent(rng), p = random_extent(rng), q = random_extent(rng);
                     auto w = random_tensor({m, p + q}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(square(concat_features(in[0], in[1])), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({m, p}, rng), random_tensor({m, q}, rng)}};
                   }});
  cases.push_back({"slice_cols", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng, 2, 5);
                     const std::size_t b = rng.below(c), e = b + 1 + rng.below(c - b);
                     auto w = random_tensor({r, e - b}, rng, -1, 1, false);
                     ScalarFn f = [w, b, e](const std::vector<Tensor>& in) { return weighted_sum(square(slice_cols(in[0], b, e)), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"concat_rows", [](Stream& rng) {
                     const std::size_t c = random_extent(rng), r1 = random_extent(rng), r2 = random_extent(rng);
                     auto w = random_tensor({r1 + r2, c}, rng, -1, 1, false);
                     ScalarFn f = [w](const std::vector<Tensor>& in) { return weighted_sum(square(concat_rows({in[0], in[1]})), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r1, c}, rng), random_tensor({r2, c}, rng)}};
                   }});
  cases.push_back({"gather_rows", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng), picks = random_extent(rng, 1, 6);
                     std::vector<std::size_t> idx(picks);
                     for (auto& i : idx) i = rng.below(r);  // repeats allowed
                     auto w = random_tensor({picks, c}, rng, -1, 1, false);
                     ScalarFn f = [w, idx](const std::vector<Tensor>& in) { return weighted_sum(square(gather_rows(in[0], idx)), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"pick_per_row", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     std::vector<std::size_t> cols(r);
                     for (auto& j : cols) j = rng.below(c);
                     auto w = random_tensor({r, 1}, rng, -1, 1, false);
                     ScalarFn f = [w, cols](const std::vector<Tensor>& in) {
                       return weighted_sum(square(pick_per_row(in[0], cols)), w);
                     };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"reshape", [](Stream& rng) {
                     const std::size_t r = random_extent(rng), c = random_extent(rng);
                     auto w = random_tensor({c, r}, rng, -1, 1, false);
                     ScalarFn f = [w, r, c](const std::vector<Tensor>& in) { return weighted_sum(square(reshape(in[0], {c, r})), w); };
                     return std::pair{f, std::vector<Tensor>{random_tensor({r, c}, rng)}};
                   }});
  cases.push_back({"diamond_attention", [](Stream& rng) {
                     const std::size_t n = random_extent(rng), m = random_extent(rng), d = random_extent(rng, 2, 4);
                     const std::size_t self = rng.below(n);
                     auto r = RandomScalars::sample(n, rng);
                     auto mask = build_mask(r).matrix(self, m);
                     auto wt = random_tensor({m, 2 * d}, rng, -1, 1, false);
                     auto wa = random_tensor({1, 2 * d}, rng, -1, 1, false);
                     ScalarFn f = [=](const std::vector<Tensor>& in) {
                       auto out = diamond_attention(in[0], in[1], mask, self, in[2], in[3]);
                       return add(weighted_sum(out.task_out, wt), weighted_sum(out.agent_out, wa));
                     };
                     return std::pair{f, std::vector<Tensor>{random_tensor({n, d}, rng), random_tensor({m, d}, rng),
                                                             random_tensor({d, d}, rng), random_tensor({d, d}, rng)}};
                   }});
  return cases;
}

/// Gradient of sum(w * logits) + c * value with respect to every parameter of
/// a freshly initialized network (d = hidden = 8, n = m = 2, structured mask).
inline GradcheckCase policy_gradcheck_case() {
  return {"policy_end_to_end", [](Stream& rng) {
            PolicyConfig cfg;
            cfg.d = 8;
            cfg.hidden = 8;
            cfg.task_features = 2;
            auto net = std::make_shared<PolicyNet>(cfg, rng());
            const auto agents = Tensor::full({2, 1}, 1.0f);
            const auto tasks = Tensor::identity(2);
            const auto r = RandomScalars::sample(2, rng);
            const auto mask = build_mask(r);
            auto w = detail::random_tensor({2, 2}, rng, -1, 1, false);
            const float c = -1.0f + 2.0f * rng.uniform_float();
            ScalarFn f = [=](const std::vector<Tensor>&) {
              auto out = net->forward(agents, tasks, r, mask, true);
              return add(detail::weighted_sum(out.logits, w), mul_scalar(out.value, c));
            };
            std::vector<Tensor> params;
            for (const auto& p : net->parameters()) params.push_back(p.tensor);
            return std::pair{f, params};
          }};
}

inline GradcheckResult run_gradcheck_case(const GradcheckCase& c, const GradcheckOptions& opt, int instances) {
  GradcheckResult res{c.op, instances, 0, 0.0, opt.tolerance};
  std::uint64_t tag = 0xcbf29ce484222325ULL;  // FNV-1a of the case name
  for (unsigned char ch : c.op) tag = (tag ^ ch) * 0x100000001b3ULL;
  const Stream master = Stream(opt.seed).split(tag);
  for (int i = 0; i < instances; ++i) {
    Stream rng = master.split(static_cast<std::uint64_t>(i));
    auto [f, inputs] = c.make(rng);
    auto [err, entries] = gradcheck(f, inputs, opt.h);
    res.max_error = std::max(res.max_error, err);
    res.entries += entries;
  }
  return res;
}

/// Every op case with `opt.instances` random instances, then the end-to-end
/// network case.
inline std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> out;
  for (const auto& c : gradcheck_cases()) out.push_back(run_gradcheck_case(c, opt, opt.instances));
  out.push_back(run_gradcheck_case(policy_gradcheck_case(), opt, opt.instances));
  return out;
}

}  // namespace symbreak
