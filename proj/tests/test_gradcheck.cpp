#include <gtest/gtest.h>

#include <set>

#include "symbreak/gradcheck.hpp"

using namespace symbreak;

TEST(Gradcheck, EveryOpPassesOnTenRandomInstances) {
  GradcheckOptions opt;
  for (const auto& c : gradcheck_cases()) {
    const auto r = run_gradcheck_case(c, opt, 10);
    EXPECT_TRUE(r.passed()) << r.op << " max error " << r.max_error;
    EXPECT_GT(r.entries, 0u) << r.op;
  }
}

TEST(Gradcheck, PolicyEndToEndAtWidthEight) {
  const GradcheckOptions opt;
  const auto r = run_gradcheck_case(policy_gradcheck_case(), opt, opt.instances);
  EXPECT_TRUE(r.passed()) << "max error " << r.max_error;
  EXPECT_GT(r.entries, 1000u);
}

TEST(Gradcheck, SuiteCoversTheDifferentiableOps) {
  std::set<std::string> names;
  for (const auto& c : gradcheck_cases()) names.insert(c.op);
  for (const char* op : {"matmul", "transpose", "linear", "add", "sub", "mul", "mul_scalar", "add_scalar", "neg", "exp",
                         "square", "silu", "clamp", "minimum", "sum", "mean", "mean_rows", "masked_softmax(axis=0)",
                         "masked_softmax(axis=1)", "log_softmax(axis=0)", "log_softmax(axis=1)", "concat_features",
                         "slice_cols", "concat_rows", "gather_rows", "pick_per_row", "reshape", "diamond_attention"})
    EXPECT_TRUE(names.count(op)) << op;
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // silu's forward with a deliberately broken backward (gradient of x instead).
  auto broken = [](const Tensor& x) {
    auto y = silu(x);
    return add(y.detach(), sub(x, x.detach()));
  };
  auto x = Tensor::matrix({{0.5f, -1.0f, 2.0f}}, true);
  const auto [err, entries] = gradcheck([&](const std::vector<Tensor>& in) { return sum(broken(in[0])); }, {x});
  EXPECT_EQ(entries, 3u);
  EXPECT_GT(err, 1e-2);
}

TEST(Gradcheck, RestoresInputsAndRejectsNonLeaves) {
  auto x = Tensor::matrix({{0.25f, 0.5f}}, true);
  (void)gradcheck([](const std::vector<Tensor>& in) { return sum(exp(in[0])); }, {x});
  EXPECT_EQ(x.data()[0], 0.25f);
  EXPECT_EQ(x.data()[1], 0.5f);
  EXPECT_THROW((void)gradcheck([](const std::vector<Tensor>& in) { return sum(in[0]); }, {square(x)}), GraphError);
}

TEST(Gradcheck, ErrorIsRelativeAboveUnitScale) {
  EXPECT_DOUBLE_EQ(gradient_error(100.0, 101.0), 1.0 / 101.0);
  EXPECT_DOUBLE_EQ(gradient_error(0.001, 0.002), 0.001);
}
