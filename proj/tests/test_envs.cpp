#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "symbreak/envs.hpp"

using namespace symbreak;

namespace {

// P(all distinct) when n players pick uniformly among k actions.
double distinct_probability(int n, int k) {
  double p = 1.0;
  for (int i = 0; i < n; ++i) p *= static_cast<double>(k - i) / k;
  return std::max(p, 0.0);
}

// Always plays action i for agent i (mod k): a fixed, deterministic policy.
struct DiagonalPolicy {
  [[nodiscard]] std::vector<float> logits(const XorObservation& obs, Stream&) const {
    const int n = obs.env->players(), k = obs.env->actions();
    std::vector<float> out(static_cast<std::size_t>(n * k), 0.0f);
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i * k + i % k)] = 1.0f;
    return out;
  }
};

struct WrongShapePolicy {
  [[nodiscard]] std::vector<float> logits(const XorObservation&, Stream&) const { return {0.0f}; }
};

PolicyConfig small_config() {
  PolicyConfig c;
  c.d = 16;
  c.hidden = 16;
  return c;
}

}  // namespace

TEST(XorEnv, DistinctActionsWin) {
  const XorEnv env(3, 3);
  EXPECT_EQ(env.step(std::vector<int>{0, 1, 2}).reward, 1);
  EXPECT_EQ(env.step(std::vector<int>{2, 0, 1}).reward, 1);
  EXPECT_TRUE(env.step(std::vector<int>{2, 0, 1}).done);
}

TEST(XorEnv, AnyCollisionLoses) {
  const XorEnv env(3, 3);
  EXPECT_EQ(env.step(std::vector<int>{0, 0, 2}).reward, 0);
  EXPECT_EQ(env.step(std::vector<int>{1, 1, 1}).reward, 0);
  EXPECT_TRUE(env.step(std::vector<int>{1, 1, 1}).done);
}

TEST(XorEnv, TwoPlayersTwoActions) {
  const XorEnv env(2, 2);
  EXPECT_EQ(env.step(std::vector<int>{0, 1}).reward, 1);
  EXPECT_EQ(env.step(std::vector<int>{1, 0}).reward, 1);
  EXPECT_EQ(env.step(std::vector<int>{0, 0}).reward, 0);
  EXPECT_EQ(env.step(std::vector<int>{1, 1}).reward, 0);
}

TEST(XorEnv, SinglePlayerAlwaysWins) {
  const XorEnv env(1, 4);
  for (int a = 0; a < 4; ++a) EXPECT_EQ(env.step(std::vector<int>{a}).reward, 1);
}

TEST(XorEnv, InvalidInputsAreErrors) {
  EXPECT_THROW(XorEnv(0, 2), std::invalid_argument);
  EXPECT_THROW(XorEnv(2, 0), std::invalid_argument);
  EXPECT_THROW(XorEnv(2, 9), ShapeError);
  const XorEnv env(2, 2);
  EXPECT_THROW((void)env.step(std::vector<int>{0}), std::invalid_argument);
  EXPECT_THROW((void)env.step(std::vector<int>{0, 2}), std::out_of_range);
  EXPECT_THROW((void)env.step(std::vector<int>{-1, 0}), std::out_of_range);
}

TEST(XorEnv, FeaturesAreConstantAgentsAndOneHotTasks) {
  const XorEnv env(3, 4);
  const auto a = env.agent_features();
  EXPECT_EQ(a.shape(), (Shape{3, 1}));
  for (float v : a.data()) EXPECT_EQ(v, 1.0f);
  const auto t = env.task_features();
  EXPECT_EQ(t.shape(), (Shape{4, kDefaultTaskWidth}));
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c = 0; c < kDefaultTaskWidth; ++c) EXPECT_EQ(t.at(j, c), j == c ? 1.0f : 0.0f);
}

TEST(ActionSelection, ArgmaxTakesFirstMaximum) {
  EXPECT_EQ(argmax(std::vector<float>{0.0f, 2.0f, 2.0f}), 1);
  EXPECT_EQ(argmax(std::vector<float>{0.0f, 0.0f}), 0);
}

TEST(ActionSelection, CategoricalMatchesSoftmaxFrequencies) {
  const std::vector<float> row{0.0f, std::log(2.0f), std::log(5.0f)};
  const double probs[3] = {0.125, 0.25, 0.625};
  Stream rng(1);
  const int draws = 100000;
  int counts[3] = {0, 0, 0};
  for (int t = 0; t < draws; ++t) ++counts[sample_categorical(row, rng)];
  for (int j = 0; j < 3; ++j) {
    const double sigma = std::sqrt(probs[j] * (1 - probs[j]) / draws);
    EXPECT_LT(std::abs(static_cast<double>(counts[j]) / draws - probs[j]), 4 * sigma) << j;
  }
}

TEST(ActionSelection, ModesRoundTrip) {
  EXPECT_EQ(parse_mode("greedy"), EvalMode::Greedy);
  EXPECT_EQ(parse_mode("sampled"), EvalMode::Sampled);
  EXPECT_THROW((void)parse_mode("argmax"), std::invalid_argument);
}

TEST(Evaluate, UniformSampledPlayMatchesTheRandomFloor) {
  const std::uint64_t episodes = 100000;
  for (auto [n, k] : std::vector<std::pair<int, int>>{{2, 2}, {3, 3}, {4, 4}, {2, 4}, {3, 5}}) {
    const auto r = evaluate(UniformPolicy{}, XorEnv(n, k), EvalMode::Sampled, episodes, 7);
    const double p = distinct_probability(n, k);
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(episodes));
    EXPECT_LT(std::abs(r.success_rate - p), 4 * sigma) << "n=" << n << " k=" << k;
  }
}

TEST(Evaluate, UniformFloorAgreesWithClosedForm) {
  for (int n = 1; n <= 6; ++n) EXPECT_NEAR(random_play_floor(n).value, distinct_probability(n, n), 1e-12) << n;
}

TEST(Evaluate, UniformGreedyPlayAlwaysCollides) {
  for (int n = 2; n <= 5; ++n) EXPECT_EQ(evaluate(UniformPolicy{}, XorEnv(n, n), EvalMode::Greedy, 500, 3).success_rate, 0.0);
  EXPECT_EQ(evaluate(UniformPolicy{}, XorEnv(1, 3), EvalMode::Greedy, 100, 3).success_rate, 1.0);
}

TEST(Evaluate, RankOracleAlwaysSucceeds) {
  for (int n = 1; n <= 8; ++n)
    for (int k = n; k <= 8; ++k) {
      EXPECT_EQ(evaluate(RankOraclePolicy{}, XorEnv(n, k), EvalMode::Greedy, 1000, 11).success_rate, 1.0) << n << "," << k;
    }
}

TEST(Evaluate, FixedPermutationIsPerfectAndSeedIndependent) {
  for (std::uint64_t seed : {0u, 1u, 99u})
    EXPECT_EQ(evaluate(DiagonalPolicy{}, XorEnv(4, 4), EvalMode::Greedy, 200, seed).success_rate, 1.0);
}

TEST(Evaluate, MorePlayersThanActionsNeverWins) {
  EXPECT_EQ(evaluate(UniformPolicy{}, XorEnv(4, 3), EvalMode::Sampled, 2000, 5).success_rate, 0.0);
  EXPECT_EQ(evaluate(RankOraclePolicy{}, XorEnv(4, 3), EvalMode::Greedy, 2000, 5).success_rate, 0.0);
}

TEST(Evaluate, ReportCarriesItsSettings) {
  const auto r = evaluate(UniformPolicy{}, XorEnv(3, 4), EvalMode::Sampled, 50, 42);
  EXPECT_EQ(r.episodes, 50u);
  EXPECT_EQ(r.seed, 42u);
  EXPECT_EQ(r.mode, EvalMode::Sampled);
  EXPECT_EQ(r.n_train, 3);
  EXPECT_EQ(r.k_eval, 4);
  EXPECT_THROW((void)evaluate(UniformPolicy{}, XorEnv(3, 4), EvalMode::Sampled, 0, 42), std::invalid_argument);
}

TEST(Evaluate, WrongLogitCountIsAnError) {
  EXPECT_THROW((void)evaluate(WrongShapePolicy{}, XorEnv(2, 2), EvalMode::Greedy, 1, 0), ShapeError);
}

TEST(Evaluate, SameSeedSameResult) {
  PolicyNet net(small_config(), 3);
  const XorEnv env(3, 3);
  for (auto mode : {EvalMode::Greedy, EvalMode::Sampled}) {
    const auto a = evaluate(NetworkPolicy(net), env, mode, 300, 17);
    const auto b = evaluate(NetworkPolicy(net), env, mode, 300, 17);
    EXPECT_EQ(a.success_rate, b.success_rate);
  }
  const auto a = evaluate(UniformPolicy{}, env, EvalMode::Sampled, 5000, 1);
  const auto b = evaluate(UniformPolicy{}, env, EvalMode::Sampled, 5000, 2);
  EXPECT_NE(a.success_rate, b.success_rate);
}

TEST(Evaluate, DropoutNetworkIsDeterministicGivenTheSeed) {
  auto cfg = small_config();
  cfg.variant = MaskVariant::Dropout;
  PolicyNet net(cfg, 4);
  const XorEnv env(3, 3);
  EXPECT_EQ(evaluate(NetworkPolicy(net), env, EvalMode::Sampled, 300, 9).success_rate,
            evaluate(NetworkPolicy(net), env, EvalMode::Sampled, 300, 9).success_rate);
}

TEST(CrossConfig, SameConfigMatchesPlainEvaluation) {
  PolicyNet net(small_config(), 5);
  const auto plain = evaluate(NetworkPolicy(net), XorEnv(3, 3), EvalMode::Sampled, 400, 21);
  const auto cross = cross_config_evaluate(net, 3, 3, 3, 3, EvalMode::Sampled, 400, 21);
  EXPECT_EQ(plain.success_rate, cross.success_rate);
}

TEST(CrossConfig, RunsOnOtherTeamSizesWithoutRetraining) {
  PolicyNet net(small_config(), 6);
  for (auto [n, k] : std::vector<std::pair<int, int>>{{2, 2}, {4, 4}, {5, 7}, {8, 8}, {1, 3}}) {
    const auto r = cross_config_evaluate(net, 3, 3, n, k, EvalMode::Greedy, 100, 8);
    EXPECT_EQ(r.n_train, 3);
    EXPECT_EQ(r.k_train, 3);
    EXPECT_EQ(r.n_eval, n);
    EXPECT_EQ(r.k_eval, k);
    EXPECT_GE(r.success_rate, 0.0);
    EXPECT_LE(r.success_rate, 1.0);
  }
  EXPECT_THROW((void)cross_config_evaluate(net, 3, 3, 3, 9, EvalMode::Greedy, 10, 8), ShapeError);
}

TEST(CrossConfig, CsvRowHasOneFieldPerHeaderColumn) {
  PolicyNet net(small_config(), 7);
  const auto r = cross_config_evaluate(net, 2, 2, 3, 3, EvalMode::Greedy, 10, 8);
  const auto row = to_csv_row(r);
  const std::string header = kEvalCsvHeader;
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(header.begin(), header.end(), ','));
  EXPECT_EQ(row.rfind("2,2,3,3,greedy,10,", 0), 0u);
}
