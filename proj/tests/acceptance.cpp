// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Usage: acceptance [criterion ...]   (default: all of 1-8)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "symbreak/gradcheck.hpp"
#include "symbreak/trainer.hpp"

using namespace symbreak;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
};

void detail(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Seeds for every training criterion, fixed before any run was looked at.
constexpr std::uint64_t kSeeds[] = {0, 1, 2};
constexpr std::uint64_t kEvalEpisodes = 2000;

// ---------------------------------------------------------------------------
// 1. Protocol success probability

// Runs the protocol on every joint assignment of n*k bits; returns the number of successes.
std::uint64_t enumerate_protocol(int n, int k) {
  const int total = n * k;
  std::uint64_t wins = 0;
  std::vector<BitString> messages(static_cast<std::size_t>(n));
  for (std::uint64_t a = 0; a < (std::uint64_t{1} << total); ++a) {
    for (int i = 0; i < n; ++i) {
      std::vector<bool> bits(static_cast<std::size_t>(k));
      for (int b = 0; b < k; ++b) bits[static_cast<std::size_t>(b)] = (a >> (i * k + b)) & 1;
      messages[static_cast<std::size_t>(i)] = BitString(std::move(bits));
    }
    wins += run_rank_protocol(messages).success ? 1 : 0;
  }
  return wins;
}

Outcome criterion1() {
  const auto start = std::chrono::steady_clock::now();
  bool ok = true;
  double worst_z = 0.0;
  for (int n : {2, 3, 4})
    for (int k : {1, 2, 4, 8}) {
      const auto r = verify_theorem1(n, k, 100000, 0x7EA1 + static_cast<std::uint64_t>(n * 16 + k), 1);
      worst_z = std::max(worst_z, std::abs(r.z));
      const bool z_ok = std::abs(r.z) < 4.0;
      std::string enum_note = "-";
      if (n * k <= 16) {
        const auto wins = enumerate_protocol(n, k);
        const auto exact = p_no_collision_exact(n, k);
        const bool match = exact.exact && make_fraction(wins, std::uint64_t{1} << (n * k)) == *exact.exact;
        enum_note = fmt("%llu/2^%d %s", static_cast<unsigned long long>(wins), n * k, match ? "exact" : "MISMATCH");
        ok = ok && match;
      }
      ok = ok && z_ok;
      detail("n=%d k=%d  mc=%.5f exact=%.5f z=%+.2f  enumeration %s", n, k, r.empirical, r.exact, r.z, enum_note.c_str());
    }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool fast = secs < 10.0;
  return {ok && fast, fmt("max|z|=%.2f over 12 configs, enumeration exact for nk<=16, %.1f s (limit 10 s)", worst_z, secs)};
}

// ---------------------------------------------------------------------------
// 2. Random-play floors

Outcome criterion2() {
  struct Case {
    int n;
    double reported;
  };
  bool ok = true;
  std::string summary;
  for (const Case c : {Case{2, 0.5}, Case{3, 0.2222}}) {
    const std::uint64_t episodes = 100000;
    const auto r = evaluate(UniformPolicy{}, XorEnv(c.n, c.n), EvalMode::Sampled, episodes, 0xF100 + static_cast<std::uint64_t>(c.n));
    const double floor = random_play_floor(c.n).value;
    const double sigma = std::sqrt(floor * (1 - floor) / static_cast<double>(episodes));
    const bool near_reported = std::abs(r.success_rate - c.reported) < 3 * sigma;
    const bool near_floor = std::abs(r.success_rate - floor) < 3 * sigma;
    ok = ok && near_reported && near_floor;
    detail("n=k=%d  uniform sampled %.5f  floor n!/n^n %.5f  reported %.4f  3 sigma %.5f", c.n, r.success_rate, floor, c.reported,
           3 * sigma);
    summary += fmt("%sn=k=%d %.4f", summary.empty() ? "" : ", ", c.n, r.success_rate);
  }
  return {ok, summary + " (within 3 sigma of 0.5 / 0.2222)"};
}

// ---------------------------------------------------------------------------
// 3 and 4. Training

struct FinalEval {
  double greedy = 0.0;
  double sampled = 0.0;
  double secs = 0.0;
};

FinalEval train_and_report(int n, MaskVariant variant, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.n = n;
  cfg.k = n;
  cfg.seed = seed;
  cfg.variant = variant;
  const auto start = std::chrono::steady_clock::now();
  const auto res = train(cfg, TrainOptions{.eval_every = 50, .eval_episodes = kEvalEpisodes});
  FinalEval out;
  out.secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto& last = res.log.records.back();
  out.greedy = *last.eval_greedy;
  out.sampled = *last.eval_sampled;
  detail("%-10s n=k=%d seed=%llu  greedy %.4f  sampled %.4f  (best greedy %.4f at update %ld, %.0f s)", to_string(variant), n,
         static_cast<unsigned long long>(seed), out.greedy, out.sampled, res.best_greedy, res.best_update, out.secs);
  return out;
}

Outcome criterion3() {
  int solved2 = 0, solved3 = 0;
  for (auto seed : kSeeds) solved2 += train_and_report(2, MaskVariant::Structured, seed).greedy >= 0.99;
  for (auto seed : kSeeds) solved3 += train_and_report(3, MaskVariant::Structured, seed).greedy >= 0.99;
  return {solved2 >= 3 && solved3 >= 2,
          fmt("final greedy >= 0.99: n=k=2 in %d/3 seeds (need 3), n=k=3 in %d/3 seeds (need 2)", solved2, solved3)};
}

Outcome criterion4() {
  int nomask_ok = 0, dropout_ok = 0;
  for (auto seed : kSeeds) {
    const auto r = train_and_report(2, MaskVariant::NoMask, seed);
    nomask_ok += r.greedy == 0.0 && std::abs(r.sampled - 0.5) <= 0.05;
  }
  for (auto seed : kSeeds) dropout_ok += train_and_report(2, MaskVariant::Dropout, seed).greedy == 0.0;
  return {nomask_ok == 3 && dropout_ok == 3,
          fmt("n=k=2: no_mask greedy 0.0 and sampled 0.5+-0.05 in %d/3 seeds; dropout greedy 0.0 in %d/3 seeds", nomask_ok,
              dropout_ok)};
}

// ---------------------------------------------------------------------------
// 5. Rank oracle

Outcome criterion5() {
  bool ok = true;
  double worst = 1.0;
  for (int n = 2; n <= 8; ++n) {
    const double s = evaluate(RankOraclePolicy{}, XorEnv(n, n), EvalMode::Greedy, 10000, 0x0AC1E + static_cast<std::uint64_t>(n)).success_rate;
    worst = std::min(worst, s);
    ok = ok && s == 1.0;
  }
  return {ok, fmt("min success %.4f over n=k in 2..8, 10^4 episodes each", worst)};
}

// ---------------------------------------------------------------------------
// 6. Numerical core

Outcome criterion6() {
  bool grads_ok = true;
  double worst = 0.0;
  std::size_t ops = 0;
  for (const auto& r : run_gradcheck_suite(GradcheckOptions{})) {
    ++ops;
    worst = std::max(worst, r.max_error);
    grads_ok = grads_ok && r.passed();
    if (!r.passed()) detail("gradcheck %s: max error %.3g", r.op.c_str(), r.max_error);
  }
  detail("gradcheck: %zu cases, worst relative error %.3g (limit 1e-3)", ops, worst);

  Stream rng(0x50F7);
  double worst_sum = 0.0;
  bool zeros_ok = true;
  const int instances = 500;
  for (int t = 0; t < instances; ++t) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(9);
    const int axis = static_cast<int>(rng.below(2));
    auto x = Tensor::zeros({r, c});
    for (auto& v : x.data()) v = 20.0f * (rng.uniform_float() - 0.5f);
    auto mask = Tensor::zeros({r, c});
    // Random mask with at least one open entry per slice along `axis`.
    const std::size_t slices = axis == 1 ? r : c, len = axis == 1 ? c : r;
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t keep = rng.below(len);
      for (std::size_t e = 0; e < len; ++e)
        if (e != keep && rng.bernoulli(0.4)) (axis == 1 ? mask.data()[s * c + e] : mask.data()[e * c + s]) = kMaskedScore;
    }
    const auto y = masked_softmax(x, mask, axis);
    for (std::size_t s = 0; s < slices; ++s) {
      double sum = 0.0;
      for (std::size_t e = 0; e < len; ++e) {
        const std::size_t idx = axis == 1 ? s * c + e : e * c + s;
        sum += y.data()[idx];
        if (mask.data()[idx] != 0.0f && y.data()[idx] != 0.0f) zeros_ok = false;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  detail("masked softmax: %d instances, max |sum - 1| = %.3g, masked entries exactly 0: %s", instances, worst_sum,
         zeros_ok ? "yes" : "no");
  const bool ok = grads_ok && worst_sum <= 1e-6 && zeros_ok;
  return {ok, fmt("gradcheck worst %.2g over %zu cases; softmax |sum-1| <= %.1g, exact zeros %s", worst, ops, worst_sum,
                  zeros_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 7. Architecture properties

std::vector<std::size_t> permutation(std::size_t n, Stream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

Tensor random_tasks(std::size_t m, Stream& rng) {
  auto t = Tensor::zeros({m, kDefaultTaskWidth});
  for (auto& v : t.data()) v = rng.uniform_float();
  return t;
}

// Reordering inputs reorders float sums; compare at the scale of the row's terms.
bool close(float a, float b, float scale) { return std::abs(a - b) <= 1e-5f * std::max({1.0f, std::abs(b), scale}); }

float row_max(const Tensor& t, std::size_t row) {
  float s = 0.0f;
  for (std::size_t c = 0; c < t.cols(); ++c) s = std::max(s, std::abs(t.at(row, c)));
  return s;
}

Outcome criterion7() {
  const int instances = 100;
  const Stream master(0xA7C7);
  std::map<std::string, int> passed;

  for (int t = 0; t < instances; ++t) {
    Stream rng = master.split(static_cast<std::uint64_t>(t));
    PolicyNet net(PolicyConfig{}, rng());
    const std::size_t n = 1 + rng.below(8), m = 1 + rng.below(8);
    const auto agents = Tensor::full({n, 1}, 1.0f);
    const auto tasks = random_tasks(m, rng);
    const auto r = RandomScalars::sample(n, rng);
    const auto ref = forward_policy(net, agents, tasks, r);

    const auto ap = permutation(n, rng);
    RandomScalars pr;
    for (auto i : ap) pr.r.push_back(r.r[i]);
    const auto alt = forward_policy(net, agents, tasks, pr);
    bool agent_ok = true;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) agent_ok = agent_ok && close(alt.logits.at(i, j), ref.logits.at(ap[i], j), row_max(ref.logits, ap[i]));
    passed["agent permutation equivariance"] += agent_ok;
    passed["value permutation invariance"] += close(alt.value.item(), ref.value.item(), 0.0f);

    const auto tp = permutation(m, rng);
    const auto talt = forward_policy(net, agents, gather_rows(tasks, tp), r);
    bool task_ok = close(talt.value.item(), ref.value.item(), 0.0f);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) task_ok = task_ok && close(talt.logits.at(i, j), ref.logits.at(i, tp[j]), row_max(ref.logits, i));
    passed["task permutation equivariance"] += task_ok;

    const auto rs = RandomScalars::sample(2 + rng.below(7), rng);
    const auto mask = build_mask(rs);
    bool asym = true;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      asym = asym && !mask.masks(i, i);
      for (std::size_t j = i + 1; j < rs.size(); ++j)
        if (rs.r[i] != rs.r[j]) asym = asym && mask.masks(i, j) != mask.masks(j, i);
    }
    passed["mask pairwise asymmetry"] += asym;
  }

  PolicyNet shared(PolicyConfig{}, 0x5CA1E);
  Stream rng(0x5CA1E);
  int scal = 0, scal_total = 0;
  for (std::size_t n = 1; n <= 8; ++n)
    for (std::size_t m = 1; m <= 8; ++m)
      for (int rep = 0; rep < 2; ++rep) {
        ++scal_total;
        const auto out = forward_policy(shared, Tensor::full({n, 1}, 1.0f), random_tasks(m, rng), RandomScalars::sample(n, rng));
        bool finite = out.logits.shape() == Shape{n, m} && std::isfinite(out.value.item());
        for (float v : out.logits.data()) finite = finite && std::isfinite(v);
        scal += finite;
      }
  passed["scalability (n,m) in [1,8]^2"] = scal;

  bool ok = scal == scal_total;
  for (const auto& [name, count] : passed) {
    const int total = name.starts_with("scalability") ? scal_total : instances;
    detail("%-32s %d/%d", name.c_str(), count, total);
    ok = ok && count == total;
  }
  return {ok, fmt("5 properties, %d random instances each (%d for scalability)", instances, scal_total)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const int c = std::atoi(argv[i]);
    if (c < 1 || c > 8) {
      std::fprintf(stderr, "usage: %s [criterion 1-8 ...]\n", argv[0]);
      return 1;
    }
    wanted.insert(c);
  }
  if (wanted.empty())
    for (int c = 1; c <= 8; ++c) wanted.insert(c);

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"rank protocol matches the closed form", criterion1}},
      {2, {"random-play floors", criterion2}},
      {3, {"structured mask solves XOR", criterion3}},
      {4, {"mask ablations stay at the floor", criterion4}},
      {5, {"rank oracle", criterion5}},
      {6, {"numerical core", criterion6}},
      {7, {"architecture properties", criterion7}},
  };

  std::map<int, bool> results;
  int failures = 0;
  for (int c : wanted) {
    if (c == 8) continue;
    const auto& [title, run] = criteria.at(c);
    std::printf("criterion %d: %s\n", c, title);
    std::fflush(stdout);
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    results[c] = o.pass;
    failures += !o.pass;
    std::printf("%s %d  %s\n", o.pass ? "PASS" : "FAIL", c, o.summary.c_str());
    std::fflush(stdout);
  }

  if (wanted.count(8)) {
    // Out of scope at desk scale: VMAS tasks, the coverage heatmap, SMACLite and
    // external baselines. Stands or falls with the checks that replace them.
    std::printf("criterion 8: excluded experiments replaced by analytic floors and property suites\n");
    bool ok = true;
    std::string missing;
    for (int c : {2, 6, 7}) {
      if (!results.count(c)) {
        const auto& [title, run] = criteria.at(c);
        (void)title;
        results[c] = run().pass;
      }
      ok = ok && results[c];
      if (!results[c]) missing += " " + std::to_string(c);
    }
    failures += !ok;
    std::printf("%s 8  VMAS, heatmap, SMACLite and baseline rows excluded; replacements 2, 6, 7 %s\n", ok ? "PASS" : "FAIL",
                ok ? "pass" : ("fail:" + missing).c_str());
  }
  return failures == 0 ? 0 : 2;
}
