// symbreak: reproducible experiments on the rank protocol and the
// symmetry-breaking policy.
//
// Exit codes: 0 success, 1 usage or config error, 2 numerical/statistical failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "symbreak/gradcheck.hpp"
#include "symbreak/trainer.hpp"

using namespace symbreak;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Prefixes every line of `text` with "# ".
std::string as_comment(const std::string& text) {
  std::string out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out += "# " + line + "\n";
  return out;
}

std::ofstream open_output(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::out | mode);
  if (!os) throw UsageError("cannot open " + path.string() + " for writing");
  return os;
}

// ---------------------------------------------------------------------------
// protocol

struct ProtocolArgs {
  int n = 2;
  int k = 1;
  std::uint64_t trials = 100000;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string out;
};

int cmd_protocol(const ProtocolArgs& a) {
  const auto r = verify_theorem1(a.n, a.k, a.trials, a.seed, a.threads);
  std::cout << to_pretty(r);
  const auto p = p_no_collision_exact(a.n, a.k);
  if (p.exact) std::cout << "  exact fraction     " << p.exact->num << "/" << p.exact->den << "\n";
  const std::string header = as_comment("symbreak protocol n=" + std::to_string(a.n) + " k=" + std::to_string(a.k) +
                                         " trials=" + std::to_string(a.trials) + " seed=" + std::to_string(a.seed));
  if (!a.out.empty()) {
    auto os = open_output(a.out);
    os << header << kProtocolCsvHeader << "\n" << to_csv_row(r) << "\n";
  } else {
    std::cout << kProtocolCsvHeader << "\n" << to_csv_row(r) << "\n";
  }
  if (std::abs(r.z) > 5.0) {
    std::cerr << "statistical failure: |z| = " << std::abs(r.z) << " > 5\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// floor

struct FloorArgs {
  int max_n = 8;
  std::uint64_t episodes = 100000;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_floor(const FloorArgs& a) {
  std::ostringstream csv;
  csv << "n,floor_exact,floor,uniform_sampled,episodes,z\n";
  bool ok = true;
  std::printf("%3s  %-22s %10s %12s %8s\n", "n", "n!/n^n", "value", "uniform MC", "z");
  for (int n = 1; n <= a.max_n; ++n) {
    const auto f = random_play_floor(n);
    const auto r = evaluate(UniformPolicy{}, XorEnv(n, n, std::max<std::size_t>(kDefaultTaskWidth, static_cast<std::size_t>(n))),
                            EvalMode::Sampled, a.episodes, Stream(a.seed).split(static_cast<std::uint64_t>(n))());
    const double z = binomial_z(r.success_rate, f.value, a.episodes);
    ok = ok && std::abs(z) <= 5.0;
    const std::string exact = f.exact ? std::to_string(f.exact->num) + "/" + std::to_string(f.exact->den) : "-";
    std::printf("%3d  %-22s %10.6f %12.6f %+8.2f\n", n, exact.c_str(), f.value, r.success_rate, z);
    char row[200];
    std::snprintf(row, sizeof row, "%d,%s,%.10g,%.6f,%llu,%.4f\n", n, exact.c_str(), f.value, r.success_rate,
                  static_cast<unsigned long long>(a.episodes), z);
    csv << row;
  }
  if (!a.out.empty()) {
    auto os = open_output(a.out);
    os << as_comment("symbreak floor max_n=" + std::to_string(a.max_n) + " episodes=" + std::to_string(a.episodes) +
                     " seed=" + std::to_string(a.seed))
       << csv.str();
  }
  if (!ok) {
    std::cerr << "statistical failure: uniform play is more than 5 sigma from n!/n^n\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out_dir = "runs";
  long eval_every = 50;
  std::uint64_t eval_episodes = 2000;
  bool force = false;
  bool quiet = false;
};

TrainConfig read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config " + path);
  return parse_config(is);
}

fs::path run_dir_for(const fs::path& root, const TrainConfig& cfg) {
  return root / (hex64(config_hash(cfg)) + "-seed" + std::to_string(cfg.seed));
}

struct RunSummary {
  fs::path dir;
  double final_greedy = 0.0;
  double final_sampled = 0.0;
  double best_greedy = 0.0;
  long best_update = 0;
};

RunSummary run_training(const TrainConfig& cfg, const TrainArgs& a) {
  const fs::path dir = run_dir_for(a.out_dir, cfg);
  if (fs::exists(dir / "runlog.csv") && !a.force)
    throw UsageError("run directory " + dir.string() + " already holds a run (use --force to replace it)");
  fs::create_directories(dir);

  const std::string header = as_comment("symbreak train\n" + to_config_text(cfg) + "config_hash = " + hex64(config_hash(cfg)) +
                                         "\neval_every = " + std::to_string(a.eval_every) +
                                         "\neval_episodes = " + std::to_string(a.eval_episodes));
  {
    auto os = open_output(dir / "config.txt");
    os << as_comment("resolved config; seed = " + std::to_string(cfg.seed)) << to_config_text(cfg);
  }
  auto log = open_output(dir / "runlog.csv");
  log << header << kRunLogCsvHeader << "\n";

  const auto start = std::chrono::steady_clock::now();
  TrainOptions opt;
  opt.eval_every = a.eval_every;
  opt.eval_episodes = a.eval_episodes;
  opt.run_dir = dir;
  opt.on_record = [&](const RunRecord& r) {
    log << to_csv_row(r) << "\n";
    if (!a.quiet && r.eval_greedy) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("update %4ld  timesteps %6ld  reward %.3f  greedy %.4f  sampled %.4f  (%.0f s)\n", r.update, r.timesteps,
                  r.mean_reward, *r.eval_greedy, *r.eval_sampled, secs);
      std::fflush(stdout);
    }
  };
  const auto res = train(cfg, opt);
  const auto& last = res.log.records.back();
  return {dir, *last.eval_greedy, *last.eval_sampled, res.best_greedy, res.best_update};
}

int cmd_train(const TrainArgs& a) {
  const TrainConfig cfg = read_config_file(a.config);
  const auto s = run_training(cfg, a);
  std::printf("run %s\n  final greedy %.4f  sampled %.4f  best greedy %.4f at update %ld\n", s.dir.c_str(), s.final_greedy,
              s.final_sampled, s.best_greedy, s.best_update);
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  int n = 2;
  int k = 2;
  std::string mode = "greedy";
  std::uint64_t episodes = 2000;
  std::uint64_t seed = 0;
  int n_train = 0;
  int k_train = 0;
  std::string out = "eval.csv";
};

int cmd_eval(EvalArgs a) {
  const EvalMode mode = parse_mode(a.mode);
  const PolicyNet net = load_checkpoint(a.checkpoint);
  // A checkpoint inside a run directory knows its training configuration.
  const fs::path cfg_path = fs::path(a.checkpoint).parent_path() / "config.txt";
  if ((a.n_train == 0 || a.k_train == 0) && fs::exists(cfg_path)) {
    const auto cfg = read_config_file(cfg_path.string());
    if (a.n_train == 0) a.n_train = cfg.n;
    if (a.k_train == 0) a.k_train = cfg.k;
  }
  const auto r = cross_config_evaluate(net, a.n_train, a.k_train, a.n, a.k, mode, a.episodes, a.seed);

  const bool fresh = !fs::exists(a.out);
  auto os = open_output(a.out, std::ios::app);
  if (fresh) os << as_comment("symbreak eval results; one invocation per row, each preceded by its command") << kEvalCsvHeader << "\n";
  os << as_comment("symbreak eval --checkpoint " + a.checkpoint + " --n " + std::to_string(a.n) + " --k " + std::to_string(a.k) +
                   " --mode " + a.mode + " --episodes " + std::to_string(a.episodes) + " --seed " + std::to_string(a.seed))
     << to_csv_row(r) << "\n";
  std::cout << kEvalCsvHeader << "\n" << to_csv_row(r) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string config;
  int n = 2;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants{"structured", "no_mask", "dropout"};
  TrainArgs train;
  bool check = false;
};

int cmd_ablate(const AblateArgs& a) {
  TrainConfig base;
  if (!a.config.empty()) {
    base = read_config_file(a.config);
  } else {
    base.n = base.k = a.n;
  }
  std::ostringstream csv;
  csv << "variant,seed,n,k,final_greedy,final_sampled,best_greedy,best_update,run_dir\n";
  bool expected = true;
  for (const auto& name : a.variants) {
    const MaskVariant variant = parse_variant(name);
    for (auto seed : a.seeds) {
      TrainConfig cfg = base;
      cfg.variant = variant;
      cfg.seed = seed;
      std::printf("== %s seed %llu (n=%d k=%d)\n", name.c_str(), static_cast<unsigned long long>(seed), cfg.n, cfg.k);
      std::fflush(stdout);
      const auto s = run_training(cfg, a.train);
      char row[512];
      std::snprintf(row, sizeof row, "%s,%llu,%d,%d,%.6f,%.6f,%.6f,%ld,%s\n", name.c_str(), static_cast<unsigned long long>(seed),
                    cfg.n, cfg.k, s.final_greedy, s.final_sampled, s.best_greedy, s.best_update, s.dir.c_str());
      csv << row;
      expected = expected && (variant == MaskVariant::Structured ? s.final_greedy >= 0.99 : s.final_greedy == 0.0);
    }
  }
  std::string seeds;
  for (auto s : a.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  const fs::path out = fs::path(a.train.out_dir) / "ablation.csv";
  auto os = open_output(out);
  os << as_comment("symbreak ablate seeds=" + seeds + "\n" + to_config_text(base)) << csv.str();
  std::cout << csv.str();
  std::printf("wrote %s\n", out.c_str());
  if (a.check && !expected) {
    std::cerr << "check failed: expected structured greedy >= 0.99 and ablation greedy 0.0 in every seed\n";
    return kFailure;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  int instances = 10;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions opt;
  opt.instances = a.instances;
  opt.seed = a.seed;
  std::ostringstream csv;
  csv << "op,instances,entries,max_error,tolerance,passed\n";
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(opt)) {
    ok = ok && r.passed();
    std::printf("%-24s %6zu entries  max error %.3e  %s\n", r.op.c_str(), r.entries, r.max_error, r.passed() ? "ok" : "FAIL");
    char row[200];
    std::snprintf(row, sizeof row, "%s,%d,%zu,%.6e,%.1e,%d\n", r.op.c_str(), r.instances, r.entries, r.max_error, r.tolerance,
                  r.passed() ? 1 : 0);
    csv << row;
  }
  if (!a.out.empty()) {
    auto os = open_output(a.out);
    os << as_comment("symbreak gradcheck instances=" + std::to_string(a.instances) + " seed=" + std::to_string(a.seed) +
                     " h=" + std::to_string(opt.h))
       << csv.str();
  }
  if (!ok) {
    std::cerr << "gradient check failed: relative error above " << opt.tolerance << "\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Symmetry breaking by random scalars: protocol checks, XOR training and evaluation"};
  app.require_subcommand(1);

  ProtocolArgs pa;
  auto* protocol = app.add_subcommand("protocol", "Monte-Carlo check of the rank protocol against the closed form");
  protocol->add_option("--n", pa.n, "players")->check(CLI::Range(1, 1 << 20));
  protocol->add_option("--k", pa.k, "random bits per player")->check(CLI::Range(0, 4096));
  protocol->add_option("--trials", pa.trials, "Monte-Carlo trials")->check(CLI::PositiveNumber);
  protocol->add_option("--seed", pa.seed, "master seed");
  protocol->add_option("--threads", pa.threads, "worker threads (0 = all cores); results do not depend on it");
  protocol->add_option("--out", pa.out, "CSV output file (default: stdout)");

  FloorArgs fa;
  auto* floor = app.add_subcommand("floor", "Random-play floors n!/n^n, exact and by uniform play");
  floor->add_option("--max-n", fa.max_n, "largest n")->check(CLI::Range(1, 15));
  floor->add_option("--episodes", fa.episodes, "uniform-play episodes per n")->check(CLI::PositiveNumber);
  floor->add_option("--seed", fa.seed, "master seed");
  floor->add_option("--out", fa.out, "CSV output file");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train the shared policy on the XOR game");
  train_cmd->add_option("config", ta.config, "key = value config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out-dir", ta.out_dir, "root for run directories");
  train_cmd->add_option("--eval-every", ta.eval_every, "updates between evaluations")->check(CLI::PositiveNumber);
  train_cmd->add_option("--eval-episodes", ta.eval_episodes, "episodes per evaluation")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--force", ta.force, "replace an existing run with the same config");
  train_cmd->add_flag("--quiet", ta.quiet, "no progress lines");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint, possibly on another team size; appends one CSV row");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--n", ea.n, "players")->check(CLI::Range(1, 64));
  eval->add_option("--k", ea.k, "actions")->check(CLI::Range(1, 64));
  eval->add_option("--mode", ea.mode, "greedy or sampled")->check(CLI::IsMember({"greedy", "sampled"}));
  eval->add_option("--episodes", ea.episodes, "episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", ea.seed, "evaluation seed");
  eval->add_option("--n-train", ea.n_train, "training n (default: from the run's config.txt)");
  eval->add_option("--k-train", ea.k_train, "training k (default: from the run's config.txt)");
  eval->add_option("--out", ea.out, "CSV file to append to");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Train every mask variant over several seeds and tabulate final success");
  ablate->add_option("--config", aa.config, "base config (variant and seed are overridden)")->check(CLI::ExistingFile);
  ablate->add_option("--n", aa.n, "n = k when no config is given")->check(CLI::Range(1, 8));
  ablate->add_option("--seeds", aa.seeds, "seeds")->delimiter(',');
  ablate->add_option("--variants", aa.variants, "variants")->delimiter(',')->check(CLI::IsMember({"structured", "no_mask", "dropout"}));
  ablate->add_option("--out-dir", aa.train.out_dir, "root for run directories and ablation.csv");
  ablate->add_option("--eval-episodes", aa.train.eval_episodes, "episodes per evaluation")->check(CLI::PositiveNumber);
  ablate->add_flag("--force", aa.train.force, "replace existing runs");
  ablate->add_flag("--check", aa.check, "exit 2 unless structured solves the game and the ablations stay at greedy 0.0");
  aa.train.quiet = true;

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op and the policy");
  gradcheck->add_option("--instances", ga.instances, "random instances per op")->check(CLI::Range(1, 1000));
  gradcheck->add_option("--seed", ga.seed, "seed");
  gradcheck->add_option("--out", ga.out, "CSV output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*protocol) return cmd_protocol(pa);
    if (*floor) return cmd_floor(fa);
    if (*train_cmd) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*ablate) return cmd_ablate(aa);
    if (*gradcheck) return cmd_gradcheck(ga);
  } catch (const ConfigError& e) {
    std::cerr << "config error" << (e.key.empty() ? "" : " [" + e.key + "]") << ": " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
