#pragma once

// Experiment protocols: bandit regret sweeps over alpha with a UCB1
// reference, repeated policy improvement on a fixed bandit, and policy
// iteration learning curves on the tabular environments. Runs are
// independent tasks whose results land in fixed slots, so the worker count
// never changes the output.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "fdiv/bandit.hpp"
#include "fdiv/environments.hpp"
#include "fdiv/policy_iteration.hpp"
#include "fdiv/svg.hpp"

namespace fdv {

struct BanditSettings {
  int arms = 20;
  double noise_variance = 0.5;
  bool include_ucb = true;
  std::vector<int> report_horizons = {200, 400, 800};
};

struct DemoSettings {
  int arms = 10;
  double eta = 2.0;
};

struct ExperimentConfig {
  std::vector<double> alphas = {-50.0, -5.0, -1.0, 0.0, 0.5, 1.0, 2.0, 5.0, 50.0};
  TemperatureSchedule schedule{1.0, 0.8};
  int runs = 400;
  /// Bandit steps per run.
  int horizon = 800;
  /// Policy-iteration or demo iterations.
  int iterations = 25;
  /// Bandit: steps between policy updates. MDP: transitions per batch.
  int samples_per_update = 20;
  bool warm_start = true;
  BanditSettings bandit{};
  DemoSettings demo{};
  EnvConfig env{};
  std::uint64_t seed = 20170601;
  std::string output_dir = "fdiv_output";
  /// 0 selects the hardware concurrency.
  int workers = 0;

  void validate() const {
    if (alphas.empty()) throw ConfigError("alphas must not be empty");
    for (double a : alphas) {
      if (!std::isfinite(a)) throw ConfigError("alphas must be finite");
    }
    schedule.validate();
    if (runs < 1) throw ConfigError("runs must be at least 1");
    if (horizon < 1) throw ConfigError("horizon must be at least 1");
    if (iterations < 0) throw ConfigError("iterations must be nonnegative");
    if (samples_per_update < 1) throw ConfigError("samples_per_update must be at least 1");
    if (bandit.arms < 1) throw ConfigError("bandit.arms must be at least 1");
    if (!(bandit.noise_variance > 0.0)) throw ConfigError("bandit.noise_variance must be positive");
    for (int h : bandit.report_horizons) {
      if (h < 1) throw ConfigError("bandit.report_horizons entries must be at least 1");
    }
    if (demo.arms < 1) throw ConfigError("demo.arms must be at least 1");
    if (!(demo.eta > 0.0)) throw ConfigError("demo.eta must be positive");
    if (workers < 0) throw ConfigError("workers must be nonnegative");
    env.validate();
  }
};

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min(workers, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct CurveStats {
  std::vector<double> mean;
  std::vector<double> ci95;
  int failures = 0;
  int successes = 0;
};

/// Mean and 1.96 sd / sqrt(n) half-width per index over the successful runs.
inline CurveStats aggregate_runs(const std::vector<std::optional<std::vector<double>>>& runs) {
  CurveStats out;
  std::size_t length = 0;
  for (const auto& r : runs) {
    if (r) {
      ++out.successes;
      length = std::max(length, r->size());
    } else {
      ++out.failures;
    }
  }
  out.mean.assign(length, 0.0);
  out.ci95.assign(length, 0.0);
  if (out.successes == 0) {
    std::fill(out.mean.begin(), out.mean.end(), std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  for (std::size_t i = 0; i < length; ++i) {
    double sum = 0.0;
    for (const auto& r : runs) {
      if (r) sum += (*r)[i];
    }
    const double mean = sum / out.successes;
    double ss = 0.0;
    for (const auto& r : runs) {
      if (r) ss += ((*r)[i] - mean) * ((*r)[i] - mean);
    }
    out.mean[i] = mean;
    out.ci95[i] = out.successes > 1 ? 1.96 * std::sqrt(ss / (out.successes - 1)) / std::sqrt(out.successes) : 0.0;
  }
  return out;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double x) { return fmt::format("{}", x); }

/// One bandit agent: an alpha-divergence learner or UCB1.
struct BanditAgent {
  std::optional<double> alpha;  // empty for UCB1

  std::string label() const { return alpha ? format_number(*alpha) : std::string("ucb"); }
};

struct BanditRunTrace {
  /// Cumulative expected regret C_n for n = 1..horizon.
  std::vector<double> regret;
  std::vector<int> actions;
  Vector means;
};

/// Stream identifiers for make_rng({seed, run, stream}).
enum : std::uint64_t { kStreamArmMeans = 1, kStreamRewardNoise = 2, kStreamActions = 3, kStreamMdp = 4, kStreamDemo = 5 };

inline Vector draw_arm_means(int arms, std::uint64_t seed, std::uint64_t run) {
  Rng rng = make_rng({seed, run, kStreamArmMeans});
  Vector means(arms);
  for (int a = 0; a < arms; ++a) {
    std::normal_distribution<double> standard(0.0, 1.0);
    means(a) = standard(rng);
  }
  return means;
}

inline BanditRunTrace run_bandit_agent(const ExperimentConfig& cfg, const BanditAgent& agent, int run) {
  const auto seed = cfg.seed;
  const auto run_id = static_cast<std::uint64_t>(run);
  const GaussianBandit env(draw_arm_means(cfg.bandit.arms, seed, run_id), std::sqrt(cfg.bandit.noise_variance));
  Rng noise = make_rng({seed, run_id, kStreamRewardNoise});
  Rng chooser = make_rng({seed, run_id, kStreamActions});
  const int k = env.arms();
  const double best = env.best_mean();

  BanditRunTrace trace;
  trace.means = env.means;
  trace.regret.reserve(static_cast<std::size_t>(cfg.horizon));
  trace.actions.reserve(static_cast<std::size_t>(cfg.horizon));
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  std::vector<double> sums(static_cast<std::size_t>(k), 0.0);
  DiscreteDistribution pi = DiscreteDistribution::uniform(static_cast<std::size_t>(k));
  std::optional<AlphaDivergence> divergence;
  if (agent.alpha) divergence.emplace(*agent.alpha);
  double eta = cfg.schedule.eta0;
  double regret = 0.0;

  for (int t = 0; t < cfg.horizon; ++t) {
    int a;
    if (divergence) {
      a = sample_index(pi.weights().transpose(), chooser);
    } else {
      std::vector<double> estimates(static_cast<std::size_t>(k));
      for (int b = 0; b < k; ++b) estimates[b] = counts[b] > 0 ? sums[b] / counts[b] : 0.0;
      a = ucb_select(counts, estimates, t + 1);
    }
    const double r = sample_bandit_reward(env, a, noise);
    ++counts[static_cast<std::size_t>(a)];
    sums[static_cast<std::size_t>(a)] += r;
    regret += best - env.means(a);
    trace.regret.push_back(regret);
    trace.actions.push_back(a);

    if (divergence && (t + 1) % cfg.samples_per_update == 0) {
      Vector estimates(k);
      for (int b = 0; b < k; ++b) estimates(b) = counts[b] > 0 ? sums[b] / counts[b] : 0.0;
      const BanditInstance<AlphaDivergence> inst(pi, estimates, eta, *divergence);
      pi = improve_policy(inst, solve_bandit_dual(inst));
      eta *= cfg.schedule.decay;
    }
  }
  return trace;
}

struct LabeledCurve {
  std::string label;
  CurveStats stats;
};

struct BanditExperimentResult {
  std::vector<LabeledCurve> curves;
  std::vector<std::string> diagnostics;
};

inline std::vector<BanditAgent> bandit_agents(const ExperimentConfig& cfg) {
  std::vector<BanditAgent> agents;
  for (double a : cfg.alphas) agents.push_back({a});
  if (cfg.bandit.include_ucb) agents.push_back({std::nullopt});
  return agents;
}

inline BanditExperimentResult run_bandit_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto agents = bandit_agents(cfg);
  const int n_agents = static_cast<int>(agents.size());
  std::vector<std::optional<std::vector<double>>> slots(static_cast<std::size_t>(n_agents * cfg.runs));
  std::vector<std::string> errors(slots.size());
  parallel_for(n_agents * cfg.runs, cfg.workers, [&](int task) {
    const auto& agent = agents[static_cast<std::size_t>(task / cfg.runs)];
    const int run = task % cfg.runs;
    try {
      slots[static_cast<std::size_t>(task)] = run_bandit_agent(cfg, agent, run).regret;
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(task)] = fmt::format("alpha={} run={}: {}", agent.label(), run, e.what());
    }
  });
  BanditExperimentResult out;
  for (int i = 0; i < n_agents; ++i) {
    std::vector<std::optional<std::vector<double>>> runs(slots.begin() + i * cfg.runs,
                                                         slots.begin() + (i + 1) * cfg.runs);
    out.curves.push_back({agents[static_cast<std::size_t>(i)].label(), aggregate_runs(runs)});
  }
  for (auto& e : errors) {
    if (!e.empty()) out.diagnostics.push_back(std::move(e));
  }
  return out;
}

struct MdpExperimentResult {
  std::vector<LabeledCurve> curves;
  /// Per alpha, per run: exact returns J(pi_k), empty on failure.
  std::vector<std::vector<std::optional<std::vector<double>>>> runs;
  double optimal_return = 0.0;
  std::vector<std::string> diagnostics;
};

inline MdpExperimentResult run_mdp_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const TabularMdp model = build_env(cfg.env);
  const int n_alpha = static_cast<int>(cfg.alphas.size());
  std::vector<std::optional<std::vector<double>>> slots(static_cast<std::size_t>(n_alpha * cfg.runs));
  std::vector<std::string> errors(slots.size());
  std::vector<std::string> notes(slots.size());
  PolicyIterationConfig pic;
  pic.iterations = cfg.iterations;
  pic.samples_per_update = cfg.samples_per_update;
  pic.warm_start = cfg.warm_start;
  parallel_for(n_alpha * cfg.runs, cfg.workers, [&](int task) {
    const double alpha = cfg.alphas[static_cast<std::size_t>(task / cfg.runs)];
    const int run = task % cfg.runs;
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(run), kStreamMdp});
    try {
      LearningCurve curve = policy_iteration_loop(model, AlphaDivergence(alpha), cfg.schedule, pic, rng);
      std::size_t degenerate = 0;
      for (const auto& states : curve.degenerate_states) degenerate += states.empty() ? 0 : 1;
      if (degenerate > 0) {
        notes[static_cast<std::size_t>(task)] = fmt::format(
            "alpha={} run={}: {} update(s) eliminated every action of some state; those states kept their policy",
            format_number(alpha), run, degenerate);
      }
      slots[static_cast<std::size_t>(task)] = std::move(curve.exact_return);
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(task)] = fmt::format("alpha={} run={}: {}", format_number(alpha), run, e.what());
    }
  });
  MdpExperimentResult out;
  out.optimal_return = optimal_average_reward(model).average_reward;
  for (int i = 0; i < n_alpha; ++i) {
    std::vector<std::optional<std::vector<double>>> runs(slots.begin() + i * cfg.runs,
                                                         slots.begin() + (i + 1) * cfg.runs);
    out.curves.push_back({format_number(cfg.alphas[static_cast<std::size_t>(i)]), aggregate_runs(runs)});
    out.runs.push_back(std::move(runs));
  }
  for (auto& e : errors) {
    if (!e.empty()) out.diagnostics.push_back(std::move(e));
  }
  for (auto& n : notes) {
    if (!n.empty()) out.diagnostics.push_back(std::move(n));
  }
  return out;
}

struct PolicyDemoRow {
  double alpha = 0.0;
  int iteration = 0;
  int arm = 0;
  double probability = 0.0;
};

struct PolicyDemoResult {
  Vector values;
  std::vector<PolicyDemoRow> rows;
};

/// Repeated improvement of a uniform policy on fixed arm values at fixed eta.
inline PolicyDemoResult run_policy_demo(const ExperimentConfig& cfg) {
  cfg.validate();
  PolicyDemoResult out;
  Rng rng = make_rng({cfg.seed, 0, kStreamDemo});
  out.values.resize(cfg.demo.arms);
  for (int a = 0; a < cfg.demo.arms; ++a) {
    std::normal_distribution<double> standard(0.0, 1.0);
    out.values(a) = standard(rng);
  }
  for (double alpha : cfg.alphas) {
    DiscreteDistribution pi = DiscreteDistribution::uniform(static_cast<std::size_t>(cfg.demo.arms));
    const AlphaDivergence d(alpha);
    for (int it = 0; it <= cfg.iterations; ++it) {
      if (it > 0) {
        const BanditInstance<AlphaDivergence> inst(pi, out.values, cfg.demo.eta, d);
        pi = improve_policy(inst, solve_bandit_dual(inst));
      }
      for (int a = 0; a < cfg.demo.arms; ++a) out.rows.push_back({alpha, it, a, pi[static_cast<std::size_t>(a)]});
    }
  }
  return out;
}

namespace detail {

inline std::filesystem::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create output directory '{}': {}", dir, ec.message()));
  return std::filesystem::path(dir);
}

inline std::string curve_csv(const std::string& header, const std::vector<LabeledCurve>& curves, int first_index) {
  std::string csv = header + "\n";
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.stats.mean.size(); ++i) {
      csv += fmt::format("{},{},{},{},{}\n", c.label, static_cast<int>(i) + first_index,
                         format_number(c.stats.mean[i]), format_number(c.stats.ci95[i]), c.stats.failures);
    }
  }
  return csv;
}

inline std::vector<Series> curve_series(const std::vector<LabeledCurve>& curves, int first_index, const char* prefix) {
  std::vector<Series> series;
  for (const auto& c : curves) {
    Series s{std::string(c.label == "ucb" ? "" : prefix) + c.label, {}, {}};
    for (std::size_t i = 0; i < c.stats.mean.size(); ++i) {
      s.x.push_back(static_cast<double>(i) + first_index);
      s.y.push_back(c.stats.mean[i]);
    }
    series.push_back(std::move(s));
  }
  return series;
}

}  // namespace detail

/// Writes bandit_regret.csv, bandit_regret.svg and regret_vs_alpha.svg.
inline std::vector<std::string> export_bandit(const BanditExperimentResult& result, const ExperimentConfig& cfg) {
  const auto dir = detail::prepare_dir(cfg.output_dir);
  const std::string note = fmt::format("seed={} runs={}", cfg.seed, cfg.runs);
  std::vector<std::string> written;
  const auto csv_path = (dir / "bandit_regret.csv").string();
  write_text_file(csv_path, detail::curve_csv("alpha,step,mean_regret,ci95,failures", result.curves, 1));
  written.push_back(csv_path);

  const auto svg_path = (dir / "bandit_regret.svg").string();
  write_text_file(svg_path, render_line_chart({"Average regret", "step", "regret", note},
                                              detail::curve_series(result.curves, 1, "alpha=")));
  written.push_back(svg_path);

  std::vector<Series> by_alpha;
  for (int h : cfg.bandit.report_horizons) {
    Series s{fmt::format("n={}", h), {}, {}};
    for (std::size_t i = 0; i < result.curves.size() && i < cfg.alphas.size(); ++i) {
      const auto& mean = result.curves[i].stats.mean;
      if (static_cast<std::size_t>(h) > mean.size()) continue;
      s.x.push_back(cfg.alphas[i]);
      s.y.push_back(mean[static_cast<std::size_t>(h - 1)]);
    }
    by_alpha.push_back(std::move(s));
  }
  const auto fig_path = (dir / "regret_vs_alpha.svg").string();
  write_text_file(fig_path, render_line_chart({"Regret after n steps", "alpha", "regret", note}, by_alpha));
  written.push_back(fig_path);
  return written;
}

/// Writes mdp_returns.csv and mdp_returns.svg.
inline std::vector<std::string> export_mdp(const MdpExperimentResult& result, const ExperimentConfig& cfg) {
  const auto dir = detail::prepare_dir(cfg.output_dir);
  const std::string note = fmt::format("env={} seed={} runs={} optimal={}", to_string(cfg.env.kind), cfg.seed,
                                       cfg.runs, format_number(result.optimal_return));
  std::vector<std::string> written;
  const auto csv_path = (dir / "mdp_returns.csv").string();
  write_text_file(csv_path, detail::curve_csv("alpha,iteration,mean_return,ci95,failures", result.curves, 0));
  written.push_back(csv_path);
  auto series = detail::curve_series(result.curves, 0, "alpha=");
  if (!result.curves.empty()) {
    const auto n = result.curves.front().stats.mean.size();
    Series optimum{"optimal", {0.0, static_cast<double>(n > 0 ? n - 1 : 1)},
                   {result.optimal_return, result.optimal_return}};
    series.push_back(std::move(optimum));
  }
  const auto svg_path = (dir / "mdp_returns.svg").string();
  write_text_file(svg_path, render_line_chart({"Expected return, " + to_string(cfg.env.kind), "iteration",
                                               "average reward", note},
                                              series));
  written.push_back(svg_path);
  return written;
}

/// Writes policy_demo.csv and policy_demo.svg (final policies by arm).
inline std::vector<std::string> export_policy_demo(const PolicyDemoResult& result, const ExperimentConfig& cfg) {
  const auto dir = detail::prepare_dir(cfg.output_dir);
  std::vector<std::string> written;
  std::string csv = "alpha,iteration,arm,probability\n";
  for (const auto& row : result.rows) {
    csv += fmt::format("{},{},{},{}\n", format_number(row.alpha), row.iteration, row.arm,
                       format_number(row.probability));
  }
  const auto csv_path = (dir / "policy_demo.csv").string();
  write_text_file(csv_path, csv);
  written.push_back(csv_path);

  std::vector<Series> series;
  for (double alpha : cfg.alphas) {
    Series s{"alpha=" + format_number(alpha), {}, {}};
    for (const auto& row : result.rows) {
      if (row.alpha == alpha && row.iteration == cfg.iterations) {
        s.x.push_back(result.values(row.arm));
        s.y.push_back(row.probability);
      }
    }
    std::vector<std::size_t> order(s.x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
    Series sorted{s.name, {}, {}};
    for (auto i : order) {
      sorted.x.push_back(s.x[i]);
      sorted.y.push_back(s.y[i]);
    }
    series.push_back(std::move(sorted));
  }
  const auto svg_path = (dir / "policy_demo.svg").string();
  write_text_file(svg_path, render_line_chart({fmt::format("Policy after {} updates", cfg.iterations), "arm value Q(a)",
                                               "probability", fmt::format("seed={} eta={}", cfg.seed, cfg.demo.eta)},
                                              series));
  written.push_back(svg_path);
  return written;
}

}  // namespace fdv
