#pragma once

// Command-line front end. Exit codes: 0 success, 1 unexpected failure,
// 2 configuration or usage error, 3 solver failure, 4 I/O failure.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "fdiv/bandit.hpp"
#include "fdiv/config.hpp"
#include "fdiv/harness.hpp"
#include "fdiv/mdp.hpp"
#include "fdiv/oracles.hpp"

namespace fdv {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitSolver = 3, kExitIo = 4 };

namespace cli {

inline std::string g6(double x) { return fmt::format("{:.6g}", x); }

inline std::string join_g6(const Vector& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out += (i ? " " : "") + g6(v(i));
  return out;
}

inline std::string divergence_name(double alpha) {
  if (alpha == 1.0) return "KL";
  if (alpha == 0.0) return "reverse KL";
  if (alpha == 2.0) return "Pearson chi^2";
  if (alpha == -1.0) return "Neyman chi^2";
  if (alpha == 0.5) return "Hellinger";
  return "alpha-divergence";
}

inline int divergence_table(double alpha, int points, std::ostream& out) {
  const AlphaDivergence d(alpha);
  const ConjugateDomain dom = d.domain();
  fmt::print(out, "alpha = {} ({})\n", g6(alpha), divergence_name(alpha));
  switch (dom.kind) {
    case DomainKind::all_reals:
      fmt::print(out, "dom f* = all reals\n");
      break;
    case DomainKind::upper_bounded:
      fmt::print(out, "dom f* = y < {}\n", g6(dom.bound));
      break;
    case DomainKind::lower_bounded:
      fmt::print(out, "dom f* = y >= {}\n", g6(dom.bound));
      break;
  }
  fmt::print(out, "{:>12} {:>12} {:>12}\n", "x", "f(x)", "f'(x)");
  for (int k = 0; k < points; ++k) {
    const double x = std::pow(10.0, -1.0 + 2.0 * k / std::max(points - 1, 1));
    fmt::print(out, "{:>12} {:>12} {:>12}\n", g6(x), g6(d.f(x)), g6(d.f_prime(x)));
  }
  fmt::print(out, "{:>12} {:>12} {:>12}\n", "y", "f*(y)", "(f*)'(y)");
  for (int k = 0; k < points; ++k) {
    const double y = -2.0 + 4.0 * k / std::max(points - 1, 1);
    if (!dom.contains(y)) continue;
    fmt::print(out, "{:>12} {:>12} {:>12}\n", g6(y), g6(d.conjugate(y)), g6(d.conjugate_prime(y)));
  }
  return kExitOk;
}

inline int bandit_improve(double alpha, double eta, const std::vector<double>& q, const std::vector<double>& values,
                          std::ostream& out) {
  const Vector qv = Eigen::Map<const Vector>(q.data(), static_cast<Eigen::Index>(q.size()));
  const Vector Qv = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  const BanditInstance<AlphaDivergence> inst(DiscreteDistribution(qv), Qv, eta, AlphaDivergence(alpha));
  const auto sol = solve_bandit_dual(inst);
  const auto pi = improve_policy(inst, sol);
  fmt::print(out, "pi = {}\n", join_g6(pi.weights()));
  fmt::print(out, "lambda = {}\n", g6(sol.lambda));
  fmt::print(out, "kappa = {}\n", join_g6(sol.kappa));
  fmt::print(out, "dual = {}\n", g6(sol.dual_value));
  fmt::print(out, "residual = {}\n", g6(sol.normalization_residual));
  return kExitOk;
}

struct SelfCheck {
  std::string name;
  std::function<std::optional<std::string>()> run;  // nullopt on success
};

inline std::vector<SelfCheck> self_checks() {
  std::vector<SelfCheck> checks;
  checks.push_back({"conjugate closed forms", [] () -> std::optional<std::string> {
    struct Row {
      double alpha;
      std::function<double(double)> fstar;
      std::function<double(double)> fstar_prime;
      double y_max;
    };
    const std::vector<Row> rows = {
        {1.0, [](double y) { return std::exp(y) - 1.0; }, [](double y) { return std::exp(y); }, 3.0},
        {0.0, [](double y) { return -std::log(1.0 - y); }, [](double y) { return 1.0 / (1.0 - y); }, 0.99},
        {2.0, [](double y) { return 0.5 * (y + 1.0) * (y + 1.0) - 0.5; }, [](double y) { return y + 1.0; }, 3.0},
        {-1.0, [](double y) { return 1.0 - std::sqrt(1.0 - 2.0 * y); },
         [](double y) { return 1.0 / std::sqrt(1.0 - 2.0 * y); }, 0.49},
        {0.5, [](double y) { return 2.0 * y / (2.0 - y); }, [](double y) { return 4.0 / ((2.0 - y) * (2.0 - y)); },
         1.99}};
    for (const auto& row : rows) {
      const AlphaDivergence d(row.alpha);
      for (int k = 0; k <= 20; ++k) {
        const double y = -0.9 + (row.y_max + 0.9) * k / 20.0;
        const double e1 = std::abs(d.conjugate(y) - row.fstar(y));
        const double e2 = std::abs(d.conjugate_prime(y) - row.fstar_prime(y));
        if (e1 > 1e-10 || e2 > 1e-10) return fmt::format("alpha={} y={} err={}", row.alpha, y, std::max(e1, e2));
      }
    }
    return std::nullopt;
  }});
  checks.push_back({"softmax and linear closed forms", [] () -> std::optional<std::string> {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.1, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
      Vector w(10);
      Vector Q(10);
      for (int a = 0; a < 10; ++a) {
        w(a) = unit(rng);
        Q(a) = normal(rng);
      }
      const auto q = DiscreteDistribution::normalized(w);
      const double eta = 0.5 + 2.0 * unit(rng);
      const BanditInstance<AlphaDivergence> kl(q, Q, eta, AlphaDivergence::kl());
      const auto [pi_kl, sol_kl] = bandit_update(kl);
      const auto [ref_kl, lam_kl] = softmax_closed_form(q, Q, eta);
      if (linf_distance(pi_kl.weights(), ref_kl.weights()) > 1e-6 || std::abs(sol_kl.lambda - lam_kl) > 1e-6) {
        return fmt::format("softmax mismatch on trial {}", trial);
      }
      const double eta2 = eta_min(q, Q) * 1.5 + 0.1;
      const BanditInstance<AlphaDivergence> pearson(q, Q, eta2, AlphaDivergence::pearson());
      const auto [pi_p, sol_p] = bandit_update(pearson);
      const auto [ref_p, lam_p] = linear_closed_form(q, Q, eta2);
      if (linf_distance(pi_p.weights(), ref_p.weights()) > 1e-6 || std::abs(sol_p.lambda - lam_p) > 1e-6) {
        return fmt::format("linear mismatch on trial {}", trial);
      }
    }
    return std::nullopt;
  }});
  checks.push_back({"primal oracle agreement", [] () -> std::optional<std::string> {
    const DiscreteDistribution q{0.2, 0.3, 0.5};
    Vector Q(3);
    Q << 1.0, -0.5, 0.25;
    for (double alpha : {-1.0, 0.0, 0.5, 1.0, 2.0}) {
      const BanditInstance<AlphaDivergence> inst(q, Q, 0.7, AlphaDivergence(alpha));
      const auto [pi, sol] = bandit_update(inst);
      const auto ref = primal_oracle_bandit(inst);
      if (linf_distance(pi.weights(), ref.weights()) > 1e-4) return fmt::format("alpha={}", alpha);
    }
    return std::nullopt;
  }});
  checks.push_back({"stationary distribution", [] () -> std::optional<std::string> {
    const TabularMdp model = build_env(EnvConfig::preset(EnvKind::frozenlake));
    const Policy pi = uniform_policy(model.n_states(), model.n_actions());
    const Vector mu = stationary_distribution(model, pi).weights();
    const Matrix p = state_transition_matrix(model, pi);
    const double residual = (p.transpose() * mu - mu).lpNorm<1>();
    if (residual > 1e-10) return fmt::format("residual {}", residual);
    return std::nullopt;
  }});
  checks.push_back({"squared-advantage identity", [] () -> std::optional<std::string> {
    const TabularMdp model = build_env(EnvConfig::preset(EnvKind::chain));
    const Policy pi = uniform_policy(model.n_states(), model.n_actions());
    const Matrix q = stationary_joint(model, pi);
    const double j = q.cwiseProduct(model.rewards()).sum();
    ValueFunction v = ValueFunction::zero(FeatureMap::one_hot(model.n_states()));
    for (int s = 0; s < model.n_states(); ++s) v.theta(s) = 0.1 * s;
    const Matrix diff_adv = exact_advantage(model, v).array() - j;
    const double eta = 50.0;
    const auto [g, grad] = mdp_dual_objective(model, q, AlphaDivergence::pearson(), eta, v, j,
                                              Matrix::Zero(model.n_states(), model.n_actions()));
    const double expected = q.cwiseProduct(diff_adv.cwiseProduct(diff_adv)).sum() / (2.0 * eta) + j;
    if (std::abs(g - expected) > 1e-10) return fmt::format("gap {}", g - expected);
    return std::nullopt;
  }});
  return checks;
}

inline int self_check(std::ostream& out) {
  int failures = 0;
  for (const auto& check : self_checks()) {
    std::optional<std::string> problem;
    try {
      problem = check.run();
    } catch (const std::exception& e) {
      problem = e.what();
    }
    if (problem) {
      ++failures;
      fmt::print(out, "FAIL {}: {}\n", check.name, *problem);
    } else {
      fmt::print(out, "PASS {}\n", check.name);
    }
  }
  return failures == 0 ? kExitOk : kExitFailure;
}

struct ExperimentArgs {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::optional<int> workers;
};

inline ExperimentConfig resolve_config(const ExperimentArgs& args, const std::string& default_preset) {
  std::vector<std::string> overrides;
  if (const char* seed = std::getenv("FDIV_SEED"); seed != nullptr && *seed != '\0') {
    overrides.push_back(std::string("seed=") + seed);
  }
  overrides.insert(overrides.end(), args.overrides.begin(), args.overrides.end());
  if (!args.output_dir.empty()) overrides.push_back("output_dir=" + Json(args.output_dir).dump());
  if (args.workers) overrides.push_back(fmt::format("workers={}", *args.workers));
  const std::string preset = args.preset.empty() && args.config_path.empty() ? default_preset : args.preset;
  return parse_config(args.config_path, overrides, preset);
}

inline void write_resolved_config(const ExperimentConfig& cfg) {
  const auto dir = detail::prepare_dir(cfg.output_dir);
  Json doc = to_json(cfg);
  write_text_file((dir / "resolved_config.json").string(), doc.dump(2) + "\n");
}

inline void report_diagnostics(const std::vector<std::string>& diagnostics, std::ostream& err) {
  for (const auto& d : diagnostics) fmt::print(err, "run failed: {}\n", d);
}

inline int bandit_regret(const ExperimentArgs& args, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve_config(args, "bandit");
  write_resolved_config(cfg);
  const auto result = run_bandit_experiment(cfg);
  report_diagnostics(result.diagnostics, err);
  for (const auto& path : export_bandit(result, cfg)) fmt::print(out, "wrote {}\n", path);
  for (const auto& c : result.curves) {
    fmt::print(out, "alpha={} final_regret={} ci95={} failures={}\n", c.label,
               g6(c.stats.mean.empty() ? 0.0 : c.stats.mean.back()), g6(c.stats.ci95.empty() ? 0.0 : c.stats.ci95.back()),
               c.stats.failures);
  }
  return kExitOk;
}

inline int policy_demo(const ExperimentArgs& args, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(args, "policy-demo");
  write_resolved_config(cfg);
  const auto result = run_policy_demo(cfg);
  for (const auto& path : export_policy_demo(result, cfg)) fmt::print(out, "wrote {}\n", path);
  fmt::print(out, "Q = {}\n", join_g6(result.values));
  for (double alpha : cfg.alphas) {
    Vector last(cfg.demo.arms);
    for (const auto& row : result.rows) {
      if (row.alpha == alpha && row.iteration == cfg.iterations) last(row.arm) = row.probability;
    }
    fmt::print(out, "alpha={} pi = {}\n", format_number(alpha), join_g6(last));
  }
  return kExitOk;
}

inline int mdp_train(const ExperimentArgs& args, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve_config(args, "chain");
  write_resolved_config(cfg);
  const auto result = run_mdp_experiment(cfg);
  report_diagnostics(result.diagnostics, err);
  for (const auto& path : export_mdp(result, cfg)) fmt::print(out, "wrote {}\n", path);
  fmt::print(out, "optimal average reward = {}\n", g6(result.optimal_return));
  for (const auto& c : result.curves) {
    fmt::print(out, "alpha={} final_return={} ci95={} failures={}\n", c.label,
               g6(c.stats.mean.empty() ? 0.0 : c.stats.mean.back()), g6(c.stats.ci95.empty() ? 0.0 : c.stats.ci95.back()),
               c.stats.failures);
  }
  return kExitOk;
}

inline void add_experiment_options(CLI::App* sub, ExperimentArgs& args) {
  sub->add_option("--config", args.config_path, "JSON config file");
  sub->add_option("--preset", args.preset, "Published settings")->check(CLI::IsMember(preset_names()));
  sub->add_option("--set", args.overrides, "Override as dotted.key=value (repeatable)");
  sub->add_option("--output-dir", args.output_dir, "Directory for CSV, SVG and resolved_config.json");
  sub->add_option("--workers", args.workers, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber);
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"f-divergence policy improvement toolkit", "fdiv"};
  app.require_subcommand(1);

  double alpha = 1.0;
  int points = 9;
  auto* table = app.add_subcommand("divergence-table", "Print f, f', f* and (f*)' at sample points");
  table->add_option("--alpha", alpha, "Divergence parameter")->required();
  table->add_option("--points", points, "Sample points per table")->check(CLI::Range(2, 1000));

  double eta = 1.0;
  std::vector<double> q;
  std::vector<double> values;
  auto* improve = app.add_subcommand("bandit-improve", "One policy-improvement step on a bandit");
  improve->add_option("--alpha", alpha, "Divergence parameter")->required();
  improve->add_option("--eta", eta, "Temperature")->required();
  improve->add_option("--q", q, "Old policy, comma separated")->required()->delimiter(',');
  improve->add_option("--Q", values, "Action values, comma separated")->required()->delimiter(',');

  cli::ExperimentArgs regret_args;
  cli::ExperimentArgs demo_args;
  cli::ExperimentArgs mdp_args;
  cli::add_experiment_options(app.add_subcommand("bandit-regret", "Regret sweep over alpha"), regret_args);
  cli::add_experiment_options(app.add_subcommand("policy-demo", "Repeated improvement on a fixed bandit"), demo_args);
  cli::add_experiment_options(app.add_subcommand("mdp-train", "Policy iteration learning curves"), mdp_args);
  auto* check = app.add_subcommand("self-check", "Closed-form and oracle agreement checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (app.got_subcommand(table)) return cli::divergence_table(alpha, points, out);
    if (app.got_subcommand(improve)) return cli::bandit_improve(alpha, eta, q, values, out);
    if (app.got_subcommand("bandit-regret")) return cli::bandit_regret(regret_args, out, err);
    if (app.got_subcommand("policy-demo")) return cli::policy_demo(demo_args, out);
    if (app.got_subcommand("mdp-train")) return cli::mdp_train(mdp_args, out, err);
    if (app.got_subcommand(check)) return cli::self_check(out);
  } catch (const ConfigError& e) {
    fmt::print(err, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    fmt::print(err, "invalid input: {}\n", e.what());
    return kExitConfig;
  } catch (const SolverError& e) {
    fmt::print(err, "solver error: {}\n", e.what());
    return kExitSolver;
  } catch (const NormalizationError& e) {
    fmt::print(err, "solver error: {}\n", e.what());
    return kExitSolver;
  } catch (const DomainError& e) {
    fmt::print(err, "solver error: {}\n", e.what());
    return kExitSolver;
  } catch (const OverflowError& e) {
    fmt::print(err, "solver error: {}\n", e.what());
    return kExitSolver;
  } catch (const IoError& e) {
    fmt::print(err, "i/o error: {}\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace fdv
