#include <cmath>

#include <gtest/gtest.h>

#include "fdiv/mdp.hpp"
#include "test_support.hpp"

namespace fdv {
namespace {

using testing::Gen;

Vector vec(std::initializer_list<double> v) {
  return Eigen::Map<const Vector>(v.begin(), static_cast<Eigen::Index>(v.size()));
}

Matrix kappa_zero(const TabularMdp& m) { return Matrix::Zero(m.n_states(), m.n_actions()); }

ValueFunction one_hot_value(const Vector& v) { return {v, FeatureMap::one_hot(static_cast<int>(v.size()))}; }

TEST(Stationary, SwapChain) {
  const TabularMdp m = testing::swap_mdp();
  const Vector mu = stationary_distribution(m, uniform_policy(2, 1)).weights();
  EXPECT_NEAR(mu(0), 0.5, 1e-15);
  EXPECT_NEAR(mu(1), 0.5, 1e-15);
  EXPECT_NEAR(expected_return_exact(m, uniform_policy(2, 1)), 0.5, 1e-15);
}

TEST(Stationary, SingleSelfLoop) {
  Matrix p(1, 1);
  p << 1.0;
  Matrix r(1, 1);
  r << 3.0;
  const TabularMdp m(1, 1, p, r, vec({1.0}));
  EXPECT_EQ(stationary_distribution(m, uniform_policy(1, 1))[0], 1.0);
  EXPECT_DOUBLE_EQ(expected_return_exact(m, uniform_policy(1, 1)), 3.0);
}

TEST(Stationary, CompleteGraphIsUniform) {
  const Matrix p = Matrix::Constant(4, 4, 0.25);
  const TabularMdp m(4, 1, p, Matrix::Zero(4, 1), Vector::Constant(4, 0.25));
  EXPECT_LE(linf_distance(stationary_distribution(m, uniform_policy(4, 1)).weights(), Vector::Constant(4, 0.25)),
            1e-15);
}

TEST(Stationary, TransientStatesGetNoMass) {
  // 0 -> 1, and 1 <-> 2 forever.
  Matrix p(3, 3);
  p << 0, 1, 0, 0, 0, 1, 0, 1, 0;
  const TabularMdp m(3, 1, p, Matrix::Zero(3, 1), vec({1.0, 0.0, 0.0}));
  const Vector mu = stationary_distribution(m, uniform_policy(3, 1)).weights();
  EXPECT_EQ(mu(0), 0.0);
  EXPECT_NEAR(mu(1), 0.5, 1e-14);
}

TEST(Stationary, MatchesPowerIteration) {
  Gen g(51);
  for (int i = 0; i < 20; ++i) {
    const TabularMdp m = testing::random_mdp(g, 5, 3);
    const Policy pi = testing::random_policy(g, 5, 3);
    const Vector mu = stationary_distribution(m, pi).weights();
    const Vector oracle = testing::power_stationary(state_transition_matrix(m, pi));
    EXPECT_LE(linf_distance(mu, oracle), 1e-12);
    EXPECT_NEAR(expected_return_exact(m, pi), testing::power_return(m, pi), 1e-12);
  }
}

TEST(Stationary, InvariantUnderTransition) {
  Gen g(52);
  for (int i = 0; i < 20; ++i) {
    const TabularMdp m = testing::random_mdp(g, 6, 2);
    const Policy pi = testing::random_policy(g, 6, 2);
    EXPECT_LE(stationarity_residual(m, stationary_joint(m, pi)), 1e-13);
    EXPECT_NEAR(stationary_joint(m, pi).sum(), 1.0, 1e-14);
  }
}

TEST(TabularMdpValidation, RejectsBadRows) {
  Matrix p(2, 2);
  p << 0.5, 0.4, 0, 1;
  EXPECT_THROW(TabularMdp(2, 1, p, Matrix::Zero(2, 1), vec({0.5, 0.5})), std::invalid_argument);
}

TEST(OptimalAverageReward, MatchesBruteForceOnRandomModels) {
  Gen g(53);
  for (int i = 0; i < 10; ++i) {
    const TabularMdp m = testing::random_mdp(g, 3, 2);
    double best = -1e300;
    for (int code = 0; code < 8; ++code) {
      Policy pi = Policy::Zero(3, 2);
      for (int s = 0; s < 3; ++s) pi(s, (code >> s) & 1) = 1.0;
      best = std::max(best, testing::power_return(m, pi));
    }
    EXPECT_NEAR(optimal_average_reward(m).average_reward, best, 1e-9);
  }
}

TEST(ExactAdvantage, SwapExample) {
  const TabularMdp m = testing::swap_mdp(1.0, 0.0);
  const Matrix adv = exact_advantage(m, one_hot_value(vec({0.0, 1.0})));
  EXPECT_DOUBLE_EQ(adv(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(adv(1, 0), -1.0);
}

TEST(ExactAdvantage, StationaryMeanIsReturn) {
  Gen g(54);
  for (int i = 0; i < 20; ++i) {
    const TabularMdp m = testing::random_mdp(g, 4, 3);
    const Policy pi = testing::random_policy(g, 4, 3);
    const Matrix adv = exact_advantage(m, one_hot_value(testing::normal_vector(g, 4)));
    EXPECT_NEAR(stationary_joint(m, pi).cwiseProduct(adv).sum(), expected_return_exact(m, pi), 1e-12);
  }
}

TEST(EstimateAdvantages, AveragesPerPair) {
  const std::vector<Transition> samples{{0, 0, 1, 1.0}, {0, 0, 0, 3.0}, {1, 0, 0, 0.0}};
  const TransitionBatch batch(2, 1, samples, uniform_policy(2, 1));
  const AdvantageMap adv = estimate_advantages(batch, one_hot_value(vec({0.0, 1.0})));
  EXPECT_DOUBLE_EQ(adv.at({0, 0}), 2.5);
  EXPECT_DOUBLE_EQ(adv.at({1, 0}), -1.0);
  EXPECT_EQ(adv.size(), 2U);
}

TEST(EstimateAdvantages, Errors) {
  const TransitionBatch empty(2, 1, {}, uniform_policy(2, 1));
  EXPECT_THROW(estimate_advantages(empty, one_hot_value(vec({0.0, 0.0}))), std::invalid_argument);
  Policy pinned(2, 2);
  pinned << 1, 0, 0.5, 0.5;
  EXPECT_THROW(TransitionBatch(2, 2, {{0, 1, 0, 0.0}}, pinned), std::invalid_argument);
}

// Dual objective

TEST(MdpDualObjective, ConstantAdvantageGivesLambda) {
  Matrix p(2, 2);
  p << 0.3, 0.7, 0.6, 0.4;
  const TabularMdp m(2, 1, p, Matrix::Constant(2, 1, 0.8), vec({0.5, 0.5}));
  const Matrix q = stationary_joint(m, uniform_policy(2, 1));
  for (double alpha : {-1.0, 0.0, 1.0, 2.0, 3.0}) {
    const auto [value, grad] =
        mdp_dual_objective(m, q, AlphaDivergence(alpha), 0.4, ValueFunction::zero(FeatureMap::one_hot(2)), 0.8,
                           kappa_zero(m));
    EXPECT_NEAR(value, 0.8, 1e-15) << alpha;
  }
}

TEST(MdpDualObjective, PearsonIsScaledMeanSquaredAdvantage) {
  Gen g(55);
  for (int i = 0; i < 20; ++i) {
    const TabularMdp m = testing::random_mdp(g, 4, 3);
    const Policy pi = testing::random_policy(g, 4, 3);
    const Matrix q = stationary_joint(m, pi);
    const double j = expected_return_exact(m, pi);
    const ValueFunction v = one_hot_value(testing::normal_vector(g, 4));
    const Matrix diff_adv = exact_advantage(m, v).array() - j;
    const double eta = 1.0 + diff_adv.cwiseAbs().maxCoeff() * testing::uniform(g, 1.0, 3.0);
    const double value = mdp_dual_objective(m, q, AlphaDivergence::pearson(), eta, v, j, kappa_zero(m)).first;
    EXPECT_NEAR(value, q.cwiseProduct(diff_adv.cwiseAbs2()).sum() / (2.0 * eta) + j, 1e-10);
    EXPECT_NEAR(value, ms_objectives(m, q, v).msda / (2.0 * eta) + j, 1e-10);
  }
}

TEST(MdpDualObjective, GradientMatchesFiniteDifferences) {
  Gen g(56);
  for (double alpha : {-1.0, 0.0, 0.5, 1.0, 2.0, 4.0}) {
    for (int trial = 0; trial < 5; ++trial) {
      const TabularMdp m = testing::random_mdp(g, 3, 2);
      const Matrix q = stationary_joint(m, testing::random_policy(g, 3, 2));
      const MdpDualProblem problem = make_dual_problem(m, q, FeatureMap::one_hot(3));
      const AlphaDivergence d(alpha);
      const double eta = testing::uniform(g, 0.5, 2.0);
      const auto n = static_cast<Eigen::Index>(problem.pairs.size());
      const bool closed = d.domain().closed;
      auto unpack_kappa = [&](const Vector& x) {
        Matrix kappa = kappa_zero(m);
        if (closed) {
          for (Eigen::Index i = 0; i < n; ++i) {
            const auto [s, a] = problem.pairs[static_cast<std::size_t>(i)];
            kappa(s, a) = x(4 + i);
          }
        }
        return kappa;
      };
      auto objective = [&](const Vector& x, Vector& grad) {
        const auto [value, full] = mdp_dual_objective(problem, d, eta, x.head(3), x(3), unpack_kappa(x));
        grad = full;
        return value;
      };
      Vector x(closed ? 4 + n : 4);
      x.head(3) = testing::normal_vector(g, 3, 0.3);
      const Vector adv = problem.advantages(x.head(3));
      x(3) = adv.maxCoeff() + 0.5;
      // Every conjugate argument at 0.1 / eta when kappa is present.
      if (closed) x.tail(n) = (x(3) - adv.array() + 0.1).matrix();
      EXPECT_LE(check_gradient(objective, x, 1e-6), 1e-5) << alpha;
    }
  }
}

TEST(MdpDualObjective, NegativeKappaRejected) {
  const TabularMdp m = testing::swap_mdp();
  Matrix kappa = kappa_zero(m);
  kappa(0, 0) = -1.0;
  EXPECT_THROW(mdp_dual_objective(m, stationary_joint(m, uniform_policy(2, 1)), AlphaDivergence::pearson(), 1.0,
                                  ValueFunction::zero(FeatureMap::one_hot(2)), 0.0, kappa),
               DomainError);
}

// Solver

struct SolvedCase {
  TabularMdp model;
  Matrix q;
  double eta;
};

SolvedCase random_case(Gen& g, int ns = 4, int na = 3) {
  TabularMdp m = testing::random_mdp(g, ns, na);
  Matrix q = stationary_joint(m, testing::random_policy(g, ns, na));
  return {std::move(m), std::move(q), testing::log_uniform(g, 0.3, 5.0)};
}

TEST(SolveMdpDual, KlBaselineIsLogSumExp) {
  Gen g(57);
  for (int i = 0; i < 10; ++i) {
    const SolvedCase c = random_case(g);
    const auto problem = make_dual_problem(c.model, c.q, FeatureMap::one_hot(4));
    const MdpDualSolution sol = solve_mdp_dual(problem, AlphaDivergence::kl(), c.eta);
    const Vector adv = problem.advantages(sol.value.theta);
    const double lse = c.eta * std::log(problem.weight.dot((adv / c.eta).array().exp().matrix()));
    EXPECT_NEAR(sol.lambda, lse, 1e-7 * c.eta);
    EXPECT_TRUE(sol.report.converged);
  }
}

TEST(SolveMdpDual, PearsonBaselineIsReturnAtHighTemperature) {
  Gen g(58);
  for (int i = 0; i < 10; ++i) {
    const TabularMdp m = testing::random_mdp(g, 4, 3);
    const Policy pi = testing::random_policy(g, 4, 3);
    const Matrix q = stationary_joint(m, pi);
    const MdpDualSolution sol =
        solve_mdp_dual(make_dual_problem(m, q, FeatureMap::one_hot(4)), AlphaDivergence::pearson(), 100.0);
    EXPECT_EQ(sol.kappa.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(sol.lambda, expected_return_exact(m, pi), 1e-8);
  }
}

TEST(SolveMdpDual, ConstantRewardGivesZeroValue) {
  Gen g(59);
  Matrix p(3 * 2, 3);
  for (int r = 0; r < 6; ++r) p.row(r) = testing::random_distribution(g, 3, 0.05).weights().transpose();
  const TabularMdp m(3, 2, p, Matrix::Constant(3, 2, -0.4), Vector::Constant(3, 1.0 / 3.0));
  const Matrix q = stationary_joint(m, uniform_policy(3, 2));
  for (double alpha : {-1.0, 0.0, 0.5, 1.0, 2.0, 5.0}) {
    const MdpDualSolution sol =
        solve_mdp_dual(make_dual_problem(m, q, FeatureMap::one_hot(3)), AlphaDivergence(alpha), 0.7);
    EXPECT_LE(sol.value.theta.cwiseAbs().maxCoeff(), 1e-7) << alpha;
    EXPECT_NEAR(sol.lambda, -0.4, 1e-8) << alpha;
  }
}

TEST(SolveMdpDual, GaugeInvariantAcrossFeatureScaling) {
  Gen g(60);
  const SolvedCase c = random_case(g, 3, 2);
  const auto one_hot = solve_mdp_dual(make_dual_problem(c.model, c.q, FeatureMap::one_hot(3)), AlphaDivergence::kl(),
                                      c.eta);
  const auto scaled = solve_mdp_dual(make_dual_problem(c.model, c.q, FeatureMap(2.0 * Matrix::Identity(3, 3))),
                                     AlphaDivergence::kl(), c.eta);
  EXPECT_NEAR(one_hot.lambda, scaled.lambda, 1e-6);
  const Vector a = one_hot.value.values();
  const Vector b = scaled.value.values();
  EXPECT_LE(((a.array() - a(0)) - (b.array() - b(0))).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SolveMdpDual, RejectsBadArguments) {
  const SolvedCase c = [] {
    Gen g(61);
    return random_case(g);
  }();
  const auto problem = make_dual_problem(c.model, c.q, FeatureMap::one_hot(4));
  EXPECT_THROW(solve_mdp_dual(problem, AlphaDivergence::kl(), 0.0), std::invalid_argument);
  EXPECT_THROW(make_dual_problem(c.model, c.q, FeatureMap::one_hot(3)), std::invalid_argument);
  const TransitionBatch empty(4, 3, {}, uniform_policy(4, 3));
  EXPECT_THROW(make_dual_problem(empty, FeatureMap::one_hot(4)), std::invalid_argument);
}

// Improvement

TEST(ImproveMdpPolicy, KlIsPerStateSoftmax) {
  Gen g(62);
  const SolvedCase c = random_case(g);
  const MdpDualSolution sol =
      solve_mdp_dual(make_dual_problem(c.model, c.q, FeatureMap::one_hot(4)), AlphaDivergence::kl(), c.eta);
  const Policy pi_k = uniform_policy(4, 3);
  const Matrix adv = exact_advantage(c.model, sol.value);
  const Policy next = improve_mdp_policy(pi_k, adv, sol, AlphaDivergence::kl(), c.eta);
  for (int s = 0; s < 4; ++s) {
    Eigen::RowVectorXd w = (adv.row(s).array() / c.eta).exp();
    w /= w.sum();
    EXPECT_LE((next.row(s) - w).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ImproveMdpPolicy, PearsonIsLinearReweighting) {
  Gen g(63);
  const SolvedCase c = random_case(g);
  const double eta = 50.0;
  const MdpDualSolution sol =
      solve_mdp_dual(make_dual_problem(c.model, c.q, FeatureMap::one_hot(4)), AlphaDivergence::pearson(), eta);
  const Policy pi_k = testing::random_policy(g, 4, 3);
  const Matrix adv = exact_advantage(c.model, sol.value);
  const Policy next = improve_mdp_policy(pi_k, adv, sol, AlphaDivergence::pearson(), eta);
  for (int s = 0; s < 4; ++s) {
    Eigen::RowVectorXd w = pi_k.row(s).array() * (1.0 + (adv.row(s).array() - sol.lambda) / eta);
    w /= w.sum();
    EXPECT_LE((next.row(s) - w).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ImproveMdpPolicy, StateConstantAdvantageKeepsPolicy) {
  Gen g(64);
  const Policy pi_k = testing::random_policy(g, 3, 4);
  Matrix adv(3, 4);
  for (int s = 0; s < 3; ++s) adv.row(s).setConstant(testing::uniform(g, -0.2, 0.2));
  MdpDualSolution sol;
  sol.lambda = 0.0;
  sol.kappa = Matrix::Zero(3, 4);
  for (double alpha : {-2.0, 0.0, 0.5, 1.0, 2.0, 6.0}) {
    const Policy next = improve_mdp_policy(pi_k, adv, sol, AlphaDivergence(alpha), 1.0);
    EXPECT_LE((next - pi_k).cwiseAbs().maxCoeff(), 1e-12) << alpha;
  }
}

TEST(ImproveMdpPolicy, FullyEliminatedStateIsAnError) {
  MdpDualSolution sol;
  sol.lambda = 0.0;
  sol.kappa = Matrix::Zero(2, 2);
  sol.kappa.row(1).setConstant(1.0);
  const Policy pi_k = uniform_policy(2, 2);
  const Matrix adv = Matrix::Zero(2, 2);
  EXPECT_THROW(improve_mdp_policy(pi_k, adv, sol, AlphaDivergence::pearson(), 1.0), DomainError);

  const AdvantageMap sparse{{{0, 0}, 0.0}, {{1, 0}, 0.0}};
  std::vector<int> degenerate;
  const Policy kept = improve_mdp_policy(pi_k, sparse, sol, AlphaDivergence::pearson(), 1.0, &degenerate);
  EXPECT_EQ(degenerate, std::vector<int>{1});
  EXPECT_EQ(kept.row(1), pi_k.row(1));
}

TEST(ImproveMdpPolicy, UnvisitedPairsUseBaseline) {
  MdpDualSolution sol;
  sol.lambda = 0.3;
  sol.kappa = Matrix::Zero(1, 2);
  const AdvantageMap adv{{{0, 0}, 0.3}};
  const Policy next = improve_mdp_policy(Policy::Constant(1, 2, 0.5), adv, sol, AlphaDivergence::kl(), 1.0);
  EXPECT_NEAR(next(0, 0), 0.5, 1e-15);
}

// Exact oracle

TEST(ExactDualOracle, ConstantRewardReturnsReference) {
  Gen g(65);
  Matrix p(3 * 2, 3);
  for (int r = 0; r < 6; ++r) p.row(r) = testing::random_distribution(g, 3, 0.05).weights().transpose();
  const TabularMdp m(3, 2, p, Matrix::Constant(3, 2, 1.0), Vector::Constant(3, 1.0 / 3.0));
  const Matrix q = stationary_joint(m, testing::random_policy(g, 3, 2));
  for (double alpha : {0.0, 1.0, 2.0}) {
    const auto out = exact_dual_oracle(m, q, AlphaDivergence(alpha), 0.5);
    EXPECT_LE((out.joint - q).cwiseAbs().maxCoeff(), 1e-8) << alpha;
  }
}

TEST(ExactDualOracle, HighTemperatureReturnsReference) {
  Gen g(66);
  const SolvedCase c = random_case(g, 3, 2);
  for (double alpha : {0.0, 1.0, 2.0}) {
    const auto out = exact_dual_oracle(c.model, c.q, AlphaDivergence(alpha), 1e9);
    EXPECT_LE((out.joint - c.q).cwiseAbs().maxCoeff(), 1e-6) << alpha;
  }
}

TEST(ExactDualOracle, JointIsStationaryAndNormalized) {
  Gen g(67);
  for (int i = 0; i < 5; ++i) {
    const SolvedCase c = random_case(g, 4, 3);
    for (double alpha : {0.0, 1.0, 2.0}) {
      const auto out = exact_dual_oracle(c.model, c.q, AlphaDivergence(alpha), c.eta);
      EXPECT_LE(stationarity_residual(c.model, out.joint), 1e-4) << alpha;
      EXPECT_NEAR(out.joint.sum(), 1.0, 1e-6) << alpha;
    }
  }
}

// Primal reference: the stationary joint of a policy, scored by
// sum rho r - eta D_f(rho || q), improved by per-state compass moves.
Matrix primal_compass_search(const TabularMdp& m, const Matrix& q, const AlphaDivergence& d, double eta) {
  auto score = [&](const Policy& pi) {
    const Matrix rho = testing::stationary_joint_oracle(m, pi);
    double value = rho.cwiseProduct(m.rewards()).sum();
    for (Eigen::Index i = 0; i < rho.size(); ++i) {
      if (q(i) > 0.0) value -= eta * q(i) * d.f(std::max(rho(i), 1e-300) / q(i));
    }
    return value;
  };
  Policy best = q.rowwise().sum().cwiseInverse().asDiagonal() * q;
  double best_value = score(best);
  double step = 0.1;
  while (step > 1e-7) {
    bool improved = false;
    for (int s = 0; s < m.n_states(); ++s) {
      for (int from = 0; from < m.n_actions(); ++from) {
        for (int to = 0; to < m.n_actions(); ++to) {
          if (from == to) continue;
          Policy trial = best;
          const double moved = std::min(step, trial(s, from) * 0.999);
          trial(s, from) -= moved;
          trial(s, to) += moved;
          const double v = score(trial);
          if (v > best_value) {
            best_value = v;
            best = trial;
            improved = true;
          }
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return testing::stationary_joint_oracle(m, best);
}

TEST(ExactDualOracle, KlAgreesWithPrimalSearch) {
  Gen g(68);
  for (int i = 0; i < 3; ++i) {
    const SolvedCase c = random_case(g, 3, 2);
    const auto out = exact_dual_oracle(c.model, c.q, AlphaDivergence::kl(), c.eta);
    const Matrix primal = primal_compass_search(c.model, c.q, AlphaDivergence::kl(), c.eta);
    EXPECT_LE((out.joint - primal).cwiseAbs().maxCoeff(), 1e-3);
  }
}

// Mean-squared objectives

TEST(MsObjectives, JensenOrdering) {
  Gen g(69);
  for (int i = 0; i < 20; ++i) {
    const SolvedCase c = random_case(g);
    const auto ms = ms_objectives(c.model, c.q, one_hot_value(testing::normal_vector(g, 4)));
    EXPECT_LE(ms.msdbe, ms.msda + 1e-12);
    EXPECT_LE(ms.msda, ms.msdtde + 1e-12);
  }
}

TEST(MsObjectives, DeterministicTransitionsCollapseTdAndAdvantage) {
  Gen g(70);
  Matrix p = Matrix::Zero(3 * 2, 3);
  for (int r = 0; r < 6; ++r) p(r, static_cast<Eigen::Index>(g() % 3)) = 1.0;
  const TabularMdp m(3, 2, p, testing::normal_vector(g, 6).reshaped(3, 2), Vector::Constant(3, 1.0 / 3.0));
  const Matrix q = Matrix::Constant(3, 2, 1.0 / 6.0);
  const auto ms = ms_objectives(m, q, one_hot_value(testing::normal_vector(g, 3)));
  EXPECT_NEAR(ms.msdtde, ms.msda, 1e-12);
}

TEST(MsObjectives, SingleActionCollapsesAdvantageAndBellman) {
  Gen g(71);
  const TabularMdp m = testing::random_mdp(g, 4, 1);
  const Matrix q = stationary_joint(m, uniform_policy(4, 1));
  const auto ms = ms_objectives(m, q, one_hot_value(testing::normal_vector(g, 4)));
  EXPECT_NEAR(ms.msda, ms.msdbe, 1e-12);
}

TEST(MsObjectives, DifferentialTdErrorHasZeroMean) {
  Gen g(72);
  const SolvedCase c = random_case(g);
  const ValueFunction v = one_hot_value(testing::normal_vector(g, 4));
  const double j = c.q.cwiseProduct(c.model.rewards()).sum();
  EXPECT_NEAR(c.q.cwiseProduct((exact_advantage(c.model, v).array() - j).matrix()).sum(), 0.0, 1e-12);
}

}  // namespace
}  // namespace fdv
