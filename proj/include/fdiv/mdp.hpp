#pragma once

// Average-reward tabular MDPs and the divergence-penalized dual over
// (theta, lambda, kappa):
//   g = eta sum_{s,a} q(s,a) f*((A_v(s,a) - lambda + kappa(s,a)) / eta) + lambda,
//   A_v(s,a) = r(s,a) + E[v(s')] - v(s),   v = Phi theta.
// The dual is solved over (theta, lambda). For alpha > 1 kappa is minimized out
// pointwise (kappa = max(0, eta b - A + lambda)) which keeps the objective C^1
// and leaves exact zeros at eliminated pairs. For alpha < 1 the arguments are
// held a relative slack away from the singular bound.

#include <algorithm>
#include <cmath>
#include <compare>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "fdiv/bandit.hpp"
#include "fdiv/distribution.hpp"
#include "fdiv/divergence.hpp"
#include "fdiv/dual_solver.hpp"
#include "fdiv/errors.hpp"

namespace fdv {

inline constexpr double kRowTolerance = 1e-12;
inline constexpr double kDomainSlack = 1e-4;

/// Rows are states, columns actions.
using Policy = Matrix;

class TabularMdp {
 public:
  /// transition: (n_states * n_actions) x n_states, row s * n_actions + a.
  TabularMdp(int n_states, int n_actions, Matrix transition, Matrix reward, Vector start)
      : n_states_(n_states),
        n_actions_(n_actions),
        transition_(std::move(transition)),
        reward_(std::move(reward)),
        start_(std::move(start)) {
    if (n_states < 1 || n_actions < 1) throw std::invalid_argument("MDP needs at least one state and action");
    if (transition_.rows() != n_states * n_actions || transition_.cols() != n_states) {
      throw std::invalid_argument("transition tensor has the wrong shape");
    }
    if (reward_.rows() != n_states || reward_.cols() != n_actions || !reward_.allFinite()) {
      throw std::invalid_argument("reward matrix has the wrong shape or non-finite entries");
    }
    for (Eigen::Index r = 0; r < transition_.rows(); ++r) {
      const auto row = transition_.row(r);
      if ((row.array() < 0.0).any() || !row.allFinite() ||
          std::abs(row.sum() - 1.0) > kRowTolerance) {
        throw std::invalid_argument(fmt::format("p(.|s={}, a={}) is not a distribution",
                                                r / n_actions, r % n_actions));
      }
    }
    DiscreteDistribution check(start_);
  }

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  const Matrix& transitions() const { return transition_; }
  const Matrix& rewards() const { return reward_; }
  const Vector& start() const { return start_; }

  auto transition_row(int s, int a) const { return transition_.row(index(s, a)); }
  double reward(int s, int a) const { return reward_(s, a); }
  Eigen::Index index(int s, int a) const {
    if (s < 0 || s >= n_states_ || a < 0 || a >= n_actions_) {
      throw std::out_of_range(fmt::format("state-action ({}, {}) out of range", s, a));
    }
    return static_cast<Eigen::Index>(s) * n_actions_ + a;
  }

 private:
  int n_states_;
  int n_actions_;
  Matrix transition_;
  Matrix reward_;
  Vector start_;
};

inline Policy uniform_policy(int n_states, int n_actions) {
  return Policy::Constant(n_states, n_actions, 1.0 / n_actions);
}

inline void validate_policy(const Policy& pi, const TabularMdp& model) {
  if (pi.rows() != model.n_states() || pi.cols() != model.n_actions()) {
    throw std::invalid_argument("policy shape does not match the model");
  }
  for (Eigen::Index s = 0; s < pi.rows(); ++s) {
    const auto row = pi.row(s);
    if ((row.array() < 0.0).any() || !row.allFinite() ||
        std::abs(row.sum() - 1.0) > kNormalizationTolerance) {
      throw std::invalid_argument(fmt::format("policy row {} is not a distribution", s));
    }
  }
}

/// P_pi(s, s') = sum_a pi(a|s) p(s'|s,a).
inline Matrix state_transition_matrix(const TabularMdp& model, const Policy& pi) {
  validate_policy(pi, model);
  Matrix p = Matrix::Zero(model.n_states(), model.n_states());
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) {
      if (pi(s, a) > 0.0) p.row(s) += pi(s, a) * model.transition_row(s, a);
    }
  }
  return p;
}

/// Strong connectivity of the chain under a policy with full support.
inline bool is_irreducible(const TabularMdp& model) {
  const int n = model.n_states();
  const Matrix p = state_transition_matrix(model, uniform_policy(n, model.n_actions()));
  auto reaches_all = [&](bool forward) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> frontier;
    frontier.push(0);
    seen[0] = 1;
    int count = 1;
    while (!frontier.empty()) {
      const int s = frontier.front();
      frontier.pop();
      for (int t = 0; t < n; ++t) {
        const double w = forward ? p(s, t) : p(t, s);
        if (w > 0.0 && !seen[static_cast<std::size_t>(t)]) {
          seen[static_cast<std::size_t>(t)] = 1;
          ++count;
          frontier.push(t);
        }
      }
    }
    return count == n;
  };
  return reaches_all(true) && reaches_all(false);
}

namespace detail {

/// reach[s][t] is true when t can be reached from s (s reaches itself).
inline std::vector<std::vector<char>> reachability(const Matrix& p) {
  const auto n = static_cast<int>(p.rows());
  std::vector<std::vector<char>> reach(static_cast<std::size_t>(n), std::vector<char>(static_cast<std::size_t>(n), 0));
  for (int s = 0; s < n; ++s) {
    auto& seen = reach[static_cast<std::size_t>(s)];
    std::queue<int> frontier;
    frontier.push(s);
    seen[static_cast<std::size_t>(s)] = 1;
    while (!frontier.empty()) {
      const int u = frontier.front();
      frontier.pop();
      for (int t = 0; t < n; ++t) {
        if (p(u, t) > 0.0 && !seen[static_cast<std::size_t>(t)]) {
          seen[static_cast<std::size_t>(t)] = 1;
          frontier.push(t);
        }
      }
    }
  }
  return reach;
}

/// Stationary distribution of an irreducible sub-chain: solve mu (P - I) = 0
/// with one balance equation swapped for sum(mu) = 1.
inline Vector class_stationary(const Matrix& p_class) {
  const Eigen::Index k = p_class.rows();
  Matrix a = (p_class - Matrix::Identity(k, k)).transpose();
  a.row(k - 1).setOnes();
  Vector rhs = Vector::Zero(k);
  rhs(k - 1) = 1.0;
  Vector mu = a.fullPivLu().solve(rhs);
  mu = mu.cwiseMax(0.0);
  return mu / mu.sum();
}

}  // namespace detail

/// Long-run state distribution of the chain induced by pi, started from the
/// model's start distribution. Closed communicating classes are solved
/// directly; transient mass is split among them by absorption probabilities.
/// For an irreducible chain this is the unique stationary distribution.
inline DiscreteDistribution stationary_distribution(const TabularMdp& model, const Policy& pi) {
  const Matrix p = state_transition_matrix(model, pi);
  const int n = model.n_states();
  const auto reach = detail::reachability(p);
  auto at = [](const auto& m, int i, int j) { return m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; };
  std::vector<int> class_of(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<int>> classes;
  std::vector<int> transient;
  for (int s = 0; s < n; ++s) {
    bool recurrent = true;
    for (int t = 0; t < n && recurrent; ++t) recurrent = !at(reach, s, t) || at(reach, t, s);
    if (!recurrent) {
      transient.push_back(s);
      continue;
    }
    if (class_of[static_cast<std::size_t>(s)] >= 0) continue;
    std::vector<int> members;
    for (int t = 0; t < n; ++t) {
      if (at(reach, s, t)) {
        members.push_back(t);
        class_of[static_cast<std::size_t>(t)] = static_cast<int>(classes.size());
      }
    }
    classes.push_back(std::move(members));
  }

  // Mass entering each class from the start distribution.
  const Vector& start = model.start();
  Vector class_mass = Vector::Zero(static_cast<Eigen::Index>(classes.size()));
  for (int s = 0; s < n; ++s) {
    if (class_of[static_cast<std::size_t>(s)] >= 0) class_mass(class_of[static_cast<std::size_t>(s)]) += start(s);
  }
  if (!transient.empty()) {
    const auto nt = static_cast<Eigen::Index>(transient.size());
    Matrix ptt(nt, nt);
    Matrix exits = Matrix::Zero(nt, class_mass.size());
    Vector start_t(nt);
    for (Eigen::Index i = 0; i < nt; ++i) {
      const int u = transient[static_cast<std::size_t>(i)];
      start_t(i) = start(u);
      for (Eigen::Index j = 0; j < nt; ++j) ptt(i, j) = p(u, transient[static_cast<std::size_t>(j)]);
      for (int t = 0; t < n; ++t) {
        if (class_of[static_cast<std::size_t>(t)] >= 0) exits(i, class_of[static_cast<std::size_t>(t)]) += p(u, t);
      }
    }
    const Vector visits = (Matrix::Identity(nt, nt) - ptt).transpose().fullPivLu().solve(start_t);
    class_mass += exits.transpose() * visits;
  }

  Vector mu = Vector::Zero(n);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& members = classes[c];
    const auto k = static_cast<Eigen::Index>(members.size());
    Matrix pc(k, k);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) pc(i, j) = p(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]);
    }
    const Vector local = detail::class_stationary(pc);
    for (Eigen::Index i = 0; i < k; ++i) mu(members[static_cast<std::size_t>(i)]) = class_mass(static_cast<Eigen::Index>(c)) * local(i);
  }
  mu = mu.cwiseMax(0.0);
  const double total = mu.sum();
  if (!(total > 0.0) || !mu.allFinite()) throw std::runtime_error("stationary distribution: degenerate chain");
  return DiscreteDistribution(mu / total);
}

/// mu(s) pi(a|s) as an n_states x n_actions matrix.
inline Matrix stationary_joint(const TabularMdp& model, const Policy& pi) {
  const Vector mu = stationary_distribution(model, pi).weights();
  return mu.asDiagonal() * pi;
}

inline double expected_return_exact(const TabularMdp& model, const Policy& pi) {
  return stationary_joint(model, pi).cwiseProduct(model.rewards()).sum();
}

struct OptimalSolution {
  double average_reward = 0.0;
  Policy policy;
  Vector bias;
};

/// Relative value iteration on the lazy transform; the greedy policy is then
/// evaluated exactly. Ties pick the lowest action index.
inline OptimalSolution optimal_average_reward(const TabularMdp& model, double tolerance = 1e-12,
                                              long max_iterations = 10000000) {
  const int ns = model.n_states();
  const int na = model.n_actions();
  Vector h = Vector::Zero(ns);
  Vector next(ns);
  Eigen::MatrixXi greedy = Eigen::MatrixXi::Zero(ns, 1);
  auto backup = [&](const Vector& values, Vector& out) {
    for (int s = 0; s < ns; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int a = 0; a < na; ++a) {
        const double q = model.reward(s, a) + 0.5 * values(s) + 0.5 * model.transition_row(s, a).dot(values);
        if (q > best) {
          best = q;
          arg = a;
        }
      }
      out(s) = best;
      greedy(s) = arg;
    }
  };
  bool converged = false;
  for (long it = 0; it < max_iterations; ++it) {
    backup(h, next);
    const Vector diff = next - h;
    const double span = diff.maxCoeff() - diff.minCoeff();
    h = next.array() - next(0);
    if (span <= tolerance * std::max(1.0, h.cwiseAbs().maxCoeff())) {
      converged = true;
      break;
    }
  }
  if (!converged) throw std::runtime_error("relative value iteration did not converge");
  backup(h, next);
  OptimalSolution out;
  out.policy = Policy::Zero(ns, na);
  for (int s = 0; s < ns; ++s) out.policy(s, greedy(s)) = 1.0;
  out.average_reward = expected_return_exact(model, out.policy);
  out.bias = h;
  return out;
}

/// Linear state features phi(s) as the rows of a matrix.
class FeatureMap {
 public:
  FeatureMap() : FeatureMap(Matrix::Identity(1, 1), true) {}
  explicit FeatureMap(Matrix phi, bool one_hot = false) : phi_(std::move(phi)), one_hot_(one_hot) {
    if (phi_.rows() < 1 || phi_.cols() < 1 || !phi_.allFinite()) {
      throw std::invalid_argument("feature matrix must be non-empty and finite");
    }
  }

  static FeatureMap one_hot(int n_states) { return FeatureMap(Matrix::Identity(n_states, n_states), true); }

  int n_states() const { return static_cast<int>(phi_.rows()); }
  int dimension() const { return static_cast<int>(phi_.cols()); }
  bool is_one_hot() const { return one_hot_; }
  const Matrix& matrix() const { return phi_; }
  auto phi(int s) const { return phi_.row(s); }

 private:
  Matrix phi_;
  bool one_hot_;
};

struct ValueFunction {
  Vector theta;
  FeatureMap features;

  static ValueFunction zero(const FeatureMap& features) {
    return {Vector::Zero(features.dimension()), features};
  }
  double operator()(int s) const { return features.phi(s).dot(theta); }
  Vector values() const { return features.matrix() * theta; }
};

struct Transition {
  int s = 0;
  int a = 0;
  int next = 0;
  double reward = 0.0;
};

struct StateAction {
  int s = 0;
  int a = 0;
  auto operator<=>(const StateAction&) const = default;
};

using AdvantageMap = std::map<StateAction, double>;

class TransitionBatch {
 public:
  TransitionBatch(int n_states, int n_actions, std::vector<Transition> samples, Policy source)
      : n_states_(n_states),
        n_actions_(n_actions),
        samples_(std::move(samples)),
        counts_(Eigen::MatrixXi::Zero(n_states, n_actions)),
        source_(std::move(source)) {
    if (source_.rows() != n_states || source_.cols() != n_actions) {
      throw std::invalid_argument("source policy shape does not match the batch");
    }
    for (const auto& t : samples_) {
      if (t.s < 0 || t.s >= n_states || t.a < 0 || t.a >= n_actions || t.next < 0 ||
          t.next >= n_states || !std::isfinite(t.reward)) {
        throw std::invalid_argument("transition out of range");
      }
      if (!(source_(t.s, t.a) > 0.0)) {
        throw std::invalid_argument(
            fmt::format("sample at ({}, {}) has zero probability under the source policy", t.s, t.a));
      }
      ++counts_(t.s, t.a);
    }
  }

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  std::size_t size() const { return samples_.size(); }
  const std::vector<Transition>& samples() const { return samples_; }
  const Eigen::MatrixXi& counts() const { return counts_; }
  const Policy& source_policy() const { return source_; }

 private:
  int n_states_;
  int n_actions_;
  std::vector<Transition> samples_;
  Eigen::MatrixXi counts_;
  Policy source_;
};

inline AdvantageMap estimate_advantages(const TransitionBatch& batch, const ValueFunction& v) {
  if (batch.size() == 0) throw std::invalid_argument("estimate_advantages: empty batch");
  const Vector values = v.values();
  AdvantageMap sums;
  for (const auto& t : batch.samples()) {
    sums[{t.s, t.a}] += t.reward + values(t.next) - values(t.s);
  }
  for (auto& [sa, total] : sums) total /= batch.counts()(sa.s, sa.a);
  return sums;
}

inline Matrix exact_advantage(const TabularMdp& model, const ValueFunction& v) {
  const Vector values = v.values();
  Matrix adv(model.n_states(), model.n_actions());
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) {
      adv(s, a) = model.reward(s, a) + model.transition_row(s, a).dot(values) - values(s);
    }
  }
  return adv;
}

/// The dual restricted to pairs with positive weight. Advantages are affine
/// in theta: A(theta) = reward + diff * theta.
struct MdpDualProblem {
  int n_states = 0;
  int n_actions = 0;
  std::vector<StateAction> pairs;
  Vector weight;
  Vector reward;
  Matrix diff;
  FeatureMap features = FeatureMap::one_hot(1);

  Vector advantages(const Vector& theta) const { return reward + diff * theta; }
};

/// Sample version: q = n(s,a) / N and empirical means of r and phi(s') - phi(s).
inline MdpDualProblem make_dual_problem(const TransitionBatch& batch, const FeatureMap& features) {
  if (batch.size() == 0) throw std::invalid_argument("dual problem: empty batch");
  if (features.n_states() != batch.n_states()) throw std::invalid_argument("feature map size mismatch");
  MdpDualProblem p;
  p.n_states = batch.n_states();
  p.n_actions = batch.n_actions();
  p.features = features;
  std::map<StateAction, Eigen::Index> slot;
  for (int s = 0; s < batch.n_states(); ++s) {
    for (int a = 0; a < batch.n_actions(); ++a) {
      if (batch.counts()(s, a) > 0) {
        slot[{s, a}] = static_cast<Eigen::Index>(p.pairs.size());
        p.pairs.push_back({s, a});
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(p.pairs.size());
  p.weight = Vector::Zero(n);
  p.reward = Vector::Zero(n);
  p.diff = Matrix::Zero(n, features.dimension());
  for (const auto& t : batch.samples()) {
    const Eigen::Index i = slot.at({t.s, t.a});
    p.reward(i) += t.reward;
    p.diff.row(i) += features.phi(t.next) - features.phi(t.s);
  }
  const double total = static_cast<double>(batch.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double c = batch.counts()(p.pairs[i].s, p.pairs[i].a);
    p.weight(i) = c / total;
    p.reward(i) /= c;
    p.diff.row(i) /= c;
  }
  return p;
}

/// Exact version over the joint q(s,a) with model expectations.
inline MdpDualProblem make_dual_problem(const TabularMdp& model, const Matrix& q,
                                        const FeatureMap& features) {
  if (q.rows() != model.n_states() || q.cols() != model.n_actions()) {
    throw std::invalid_argument("joint distribution shape does not match the model");
  }
  if ((q.array() < 0.0).any() || std::abs(q.sum() - 1.0) > kNormalizationTolerance) {
    throw std::invalid_argument("q is not a joint distribution");
  }
  if (features.n_states() != model.n_states()) throw std::invalid_argument("feature map size mismatch");
  MdpDualProblem p;
  p.n_states = model.n_states();
  p.n_actions = model.n_actions();
  p.features = features;
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) {
      if (q(s, a) > 0.0) p.pairs.push_back({s, a});
    }
  }
  const auto n = static_cast<Eigen::Index>(p.pairs.size());
  p.weight.resize(n);
  p.reward.resize(n);
  p.diff.resize(n, features.dimension());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [s, a] = p.pairs[static_cast<std::size_t>(i)];
    p.weight(i) = q(s, a);
    p.reward(i) = model.reward(s, a);
    p.diff.row(i) = model.transition_row(s, a) * features.matrix() - features.phi(s);
  }
  return p;
}

struct MdpDualSolution {
  ValueFunction value;
  double lambda = 0.0;
  /// n_states x n_actions; zero off the visited pairs.
  Matrix kappa;
  double dual_value = 0.0;
  SolverReport report;
};

/// g(theta, lambda, kappa) and its gradient ordered (theta, lambda, kappa over
/// problem.pairs); the kappa block is present only when the domain is closed
/// (alpha > 1).
template <Divergence D>
std::pair<double, Vector> mdp_dual_objective(const MdpDualProblem& problem, const D& d, double eta,
                                             const Vector& theta, double lambda, const Matrix& kappa) {
  const ConjugateDomain dom = d.domain();
  const bool with_kappa = dom.closed;
  const Eigen::Index m = theta.size();
  const auto n = static_cast<Eigen::Index>(problem.pairs.size());
  if (m != problem.features.dimension()) throw std::invalid_argument("theta dimension mismatch");
  if (kappa.rows() != problem.n_states || kappa.cols() != problem.n_actions) {
    throw std::invalid_argument("kappa shape mismatch");
  }
  const Vector adv = problem.advantages(theta);
  Vector grad = Vector::Zero(m + 1 + (with_kappa ? n : 0));
  double value = lambda;
  grad(m) = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [s, a] = problem.pairs[static_cast<std::size_t>(i)];
    const double k = kappa(s, a);
    if (k < 0.0) throw DomainError(fmt::format("kappa({}, {}) is negative", s, a));
    if (k != 0.0 && !with_kappa) {
      throw DomainError(fmt::format("kappa({}, {}) must be zero for this divergence", s, a));
    }
    const double y = (adv(i) - lambda + k) / eta;
    if (!dom.contains(y)) {
      throw DomainError(fmt::format("pair ({}, {}): conjugate argument {} outside the domain", s, a, y));
    }
    const ConjugatePoint p{y, dom.margin(y)};
    const double h = conjugate_prime_at(d, p);
    const double w = problem.weight(i);
    value += eta * w * conjugate_at(d, p);
    grad.head(m) += w * h * problem.diff.row(i).transpose();
    grad(m) -= w * h;
    if (with_kappa) grad(m + 1 + i) = w * h;
  }
  return {value, grad};
}

template <Divergence D>
std::pair<double, Vector> mdp_dual_objective(const TransitionBatch& batch, const D& d, double eta,
                                             const ValueFunction& v, double lambda, const Matrix& kappa) {
  return mdp_dual_objective(make_dual_problem(batch, v.features), d, eta, v.theta, lambda, kappa);
}

template <Divergence D>
std::pair<double, Vector> mdp_dual_objective(const TabularMdp& model, const Matrix& q, const D& d,
                                             double eta, const ValueFunction& v, double lambda,
                                             const Matrix& kappa) {
  return mdp_dual_objective(make_dual_problem(model, q, v.features), d, eta, v.theta, lambda, kappa);
}

struct MdpSolveOptions {
  SolverTolerances tolerances{};
  /// Accept an unconverged solve whose gradient norm is below this. The
  /// lambda component is the normalization residual of the recovered joint,
  /// which the policy update renormalizes away; for large alpha the kernel
  /// base^(1/(alpha-1)) cannot resolve small ratios in double precision.
  double accept_tol = 1e-3;
  double slack = kDomainSlack;
  /// Initial theta (full dimension); zeros when absent.
  std::optional<Vector> warm_start;
  /// Weight of the gauge-fixing ridge term for non-one-hot features.
  double ridge = 1e-9;
};

namespace detail {

/// Decision vector layout: free theta coordinates followed by lambda. One-hot
/// features pin theta(0) = 0 to remove the constant-shift degeneracy.
struct DualLayout {
  Eigen::Index dim = 0;
  bool pinned = false;

  Eigen::Index free_count() const { return pinned ? dim - 1 : dim; }
  Eigen::Index lambda_index() const { return free_count(); }

  Vector theta(const Vector& x) const {
    Vector t = Vector::Zero(dim);
    t.tail(free_count()) = x.head(free_count());
    return t;
  }
  Vector pack(const Vector& theta, double lambda) const {
    Vector x(free_count() + 1);
    x.head(free_count()) = pinned ? Vector(theta.tail(dim - 1).array() - theta(0)) : theta;
    x(free_count()) = lambda;
    return x;
  }
};

/// Dual over (theta, lambda), plus one kappa per pair when explicit_kappa is
/// set. Without explicit kappa it is minimized out pointwise, which leaves a
/// C^1 objective whose curvature is unbounded where a pair gets eliminated;
/// the Newton solve therefore keeps kappa explicit on closed domains.
template <Divergence D>
struct ReducedDual {
  const MdpDualProblem& problem;
  const D& d;
  double eta;
  DualLayout layout;
  Matrix diff_free;
  double ridge;
  ConjugateDomain dom;
  bool explicit_kappa = false;

  ReducedDual(const MdpDualProblem& p, const D& div, double eta_, DualLayout l, double ridge_)
      : problem(p), d(div), eta(eta_), layout(l), ridge(ridge_), dom(div.domain()) {
    diff_free = layout.pinned ? Matrix(p.diff.rightCols(l.dim - 1)) : p.diff;
  }

  ConjugatePoint point(double y) const {
    if (dom.kind == DomainKind::lower_bounded && !(y > dom.bound)) return {dom.bound, 0.0};
    return {y, dom.margin(y)};
  }

  /// Value without the ridge term; kappa written when requested.
  double evaluate(const Vector& x, Vector* grad, Vector* kappa = nullptr, Matrix* hess = nullptr) const {
    const Eigen::Index nf = layout.free_count();
    const double lambda = x(nf);
    const Vector adv = problem.reward + diff_free * x.head(nf);
    const auto n = adv.size();
    const Eigen::Index nk = explicit_kappa ? n : 0;
    Vector weights_h(n);
    Vector curvature = Vector::Zero(n);
    double value = lambda;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = (adv(i) - lambda + (explicit_kappa ? x(nf + 1 + i) : 0.0)) / eta;
      if (!std::isfinite(y)) return std::numeric_limits<double>::infinity();
      if (explicit_kappa && !(y >= dom.bound)) return std::numeric_limits<double>::infinity();
      if (dom.kind == DomainKind::upper_bounded && !(dom.margin(y) > 0.0)) {
        return std::numeric_limits<double>::infinity();
      }
      const ConjugatePoint p = point(y);
      double fstar;
      double h;
      try {
        fstar = conjugate_at(d, p);
        h = conjugate_prime_at(d, p);
      } catch (const OverflowError&) {
        return std::numeric_limits<double>::infinity();
      }
      const double w = problem.weight(i);
      value += eta * w * fstar;
      weights_h(i) = w * h;
      if (hess != nullptr && (p.margin > 0.0 || dom.kind == DomainKind::all_reals)) {
        try {
          curvature(i) = w * conjugate_second_at(d, p) / eta;
        } catch (const OverflowError&) {
          return std::numeric_limits<double>::infinity();
        }
      }
      if (kappa != nullptr) (*kappa)(i) = dom.kind == DomainKind::lower_bounded && y < dom.bound
                                             ? eta * (dom.bound - y)
                                             : 0.0;
    }
    if (grad != nullptr) {
      grad->resize(nf + 1 + nk);
      grad->head(nf) = diff_free.transpose() * weights_h;
      (*grad)(nf) = 1.0 - weights_h.sum();
      grad->tail(nk) = weights_h.head(nk);
    }
    if (hess != nullptr) {
      Matrix z = Matrix::Zero(n, nf + 1 + nk);
      z.leftCols(nf) = diff_free;
      z.col(nf).setConstant(-1.0);
      z.rightCols(nk).diagonal().setOnes();
      *hess = z.transpose() * curvature.asDiagonal() * z;
    }
    return value;
  }

  /// Objective for minimize_newton, ridge included.
  double operator()(const Vector& x, Vector* grad, Matrix* hess) const {
    double value = evaluate(x, grad, nullptr, hess);
    if (!std::isfinite(value) || layout.pinned || !(ridge > 0.0)) return value;
    const Eigen::Index nf = layout.free_count();
    value += ridge * x.head(nf).squaredNorm();
    if (grad != nullptr) grad->head(nf) += 2.0 * ridge * x.head(nf);
    if (hess != nullptr) hess->diagonal().head(nf).array() += 2.0 * ridge;
    return value;
  }

  double operator()(const Vector& x, Vector& grad) const {
    double value = evaluate(x, &grad);
    if (!std::isfinite(value)) return value;
    if (!layout.pinned && ridge > 0.0) {
      const Vector theta = x.head(layout.free_count());
      value += ridge * theta.squaredNorm();
      grad.head(layout.free_count()) += 2.0 * ridge * theta;
    }
    return value;
  }
};

}  // namespace detail

template <Divergence D>
MdpDualSolution solve_mdp_dual(const MdpDualProblem& problem, const D& d, double eta,
                               const MdpSolveOptions& options = {}) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("eta must be positive and finite");
  if (problem.pairs.empty()) throw std::invalid_argument("dual problem has no pairs");
  detail::DualLayout layout{problem.features.dimension(), problem.features.is_one_hot()};
  detail::ReducedDual<D> dual(problem, d, eta, layout, options.ridge);
  const ConjugateDomain dom = d.domain();

  Vector theta0 = options.warm_start.value_or(Vector::Zero(layout.dim));
  if (theta0.size() != layout.dim) throw std::invalid_argument("warm start has the wrong dimension");
  if (layout.pinned) theta0.array() -= theta0(0);
  const Vector adv0 = problem.advantages(theta0);
  const double lambda0 = detail::solve_baseline(problem.weight, adv0, eta, d).lambda;

  FeasibleSet feasible;
  if (dom.kind == DomainKind::upper_bounded) {
    // (A_i(theta) - lambda) / eta <= b (1 - slack), repaired by raising lambda.
    const Eigen::Index nf = layout.free_count();
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(problem.pairs.size()); ++i) {
      Halfspace h;
      for (Eigen::Index j = 0; j < nf; ++j) {
        const double c = dual.diff_free(i, j);
        if (c != 0.0) h.terms.emplace_back(j, c / eta);
      }
      h.terms.emplace_back(nf, -1.0 / eta);
      h.offset = problem.reward(i) / eta;
      h.sense = Sense::at_most;
      h.bound = dom.bound * (1.0 - options.slack);
      h.repair_index = nf;
      feasible.halfspaces.push_back(std::move(h));
    }
  }
  // Start strictly inside: repair against constraints tightened by another slack.
  FeasibleSet inner = feasible;
  for (auto& h : inner.halfspaces) h.bound = dom.bound * (1.0 - 2.0 * options.slack);
  Vector x0 = project_feasible(layout.pack(theta0, lambda0), inner);
  if (dom.closed) {
    // kappa >= 0 and (A_i(theta) - lambda + kappa_i) / eta >= bound.
    dual.explicit_kappa = true;
    const Eigen::Index nf = layout.free_count();
    const auto n = static_cast<Eigen::Index>(problem.pairs.size());
    const Vector adv = problem.reward + dual.diff_free * x0.head(nf);
    const double lambda_start = x0(nf);
    Vector start(nf + 1 + n);
    start.head(nf + 1) = x0;
    for (Eigen::Index i = 0; i < n; ++i) {
      start(nf + 1 + i) =
          std::max(0.0, eta * dom.bound - (adv(i) - lambda_start)) + 0.1 * eta * std::abs(dom.bound);
      feasible.nonneg_indices.push_back(nf + 1 + i);
      Halfspace h;
      for (Eigen::Index j = 0; j < nf; ++j) {
        const double c = dual.diff_free(i, j);
        if (c != 0.0) h.terms.emplace_back(j, c / eta);
      }
      h.terms.emplace_back(nf, -1.0 / eta);
      h.terms.emplace_back(nf + 1 + i, 1.0 / eta);
      h.offset = problem.reward(i) / eta;
      h.sense = Sense::at_least;
      h.bound = dom.bound;
      h.repair_index = nf + 1 + i;
      feasible.halfspaces.push_back(std::move(h));
    }
    x0 = std::move(start);
  }

  auto [x, report] = minimize_newton(dual, feasible, x0, options.tolerances);
  if (dual.explicit_kappa) {
    // Back to (theta, lambda) with kappa minimized out, then polish there;
    // optimality is judged on that reduced gradient.
    x.conservativeResize(layout.free_count() + 1);
    dual.explicit_kappa = false;
    SolverTolerances polish_tol = options.tolerances;
    polish_tol.max_iter = std::max(0, options.tolerances.max_iter - report.iterations);
    auto [polished, polish] = minimize_newton(dual, FeasibleSet{}, x, polish_tol);
    x = std::move(polished);
    polish.iterations += report.iterations;
    report = polish;
  }
  if (!report.converged && !(report.final_gradient_norm <= options.accept_tol)) {
    throw SolverError(fmt::format("MDP dual did not converge: gradient norm {} after {} iterations",
                                  report.final_gradient_norm, report.iterations),
                      report);
  }

  MdpDualSolution sol;
  const auto n = static_cast<Eigen::Index>(problem.pairs.size());
  Vector kappa_pairs = Vector::Zero(n);
  sol.dual_value = dual.evaluate(x, nullptr, &kappa_pairs);
  sol.value = {layout.theta(x), problem.features};
  sol.lambda = x(layout.lambda_index());
  sol.kappa = Matrix::Zero(problem.n_states, problem.n_actions);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [s, a] = problem.pairs[static_cast<std::size_t>(i)];
    sol.kappa(s, a) = kappa_pairs(i);
  }
  sol.report = report;
  return sol;
}

template <Divergence D>
MdpDualSolution solve_mdp_dual(const TransitionBatch& batch, const D& d, double eta,
                               const FeatureMap& features, const MdpSolveOptions& options = {}) {
  return solve_mdp_dual(make_dual_problem(batch, features), d, eta, options);
}

namespace detail {

/// With `degenerate` set, states whose every action is eliminated keep their
/// pi_k row and are listed there instead of raising.
template <Divergence D, class AdvantageAt>
Policy reweight_policy(const Policy& pi_k, const MdpDualSolution& sol, const D& d, double eta,
                       AdvantageAt&& advantage_at, std::vector<int>* degenerate = nullptr) {
  const ConjugateDomain dom = d.domain();
  Policy next = Policy::Zero(pi_k.rows(), pi_k.cols());
  for (Eigen::Index s = 0; s < pi_k.rows(); ++s) {
    for (Eigen::Index a = 0; a < pi_k.cols(); ++a) {
      if (pi_k(s, a) == 0.0) continue;
      const double kappa = sol.kappa.size() == 0 ? 0.0 : sol.kappa(s, a);
      if (kappa > 0.0 && dom.closed) continue;  // complementary slackness
      const std::optional<double> adv = advantage_at(static_cast<int>(s), static_cast<int>(a));
      const double y = (adv.value_or(sol.lambda) - sol.lambda + kappa) / eta;
      if (!dom.contains(y)) {
        throw DomainError(fmt::format("pair ({}, {}): conjugate argument {} outside the domain", s, a, y));
      }
      const ConjugatePoint p = dom.kind == DomainKind::lower_bounded && y == dom.bound
                                   ? ConjugatePoint{dom.bound, 0.0}
                                   : ConjugatePoint{y, dom.margin(y)};
      next(s, a) = pi_k(s, a) * conjugate_prime_at(d, p);
    }
    const double total = next.row(s).sum();
    if (total == 0.0 && degenerate != nullptr) {
      next.row(s) = pi_k.row(s);
      degenerate->push_back(static_cast<int>(s));
      continue;
    }
    if (!(total > 0.0) || !std::isfinite(total)) {
      throw DomainError(fmt::format("state {}: improved policy has no mass ({})", s, total));
    }
    next.row(s) /= total;
  }
  return next;
}

}  // namespace detail

/// Sample-based improvement; unvisited pairs use the baseline as their advantage.
template <Divergence D>
Policy improve_mdp_policy(const Policy& pi_k, const AdvantageMap& advantages, const MdpDualSolution& sol,
                          const D& d, double eta, std::vector<int>* degenerate = nullptr) {
  return detail::reweight_policy(
      pi_k, sol, d, eta,
      [&](int s, int a) -> std::optional<double> {
        const auto it = advantages.find({s, a});
        if (it == advantages.end()) return std::nullopt;
        return it->second;
      },
      degenerate);
}

/// Exact-model improvement from a full advantage matrix.
template <Divergence D>
Policy improve_mdp_policy(const Policy& pi_k, const Matrix& advantages, const MdpDualSolution& sol,
                          const D& d, double eta) {
  if (advantages.rows() != pi_k.rows() || advantages.cols() != pi_k.cols()) {
    throw std::invalid_argument("advantage matrix shape mismatch");
  }
  return detail::reweight_policy(pi_k, sol, d, eta,
                                 [&](int s, int a) -> std::optional<double> { return advantages(s, a); });
}

struct ExactDualResult {
  /// mu*(s) pi*(a|s) recovered from the dual solution.
  Matrix joint;
  MdpDualSolution solution;
};

template <Divergence D>
ExactDualResult exact_dual_oracle(const TabularMdp& model, const Matrix& q, const D& d, double eta,
                                  std::optional<FeatureMap> features = std::nullopt,
                                  MdpSolveOptions options = {}) {
  if (model.n_states() * model.n_actions() > 200) {
    throw std::invalid_argument("exact_dual_oracle is limited to 200 state-action pairs");
  }
  const FeatureMap phi = features.value_or(FeatureMap::one_hot(model.n_states()));
  options.tolerances.grad_tol = std::min(options.tolerances.grad_tol, 1e-10);
  options.tolerances.max_iter = std::max(options.tolerances.max_iter, 200000);
  const MdpDualProblem problem = make_dual_problem(model, q, phi);
  ExactDualResult out{Matrix::Zero(model.n_states(), model.n_actions()),
                      solve_mdp_dual(problem, d, eta, options)};
  const Vector adv = problem.advantages(out.solution.value.theta);
  const ConjugateDomain dom = d.domain();
  for (std::size_t i = 0; i < problem.pairs.size(); ++i) {
    const auto [s, a] = problem.pairs[i];
    const auto idx = static_cast<Eigen::Index>(i);
    const double kappa = out.solution.kappa(s, a);
    if (kappa > 0.0 && dom.closed) continue;
    const double y = (adv(idx) - out.solution.lambda) / eta;
    out.joint(s, a) = q(s, a) * conjugate_prime_at(d, ConjugatePoint{y, dom.margin(y)});
  }
  return out;
}

/// sum_{s'} | sum_a rho(s',a) - sum_{s,a} rho(s,a) p(s'|s,a) |.
inline double stationarity_residual(const TabularMdp& model, const Matrix& joint) {
  Vector inflow = Vector::Zero(model.n_states());
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) {
      inflow += joint(s, a) * model.transition_row(s, a).transpose();
    }
  }
  return (joint.rowwise().sum() - inflow).lpNorm<1>();
}

struct MeanSquaredObjectives {
  double msdtde = 0.0;
  double msda = 0.0;
  double msdbe = 0.0;
};

/// Differential TD error, advantage and Bellman error, squared and averaged
/// under q, with the reward offset r_bar = sum q r.
inline MeanSquaredObjectives ms_objectives(const TabularMdp& model, const Matrix& q, const ValueFunction& v) {
  if (q.rows() != model.n_states() || q.cols() != model.n_actions()) {
    throw std::invalid_argument("joint distribution shape does not match the model");
  }
  const Vector values = v.values();
  const double r_bar = q.cwiseProduct(model.rewards()).sum();
  MeanSquaredObjectives out;
  for (int s = 0; s < model.n_states(); ++s) {
    const double mu = q.row(s).sum();
    double bellman = 0.0;
    for (int a = 0; a < model.n_actions(); ++a) {
      const auto row = model.transition_row(s, a);
      double mean = 0.0;
      double second = 0.0;
      for (int t = 0; t < model.n_states(); ++t) {
        const double delta = model.reward(s, a) - r_bar + values(t) - values(s);
        mean += row(t) * delta;
        second += row(t) * delta * delta;
      }
      out.msdtde += q(s, a) * second;
      out.msda += q(s, a) * mean * mean;
      bellman += q(s, a) * mean;
    }
    if (mu > 0.0) out.msdbe += bellman * bellman / mu;
  }
  return out;
}

}  // namespace fdv
