#pragma once

// Generators and reference computations shared by the test suites. Nothing
// here calls into the conjugate machinery, so the oracles stay independent of
// the code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "fdiv/distribution.hpp"
#include "fdiv/divergence.hpp"
#include "fdiv/mdp.hpp"

namespace fdv::testing {

using Gen = std::mt19937_64;

inline double uniform(Gen& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline double log_uniform(Gen& g, double lo, double hi) {
  return std::exp(uniform(g, std::log(lo), std::log(hi)));
}

inline Vector normal_vector(Gen& g, int n, double scale = 1.0) {
  std::normal_distribution<double> z(0.0, scale);
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = z(g);
  return v;
}

/// Flat Dirichlet draw, floored so every entry keeps some mass.
inline DiscreteDistribution random_distribution(Gen& g, int n, double floor = 1e-3) {
  std::exponential_distribution<double> e(1.0);
  Vector w(n);
  for (int i = 0; i < n; ++i) w(i) = e(g) + floor;
  return DiscreteDistribution::normalized(w);
}

/// Values whose pairwise gaps are at least `gap`, shuffled.
inline Vector distinct_values(Gen& g, int n, double gap = 0.05) {
  Vector v = normal_vector(g, n);
  std::vector<double> sorted(v.data(), v.data() + n);
  std::sort(sorted.begin(), sorted.end());
  for (int i = 1; i < n; ++i) sorted[i] = std::max(sorted[i], sorted[i - 1] + gap);
  std::shuffle(sorted.begin(), sorted.end(), g);
  return Eigen::Map<Vector>(sorted.data(), n);
}

/// Dense random transitions, so every full-support policy is irreducible and
/// aperiodic.
inline TabularMdp random_mdp(Gen& g, int ns, int na, double reward_scale = 1.0) {
  Matrix p(ns * na, ns);
  for (int r = 0; r < ns * na; ++r) p.row(r) = random_distribution(g, ns, 0.05).weights().transpose();
  Matrix reward(ns, na);
  for (int s = 0; s < ns; ++s) reward.row(s) = normal_vector(g, na, reward_scale).transpose();
  return TabularMdp(ns, na, p, reward, Vector::Constant(ns, 1.0 / ns));
}

inline Policy random_policy(Gen& g, int ns, int na) {
  Policy pi(ns, na);
  for (int s = 0; s < ns; ++s) pi.row(s) = random_distribution(g, na, 0.05).weights().transpose();
  return pi;
}

/// Two states, one action, deterministic swap; reward r(s).
inline TabularMdp swap_mdp(double r0 = 1.0, double r1 = 0.0) {
  Matrix p(2, 2);
  p << 0, 1, 1, 0;
  Matrix r(2, 1);
  r << r0, r1;
  return TabularMdp(2, 1, p, r, Vector::Constant(2, 0.5));
}

/// Lazy power iteration x <- x (I + P) / 2 from uniform. Slow, but it shares
/// no code with the library's class decomposition.
inline Vector power_stationary(const Matrix& p, double tol = 1e-14, long max_iter = 2000000) {
  const auto n = p.rows();
  Eigen::RowVectorXd x = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
  for (long it = 0; it < max_iter; ++it) {
    Eigen::RowVectorXd next = 0.5 * (x + x * p);
    next /= next.sum();
    const double diff = (next - x).cwiseAbs().sum();
    x = next;
    if (diff <= tol) break;
  }
  return x.transpose();
}

/// sum_s mu(s) pi(a|s) r(s,a) with mu from power iteration.
inline double power_return(const TabularMdp& model, const Policy& pi) {
  Matrix p = Matrix::Zero(model.n_states(), model.n_states());
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) p.row(s) += pi(s, a) * model.transition_row(s, a);
  }
  const Vector mu = power_stationary(p);
  return (mu.asDiagonal() * pi).cwiseProduct(model.rewards()).sum();
}

inline Matrix stationary_joint_oracle(const TabularMdp& model, const Policy& pi) {
  Matrix p = Matrix::Zero(model.n_states(), model.n_states());
  for (int s = 0; s < model.n_states(); ++s) {
    for (int a = 0; a < model.n_actions(); ++a) p.row(s) += pi(s, a) * model.transition_row(s, a);
  }
  return power_stationary(p).asDiagonal() * pi;
}

/// Hand-derived generator and conjugate formulas for the named divergences.
struct ClosedForm {
  double alpha;
  std::function<double(double)> f;
  std::function<double(double)> f_prime;
  std::function<double(double)> fstar;
  std::function<double(double)> fstar_prime;
};

inline std::vector<ClosedForm> closed_forms() {
  return {
      {1.0, [](double x) { return x * std::log(x) - (x - 1.0); }, [](double x) { return std::log(x); },
       [](double y) { return std::exp(y) - 1.0; }, [](double y) { return std::exp(y); }},
      {0.0, [](double x) { return -std::log(x) + (x - 1.0); }, [](double x) { return 1.0 - 1.0 / x; },
       [](double y) { return -std::log(1.0 - y); }, [](double y) { return 1.0 / (1.0 - y); }},
      {2.0, [](double x) { return 0.5 * (x - 1.0) * (x - 1.0); }, [](double x) { return x - 1.0; },
       [](double y) { return 0.5 * (y + 1.0) * (y + 1.0) - 0.5; }, [](double y) { return y + 1.0; }},
      {-1.0, [](double x) { return (x - 1.0) * (x - 1.0) / (2.0 * x); },
       [](double x) { return 0.5 * (1.0 - 1.0 / (x * x)); }, [](double y) { return 1.0 - std::sqrt(1.0 - 2.0 * y); },
       [](double y) { return 1.0 / std::sqrt(1.0 - 2.0 * y); }},
      {0.5, [](double x) { return 2.0 * (std::sqrt(x) - 1.0) * (std::sqrt(x) - 1.0); },
       [](double x) { return 2.0 * (1.0 - 1.0 / std::sqrt(x)); }, [](double y) { return 2.0 * y / (2.0 - y); },
       [](double y) { return 4.0 / ((2.0 - y) * (2.0 - y)); }},
  };
}

/// k-th of n points log-spaced in [lo, hi].
inline double log_spaced(int k, int n, double lo, double hi) {
  return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * k / (n - 1));
}

/// In-domain conjugate argument at distance m from the bound; for KL the
/// point m - 5 stands in.
inline double point_at_margin(const AlphaDivergence& d, double m) {
  const ConjugateDomain dom = d.domain();
  switch (dom.kind) {
    case DomainKind::all_reals:
      return m - 5.0;
    case DomainKind::upper_bounded:
      return dom.bound - m;
    case DomainKind::lower_bounded:
      return dom.bound + m;
  }
  return m;
}

/// Central-difference gradient.
template <class F>
Vector numeric_gradient(F&& f, const Vector& x, double h) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector up = x;
    Vector down = x;
    up(i) += h;
    down(i) -= h;
    g(i) = (f(up) - f(down)) / (2.0 * h);
  }
  return g;
}

}  // namespace fdv::testing
