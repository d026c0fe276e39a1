#pragma once

// Divergence-penalized policy improvement for K-armed bandits.
//
// The dual is one-dimensional once the kappa multipliers are minimized out
// in closed form: kappa(a) = max(0, eta * b - Q(a) + lambda) for alpha > 1 and
// zero otherwise. What remains is the scalar equation
//   sum_a q(a) (f*)'((Q(a) - lambda + kappa(a)) / eta) = 1,
// monotone in lambda and solved by bracketing. For alpha < 1 the unknown is
// the best arm's distance to the singular domain bound, which for strongly
// negative alpha is far below double resolution in lambda itself. For
// alpha > 1 the same holds for the margin of the weakest surviving arm.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include <boost/math/tools/toms748_solve.hpp>
#include <fmt/format.h>

#include "fdiv/distribution.hpp"
#include "fdiv/divergence.hpp"
#include "fdiv/dual_solver.hpp"
#include "fdiv/errors.hpp"

namespace fdv {

/// Normalization residual above which an improved policy is rejected.
inline constexpr double kNormalizationFailure = 1e-3;

template <Divergence D = AlphaDivergence>
struct BanditInstance {
  DiscreteDistribution q;
  Vector values;
  double eta;
  D divergence;

  BanditInstance(DiscreteDistribution q_, Vector values_, double eta_, D divergence_)
      : q(std::move(q_)), values(std::move(values_)), eta(eta_), divergence(std::move(divergence_)) {
    if (static_cast<std::size_t>(values.size()) != q.size()) {
      throw std::invalid_argument(
          fmt::format("q has {} arms but Q has {}", q.size(), values.size()));
    }
    if (!(eta > 0.0) || !std::isfinite(eta)) {
      throw std::invalid_argument(fmt::format("eta must be positive and finite, got {}", eta));
    }
    if (!values.allFinite()) throw std::invalid_argument("Q contains non-finite values");
  }

  std::size_t arms() const { return q.size(); }
};

struct BanditDualSolution {
  double lambda = 0.0;
  Vector kappa;
  double dual_value = 0.0;
  SolverReport report;
  /// Conjugate arguments at the optimum with full-precision margins. Empty
  /// when the solution was assembled by hand; improve_policy then recomputes
  /// them from lambda and kappa.
  std::vector<ConjugatePoint> arguments;
  /// sum_a q(a) (f*)'(y_a) - 1 before renormalization.
  double normalization_residual = 0.0;
};

inline Vector advantage(const DiscreteDistribution& q, const Vector& values) {
  if (static_cast<std::size_t>(values.size()) != q.size()) {
    throw std::invalid_argument("advantage: length mismatch");
  }
  return values.array() - q.expectation(values);
}

inline double eta_min(const DiscreteDistribution& q, const Vector& values) {
  return std::abs(advantage(q, values).minCoeff());
}

namespace detail {

template <Divergence D>
ConjugatePoint point_from_y(const D& d, double y) {
  return {y, d.domain().margin(y)};
}

/// Result of the scalar baseline equation over a weighted set of values.
struct BaselineRoot {
  double lambda = 0.0;
  std::vector<ConjugatePoint> points;  // per index; zero-weight entries hold y = 0
  Vector kappa;
  double residual = 0.0;
  int iterations = 0;
};

inline constexpr double kHuge = 1e300;

/// Closed lower-bounded domains. With lambda = vmax + eta t, entry i keeps
/// mass while t < t_i = -bound - gap_i. Between consecutive t_i the unknown is
/// the margin m of the next entry to be eliminated, and every other margin is
/// a difference of gaps plus m. Solving for log m keeps the relative precision
/// of that smallest margin, which for large alpha decides probabilities far
/// below the resolution of lambda itself.
template <Divergence D>
BaselineRoot solve_baseline_closed(const Vector& weights, const Vector& values, double eta, const D& d) {
  const Eigen::Index n = weights.size();
  const ConjugateDomain dom = d.domain();
  double vmax = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights(i) > 0.0) vmax = std::max(vmax, values(i));
  }
  if (!std::isfinite(vmax)) throw std::invalid_argument("baseline: no positive weight");
  const Vector gap = (vmax - values.array()) / eta;

  std::vector<double> breaks;  // gaps, largest first: increasing t
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights(i) > 0.0) breaks.push_back(gap(i));
  }
  std::sort(breaks.begin(), breaks.end(), std::greater<>());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  std::vector<ConjugatePoint> points(static_cast<std::size_t>(n));
  auto margin_of = [&](Eigen::Index i, double break_gap, double m) { return (break_gap - gap(i)) + m; };
  auto phi = [&](double break_gap, double m) {
    double total = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& p = points[static_cast<std::size_t>(i)];
      if (!(weights(i) > 0.0)) {
        p = {0.0, dom.margin(0.0)};
        continue;
      }
      const double margin = margin_of(i, break_gap, m);
      p = margin > 0.0 ? ConjugatePoint{dom.bound + margin, margin} : ConjugatePoint{dom.bound, 0.0};
      try {
        total += weights(i) * conjugate_prime_at(d, p);
      } catch (const OverflowError&) {
        return kHuge;
      }
      if (!(total < kHuge)) return kHuge;
    }
    return total;
  };

  // The last break (the best entry) leaves nothing, so phi = -1 there.
  std::size_t k = 0;
  double f_break = phi(breaks[0], 0.0);
  while (f_break > 0.0 && k + 1 < breaks.size()) f_break = phi(breaks[++k], 0.0);
  const double g_k = breaks[k];

  BaselineRoot out;
  double m = 0.0;
  if (f_break < 0.0) {
    auto in_log = [&](double u) { return phi(g_k, std::exp(u)); };
    const double lo = std::log(1e-300);
    double hi;
    double f_hi;
    if (k > 0) {
      hi = std::log(breaks[k - 1] - g_k);
      f_hi = in_log(hi);
    } else {
      hi = 0.0;
      f_hi = in_log(hi);
      for (int expansions = 0; f_hi <= 0.0 && expansions < 60; ++expansions) {
        hi += std::max(1.0, std::abs(hi));
        f_hi = in_log(hi);
      }
    }
    const double f_lo = in_log(lo);
    double u;
    if (f_lo >= 0.0) {
      u = lo;  // root below the floor; the residual records the excess
    } else if (f_hi <= 0.0) {
      u = hi;
    } else {
      std::uintmax_t max_iter = 300;
      auto tol = [](double a, double b) {
        return std::abs(a - b) <= 4.0 * std::numeric_limits<double>::epsilon() *
                                      std::max({1.0, std::abs(a), std::abs(b)});
      };
      const auto [a, b] = boost::math::tools::toms748_solve(in_log, lo, hi, f_lo, f_hi, tol, max_iter);
      u = std::abs(in_log(a)) <= std::abs(in_log(b)) ? a : b;
      out.iterations = static_cast<int>(max_iter);
    }
    m = std::exp(u);
  }
  out.residual = phi(g_k, m);
  out.points = points;
  out.lambda = vmax + eta * (-dom.bound - g_k - m);
  out.kappa = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(weights(i) > 0.0)) continue;
    const double margin = margin_of(i, g_k, m);
    if (margin < 0.0) out.kappa(i) = -eta * margin;
  }
  return out;
}

/// Solves sum_i w_i (f*)'((v_i - lambda + kappa_i) / eta) = 1 for lambda with
/// kappa eliminated. Entries with w_i == 0 are ignored.
template <Divergence D>
BaselineRoot solve_baseline(const Vector& weights, const Vector& values, double eta, const D& d) {
  if (d.domain().kind == DomainKind::lower_bounded && d.domain().closed) {
    return solve_baseline_closed(weights, values, eta, d);
  }
  const Eigen::Index n = weights.size();
  double vmax = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (weights(i) > 0.0) vmax = std::max(vmax, values(i));
  }
  if (!std::isfinite(vmax)) throw std::invalid_argument("baseline: no positive weight");

  const ConjugateDomain dom = d.domain();
  // gap_i = (vmax - v_i) / eta >= 0, exact zero for the best entries.
  Vector gap = (vmax - values.array()) / eta;
  std::vector<ConjugatePoint> points(static_cast<std::size_t>(n));

  // Parametrization t: all_reals / lower_bounded use lambda = vmax + eta t;
  // upper_bounded uses t = log m with m the best entry's margin, so that
  // margin_i = gap_i + m and lambda = vmax - eta (b - m).
  auto fill = [&](double t) {
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& p = points[static_cast<std::size_t>(i)];
      if (!(weights(i) > 0.0)) {
        p = {0.0, dom.margin(0.0)};
        continue;
      }
      switch (dom.kind) {
        case DomainKind::all_reals:
          p = {-gap(i) - t, std::numeric_limits<double>::infinity()};
          break;
        case DomainKind::upper_bounded: {
          const double margin = gap(i) + std::exp(t);
          p = {dom.bound - margin, margin};
          break;
        }
        case DomainKind::lower_bounded: {
          const double y = -gap(i) - t;
          const double margin = y - dom.bound;
          p = margin > 0.0 ? ConjugatePoint{y, margin} : ConjugatePoint{dom.bound, 0.0};
          break;
        }
      }
    }
  };
  auto phi = [&](double t) {
    fill(t);
    double total = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(weights(i) > 0.0)) continue;
      try {
        total += weights(i) * conjugate_prime_at(d, points[static_cast<std::size_t>(i)]);
      } catch (const OverflowError&) {
        return kHuge;
      }
      if (!(total < kHuge)) return kHuge;
    }
    return total;
  };

  // phi is decreasing in t. The upper end makes every argument nonpositive,
  // so (f*)' <= (f*)'(0) = 1 there and phi(hi) <= 0.
  double hi = 0.0;
  double lo = -1.0;
  double t_floor = -std::numeric_limits<double>::infinity();
  if (dom.kind == DomainKind::upper_bounded) {
    hi = std::log(dom.bound);
    lo = hi - 1.0;
    t_floor = std::log(1e-300);
  }
  double f_hi = phi(hi);
  double f_lo = phi(lo);
  int expansions = 0;
  while (f_lo <= 0.0 && lo > t_floor && expansions < 2100) {
    const double width = hi - lo;
    lo = std::max(hi - 2.0 * width, t_floor);
    f_lo = phi(lo);
    ++expansions;
  }

  BaselineRoot out;
  double root;
  if (f_hi >= 0.0) {
    root = hi;
  } else if (f_lo <= 0.0) {
    root = lo;  // bracket floor reached; the residual records the shortfall
  } else {
    std::uintmax_t max_iter = 300;
    auto tol = [](double a, double b) {
      return std::abs(a - b) <= 4.0 * std::numeric_limits<double>::epsilon() *
                                    std::max({1.0, std::abs(a), std::abs(b)});
    };
    const auto [a, b] = boost::math::tools::toms748_solve(phi, lo, hi, f_lo, f_hi, tol, max_iter);
    const double fa = phi(a);
    const double fb = phi(b);
    root = std::abs(fa) <= std::abs(fb) ? a : b;
    out.iterations = static_cast<int>(max_iter);
  }
  out.residual = phi(root);
  out.points = points;

  out.kappa = Vector::Zero(n);
  if (dom.kind == DomainKind::upper_bounded) {
    out.lambda = vmax - eta * (dom.bound - std::exp(root));
  } else {
    out.lambda = vmax + eta * root;
  }
  if (dom.kind == DomainKind::lower_bounded) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(weights(i) > 0.0)) continue;
      const double y = -gap(i) - root;
      if (y < dom.bound) out.kappa(i) = eta * (dom.bound - y);
    }
  }
  return out;
}

}  // namespace detail

/// Dual objective g(lambda, kappa) and its gradient, ordered (lambda, kappa_0..K-1).
template <Divergence D>
std::pair<double, Vector> dual_objective_bandit(const BanditInstance<D>& inst, double lambda,
                                                const Vector& kappa) {
  const auto k = static_cast<Eigen::Index>(inst.arms());
  if (kappa.size() != k) throw std::invalid_argument("kappa length mismatch");
  Vector grad = Vector::Zero(k + 1);
  double value = lambda;
  grad(0) = 1.0;
  const ConjugateDomain dom = inst.divergence.domain();
  for (Eigen::Index a = 0; a < k; ++a) {
    if (kappa(a) < 0.0) throw DomainError(fmt::format("kappa({}) is negative", a));
    const double qa = inst.q.weights()(a);
    if (qa == 0.0) continue;
    const double y = (inst.values(a) - lambda + kappa(a)) / inst.eta;
    if (!dom.contains(y)) {
      throw DomainError(fmt::format("arm {}: conjugate argument {} outside the domain", a, y));
    }
    const ConjugatePoint p = detail::point_from_y(inst.divergence, y);
    const double h = conjugate_prime_at(inst.divergence, p);
    value += inst.eta * qa * conjugate_at(inst.divergence, p);
    grad(0) -= qa * h;
    grad(a + 1) = qa * h;
  }
  return {value, grad};
}

template <Divergence D>
BanditDualSolution solve_bandit_dual(const BanditInstance<D>& inst, const SolverTolerances& tol = {}) {
  const auto root = detail::solve_baseline(inst.q.weights(), inst.values, inst.eta, inst.divergence);
  BanditDualSolution sol;
  sol.lambda = root.lambda;
  sol.kappa = root.kappa;
  sol.arguments = root.points;
  sol.normalization_residual = root.residual;

  double g = root.lambda;
  for (std::size_t a = 0; a < inst.arms(); ++a) {
    const double qa = inst.q[a];
    if (qa == 0.0) continue;
    g += inst.eta * qa * conjugate_at(inst.divergence, root.points[a]);
  }
  sol.dual_value = g;
  sol.report.iterations = root.iterations;
  // With kappa minimized out, the projected gradient reduces to d g / d lambda.
  sol.report.final_gradient_norm = std::abs(root.residual);
  sol.report.converged = sol.report.final_gradient_norm <= tol.grad_tol;
  sol.report.objective_value = g;
  if (!std::isfinite(g)) throw SolverError("bandit dual: non-finite optimum", sol.report);
  return sol;
}

template <Divergence D>
DiscreteDistribution improve_policy(const BanditInstance<D>& inst, const BanditDualSolution& sol) {
  const auto k = inst.arms();
  std::vector<ConjugatePoint> points = sol.arguments;
  if (points.size() != k) {
    if (static_cast<std::size_t>(sol.kappa.size()) != k) {
      throw std::invalid_argument("improve_policy: kappa length mismatch");
    }
    const ConjugateDomain dom = inst.divergence.domain();
    points.resize(k);
    for (std::size_t a = 0; a < k; ++a) {
      const auto i = static_cast<Eigen::Index>(a);
      if (inst.q[a] == 0.0) continue;
      const double y = (inst.values(i) - sol.lambda + sol.kappa(i)) / inst.eta;
      if (!dom.contains(y)) {
        throw DomainError(fmt::format("arm {}: conjugate argument {} outside the domain", a, y));
      }
      // An active multiplier pins the argument to the bound (zero probability).
      points[a] = sol.kappa(i) > 0.0 && dom.closed ? ConjugatePoint{dom.bound, 0.0}
                                                   : detail::point_from_y(inst.divergence, y);
    }
  }
  Vector pi = Vector::Zero(static_cast<Eigen::Index>(k));
  for (std::size_t a = 0; a < k; ++a) {
    if (inst.q[a] == 0.0) continue;
    pi(static_cast<Eigen::Index>(a)) = inst.q[a] * conjugate_prime_at(inst.divergence, points[a]);
  }
  const double total = pi.sum();
  if (!std::isfinite(total) || std::abs(total - 1.0) > kNormalizationFailure) {
    throw NormalizationError(fmt::format("improved policy sums to {}", total), total - 1.0);
  }
  return DiscreteDistribution(pi / total);
}

/// Solve and improve in one call.
template <Divergence D>
std::pair<DiscreteDistribution, BanditDualSolution> bandit_update(const BanditInstance<D>& inst) {
  auto sol = solve_bandit_dual(inst);
  auto pi = improve_policy(inst, sol);
  return {std::move(pi), std::move(sol)};
}

/// KL solution: pi proportional to q exp(Q / eta), lambda = eta log sum q exp(Q / eta).
inline std::pair<DiscreteDistribution, double> softmax_closed_form(const DiscreteDistribution& q,
                                                                   const Vector& values, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("softmax_closed_form: eta must be positive");
  if (static_cast<std::size_t>(values.size()) != q.size()) {
    throw std::invalid_argument("softmax_closed_form: length mismatch");
  }
  double vmax = -std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < values.size(); ++a) {
    if (q.weights()(a) > 0.0) vmax = std::max(vmax, values(a));
  }
  Vector w = Vector::Zero(values.size());
  for (Eigen::Index a = 0; a < values.size(); ++a) {
    if (q.weights()(a) > 0.0) w(a) = q.weights()(a) * std::exp((values(a) - vmax) / eta);
  }
  const double total = w.sum();
  return {DiscreteDistribution(w / total), vmax + eta * std::log(total)};
}

/// Pearson solution for eta > eta_min: pi = q (1 + A / eta), lambda = J(q).
inline std::pair<DiscreteDistribution, double> linear_closed_form(const DiscreteDistribution& q,
                                                                  const Vector& values, double eta) {
  const double floor = eta_min(q, values);
  if (!(eta > floor)) {
    throw std::invalid_argument(
        fmt::format("linear_closed_form needs eta > eta_min = {}, got {}", floor, eta));
  }
  const Vector adv = advantage(q, values);
  Vector pi = q.weights().array() * (1.0 + adv.array() / eta);
  // Exact in real arithmetic; rounding can leave a few ulps of drift.
  pi /= pi.sum();
  return {DiscreteDistribution(pi), q.expectation(values)};
}

/// f(0+) used to score policies that drop an arm; +inf where the penalty is
/// unbounded.
template <Divergence D>
double generator_at_zero(const D& d) {
  try {
    const double v = d.f(std::numeric_limits<double>::min());
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const DomainError&) {
    return std::numeric_limits<double>::infinity();
  }
}

/// Primal objective sum_a pi(a) Q(a) - eta sum_a q(a) f(pi(a) / q(a)); -inf when
/// pi is not absolutely continuous w.r.t. q or the penalty is unbounded.
template <Divergence D>
double primal_objective_bandit(const BanditInstance<D>& inst, const Vector& pi) {
  double value = pi.dot(inst.values);
  double penalty = 0.0;
  for (std::size_t a = 0; a < inst.arms(); ++a) {
    const double qa = inst.q[a];
    const double pa = pi(static_cast<Eigen::Index>(a));
    if (qa == 0.0) {
      if (pa > 0.0) return -std::numeric_limits<double>::infinity();
      continue;
    }
    double fa;
    if (pa == 0.0) {
      fa = generator_at_zero(inst.divergence);
    } else {
      try {
        fa = inst.divergence.f(pa / qa);
      } catch (const DomainError&) {
        return -std::numeric_limits<double>::infinity();
      }
    }
    penalty += qa * fa;
  }
  if (!std::isfinite(penalty)) return -std::numeric_limits<double>::infinity();
  return value - inst.eta * penalty;
}

}  // namespace fdv
