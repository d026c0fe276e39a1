#pragma once

// Projected gradient descent for smooth convex duals.
//
// The feasible sets met here are a nonnegative orthant on some coordinates
// intersected with half-spaces that are affine in the decision variables.
// Every half-space names a repair coordinate whose move restores feasibility
// without breaking other constraints: a shared baseline coordinate that enters
// every constraint with the same sign, or a dedicated multiplier. Projection
// applies those repairs in one pass. Step sizes follow Barzilai-Borwein with a
// monotone Armijo backtrack; non-finite objective values reject a trial point.
// minimize_newton is a second-order alternative for objectives that supply a
// Hessian; it treats the same constraints with a log barrier.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <fmt/format.h>

#include "fdiv/distribution.hpp"
#include "fdiv/errors.hpp"

namespace fdv {

struct SolverTolerances {
  double grad_tol = 1e-8;
  int max_iter = 10000;
  double initial_step = 1.0;
  double armijo = 1e-4;
  double shrink = 0.5;
};

struct SolverReport {
  int iterations = 0;
  double final_gradient_norm = std::numeric_limits<double>::infinity();
  bool converged = false;
  double objective_value = std::numeric_limits<double>::quiet_NaN();
};

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, SolverReport report)
      : std::runtime_error(what), report_(report) {}
  const SolverReport& report() const { return report_; }

 private:
  SolverReport report_;
};

enum class Sense { at_most, at_least };

/// sum_j terms[j].second * x[terms[j].first] + offset  (<= or >=)  bound
struct Halfspace {
  std::vector<std::pair<Eigen::Index, double>> terms;
  double offset = 0.0;
  Sense sense = Sense::at_most;
  double bound = 0.0;
  Eigen::Index repair_index = -1;

  double value(const Vector& x) const {
    double v = offset;
    for (const auto& [i, c] : terms) v += c * x(i);
    return v;
  }

  bool satisfied(const Vector& x) const {
    const double v = value(x);
    return sense == Sense::at_most ? v <= bound : v >= bound;
  }

  double repair_coefficient() const {
    for (const auto& [i, c] : terms) {
      if (i == repair_index) return c;
    }
    return 0.0;
  }
};

struct FeasibleSet {
  std::vector<Eigen::Index> nonneg_indices;
  std::vector<Halfspace> halfspaces;

  bool contains(const Vector& x) const {
    if (!x.allFinite()) return false;
    for (auto i : nonneg_indices) {
      if (x(i) < 0.0) return false;
    }
    for (const auto& h : halfspaces) {
      if (!h.satisfied(x)) return false;
    }
    return true;
  }
};

namespace detail {

inline void repair(const Halfspace& h, Vector& x) {
  const double c = h.repair_coefficient();
  if (c == 0.0) throw std::invalid_argument("half-space repair coordinate has zero coefficient");
  double v = h.value(x);
  if (h.sense == Sense::at_most ? v <= h.bound : v >= h.bound) return;
  x(h.repair_index) += (h.bound - v) / c;
  // Roundoff may leave the constraint a few ulps short; walk the repair
  // coordinate outward until it holds.
  const double inward = (h.sense == Sense::at_most) == (c < 0.0) ? 1.0 : -1.0;
  for (int k = 0; k < 64 && !h.satisfied(x); ++k) {
    const double xi = x(h.repair_index);
    const double ulp = std::nextafter(xi, inward * std::numeric_limits<double>::infinity()) - xi;
    x(h.repair_index) = xi + ulp * static_cast<double>(1 << std::min(k, 30));
  }
}

}  // namespace detail

/// Maps a point into the feasible set: clips nonnegative coordinates, then
/// repairs each violated half-space through its repair coordinate.
inline Vector project_feasible(Vector x, const FeasibleSet& feasible) {
  for (auto i : feasible.nonneg_indices) x(i) = std::max(x(i), 0.0);
  for (int pass = 0; pass < 4; ++pass) {
    bool clean = true;
    for (const auto& h : feasible.halfspaces) {
      if (!h.satisfied(x)) {
        clean = false;
        detail::repair(h, x);
      }
    }
    if (clean) break;
  }
  return x;
}

/// Max-norm of x - P(x - grad), the unit-step projected gradient.
inline double projected_gradient_norm(const Vector& x, const Vector& grad,
                                      const FeasibleSet& feasible) {
  if (x.size() == 0) return 0.0;
  return (x - project_feasible(x - grad, feasible)).cwiseAbs().maxCoeff();
}

/// Objective: double(const Vector& x, Vector& grad); returns +inf (or NaN)
/// outside the domain of the objective.
template <class Objective>
std::pair<Vector, SolverReport> minimize_convex(Objective&& objective, const FeasibleSet& feasible,
                                                Vector x, const SolverTolerances& tol = {}) {
  SolverReport report;
  if (!feasible.contains(x)) throw SolverError("minimize_convex: start point is infeasible", report);

  Vector grad(x.size());
  double fx = objective(x, grad);
  if (!std::isfinite(fx)) {
    throw SolverError("minimize_convex: objective is not finite at the start point", report);
  }

  double step = tol.initial_step;
  Vector trial(x.size());
  Vector trial_grad(x.size());
  for (;;) {
    report.final_gradient_norm = projected_gradient_norm(x, grad, feasible);
    report.objective_value = fx;
    if (report.final_gradient_norm <= tol.grad_tol) {
      report.converged = true;
      break;
    }
    if (report.iterations >= tol.max_iter) break;

    double tau = step;
    bool accepted = false;
    double f_trial = 0.0;
    for (int backtrack = 0; backtrack < 100; ++backtrack, tau *= tol.shrink) {
      trial = project_feasible(x - tau * grad, feasible);
      if (trial == x) break;
      f_trial = objective(trial, trial_grad);
      if (!std::isfinite(f_trial)) continue;
      const double predicted = grad.dot(trial - x);
      const bool armijo = f_trial <= fx + tol.armijo * predicted;
      // Below roundoff the Armijo test is noise; accept any non-increase.
      const bool flat = f_trial <= fx && std::abs(predicted) <= 1e-13 * (1.0 + std::abs(fx));
      if (armijo || flat) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;

    const Vector s = trial - x;
    const double sy = s.dot(trial_grad - grad);
    step = sy > 0.0 ? std::clamp(s.squaredNorm() / sy, 1e-30, 1e30) : 2.0 * tau;
    x.swap(trial);
    grad.swap(trial_grad);
    fx = f_trial;
    ++report.iterations;
  }
  return {std::move(x), report};
}

namespace detail {

/// Objective plus -mu * sum(log slack) over every constraint; +inf unless
/// the point is strictly feasible.
template <class Objective>
double barrier_value(Objective& objective, const FeasibleSet& feasible, double mu, const Vector& x, Vector* grad,
                     Matrix* hess) {
  for (auto i : feasible.nonneg_indices) {
    if (!(x(i) > 0.0)) return std::numeric_limits<double>::infinity();
  }
  std::vector<double> slacks;
  slacks.reserve(feasible.halfspaces.size());
  for (const auto& h : feasible.halfspaces) {
    const double v = h.value(x);
    const double slack = h.sense == Sense::at_most ? h.bound - v : v - h.bound;
    if (!(slack > 0.0)) return std::numeric_limits<double>::infinity();
    slacks.push_back(slack);
  }
  double value = objective(x, grad, hess);
  if (!std::isfinite(value) || mu == 0.0) return value;
  for (auto i : feasible.nonneg_indices) {
    value -= mu * std::log(x(i));
    if (grad != nullptr) (*grad)(i) -= mu / x(i);
    if (hess != nullptr) (*hess)(i, i) += mu / (x(i) * x(i));
  }
  for (std::size_t k = 0; k < slacks.size(); ++k) {
    const Halfspace& h = feasible.halfspaces[k];
    const double sign = h.sense == Sense::at_most ? 1.0 : -1.0;
    value -= mu * std::log(slacks[k]);
    for (const auto& [i, ci] : h.terms) {
      if (grad != nullptr) (*grad)(i) += sign * mu / slacks[k] * ci;
      if (hess == nullptr) continue;
      for (const auto& [j, cj] : h.terms) (*hess)(i, j) += mu / (slacks[k] * slacks[k]) * ci * cj;
    }
  }
  return value;
}

/// Newton direction on the Hessian with Levenberg damping grown until the
/// factorization is positive and the direction descends; empty on failure.
inline Vector damped_newton_direction(const Matrix& hess, const Vector& grad) {
  const double scale = std::max(hess.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  double mu = 1e-12 * scale;
  for (int attempt = 0; attempt < 8; ++attempt, mu *= 100.0) {
    Matrix damped = hess;
    damped.diagonal().array() += mu;
    Eigen::LDLT<Matrix> ldlt(damped);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) continue;
    Vector dir = ldlt.solve(-grad);
    if (dir.allFinite() && grad.dot(dir) < 0.0) return dir;
  }
  return {};
}

/// Armijo backtracking along dir; points where value is not finite are
/// rejected, which keeps barrier iterates strictly inside.
template <class Value>
bool backtrack(Value&& value, Vector& x, double& fx, const Vector& grad, const Vector& dir, double tau,
               const SolverTolerances& tol) {
  const double slope = grad.dot(dir);
  for (int k = 0; k < 80; ++k, tau *= tol.shrink) {
    const Vector trial = x + tau * dir;
    if (trial == x) return false;
    const double f_trial = value(trial);
    if (!std::isfinite(f_trial)) continue;
    const bool armijo = f_trial <= fx + tol.armijo * tau * slope;
    // Below roundoff the Armijo test is noise; accept any non-increase.
    const bool flat = f_trial <= fx && std::abs(tau * slope) <= 1e-13 * (1.0 + std::abs(fx));
    if (armijo || flat) {
      x = trial;
      fx = f_trial;
      return true;
    }
  }
  return false;
}

/// Near the optimum the decrease can fall below the roundoff of the value
/// itself; accept a step that keeps the value within roundoff and shrinks the
/// gradient.
template <class Gradient>
bool roundoff_step(Gradient&& gradient_norm, Vector& x, double fx, double gnorm, const Vector& dir) {
  double tau = 1.0;
  for (int k = 0; k < 30; ++k, tau *= 0.5) {
    const Vector trial = x + tau * dir;
    double f_trial = 0.0;
    const double g_trial = gradient_norm(trial, f_trial);
    if (std::isfinite(f_trial) && f_trial <= fx + 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(fx)) &&
        g_trial < 0.9 * gnorm) {
      x = trial;
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Damped Newton for smooth convex objectives with a Hessian.
///
/// Objective: double(const Vector& x, Vector* grad, Matrix* hess), +inf
/// outside its domain. Constraints are handled by a log barrier whose weight
/// shrinks from 1e-3 to grad_tol / 100, so the start point must be strictly
/// feasible. The reported gradient norm is the max-norm of the barrier
/// gradient, i.e. the KKT residual with multipliers mu / slack. A gradient
/// step stands in whenever the Newton step cannot be accepted. Slacks that
/// are differences of large terms limit how small that residual can get, so
/// callers with a sharper optimality test should apply it to the result.
template <class Objective>
std::pair<Vector, SolverReport> minimize_newton(Objective&& objective, const FeasibleSet& feasible, Vector x,
                                                const SolverTolerances& tol = {}) {
  SolverReport report;
  const bool constrained = !feasible.nonneg_indices.empty() || !feasible.halfspaces.empty();
  const double mu_final = constrained ? 0.01 * tol.grad_tol : 0.0;
  double mu = constrained ? std::max(1e-3, mu_final) : 0.0;
  if (!std::isfinite(detail::barrier_value(objective, feasible, mu, x, nullptr, nullptr))) {
    throw SolverError("minimize_newton: start point is not strictly feasible or not in the domain", report);
  }
  Vector grad(x.size());
  Matrix hess(x.size(), x.size());
  for (;;) {
    const bool last_stage = mu <= mu_final;
    const double stage_tol = last_stage ? tol.grad_tol : std::max(tol.grad_tol, mu);
    auto value = [&](const Vector& z) { return detail::barrier_value(objective, feasible, mu, z, nullptr, nullptr); };
    double fx = detail::barrier_value(objective, feasible, mu, x, &grad, &hess);
    int flat_steps = 0;
    for (;;) {
      report.final_gradient_norm = grad.size() == 0 ? 0.0 : grad.cwiseAbs().maxCoeff();
      if (report.final_gradient_norm <= stage_tol || report.iterations >= tol.max_iter) break;
      const Vector dir = detail::damped_newton_direction(hess, grad);
      auto gradient_norm = [&](const Vector& z, double& fz) {
        Vector gz(z.size());
        fz = detail::barrier_value(objective, feasible, mu, z, &gz, nullptr);
        return std::isfinite(fz) ? gz.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
      };
      const double f_before = fx;
      const bool moved =
          (dir.size() != 0 && detail::backtrack(value, x, fx, grad, dir, 1.0, tol)) ||
          detail::backtrack(value, x, fx, grad, -grad,
                            std::max(tol.initial_step, 1.0 / std::max(1.0, report.final_gradient_norm)), tol) ||
          (dir.size() != 0 && detail::roundoff_step(gradient_norm, x, fx, report.final_gradient_norm, dir));
      if (!moved) break;
      fx = detail::barrier_value(objective, feasible, mu, x, &grad, &hess);
      ++report.iterations;
      // Steps that no longer lower the value are chasing roundoff in the gradient.
      flat_steps = fx < f_before ? 0 : flat_steps + 1;
      if (flat_steps >= 10) break;
    }
    if (last_stage || report.iterations >= tol.max_iter) break;
    mu = std::max(mu * 0.1, mu_final);
  }
  report.converged = report.final_gradient_norm <= tol.grad_tol;
  report.objective_value = objective(x, nullptr, nullptr);
  return {std::move(x), report};
}

/// Largest relative error between the analytic gradient and central
/// differences, with the denominator floored at one.
template <class Objective>
double check_gradient(Objective&& objective, const Vector& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");
  Vector analytic(point.size());
  if (!std::isfinite(objective(point, analytic))) {
    throw DomainError("check_gradient: objective not finite at the point");
  }
  Vector scratch(point.size());
  double worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    Vector plus = point;
    Vector minus = point;
    plus(i) += step;
    minus(i) -= step;
    const double fp = objective(plus, scratch);
    const double fm = objective(minus, scratch);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw DomainError(fmt::format("check_gradient: stencil leaves the domain at coordinate {}", i));
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double scale = std::max({1.0, std::abs(numeric), std::abs(analytic(i))});
    worst = std::max(worst, std::abs(numeric - analytic(i)) / scale);
  }
  return worst;
}

}  // namespace fdv
