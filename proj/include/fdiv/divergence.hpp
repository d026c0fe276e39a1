#pragma once

// Alpha-divergence generators and their convex conjugates.
//
// For a generator f on (0, inf) with f(1) = 0 the conjugate
//   f*(y) = sup_x { x y - f(x) }
// supplies the policy-update kernel (f*)' = (f')^{-1}. Within the alpha family
//   f_a(x)    = ((x^a - 1) - a (x - 1)) / (a (a - 1))
//   f*_a(y)   = (1 + (a - 1) y)^{a / (a - 1)} / a - 1 / a
//   (f*_a)'(y) = (1 + (a - 1) y)^{1 / (a - 1)}
// defined for y (1 - a) < 1. The quantity 1 + (a - 1) y is called the base
// below; for a > 1 the base may reach zero (x = 0 lies in dom f'), for a < 1
// the conjugate is singular there.

#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <string>

#include <fmt/format.h>

#include "fdiv/errors.hpp"

namespace fdv {

enum class DomainKind { all_reals, upper_bounded, lower_bounded };

/// Half-line (or the real line) on which f* is defined.
struct ConjugateDomain {
  DomainKind kind = DomainKind::all_reals;
  double bound = 0.0;
  double slack = 0.0;
  /// True when the bound itself is admissible (alpha > 1).
  bool closed = false;

  /// Membership in the mathematical domain; slack is ignored.
  bool contains(double y) const {
    if (!std::isfinite(y)) return false;
    switch (kind) {
      case DomainKind::all_reals:
        return true;
      case DomainKind::upper_bounded:
        return closed ? y <= bound : y < bound;
      case DomainKind::lower_bounded:
        return closed ? y >= bound : y > bound;
    }
    return false;
  }

  /// Membership in the closed set shrunk by `slack` on the singular side.
  bool contains_with_slack(double y) const {
    if (!std::isfinite(y)) return false;
    switch (kind) {
      case DomainKind::all_reals:
        return true;
      case DomainKind::upper_bounded:
        return y <= bound - slack;
      case DomainKind::lower_bounded:
        return closed ? y >= bound : y >= bound + slack;
    }
    return false;
  }

  /// Distance from y to the bound, positive inside; +inf for all reals.
  double margin(double y) const {
    switch (kind) {
      case DomainKind::all_reals:
        return std::numeric_limits<double>::infinity();
      case DomainKind::upper_bounded:
        return bound - y;
      case DomainKind::lower_bounded:
        return y - bound;
    }
    return 0.0;
  }
};

inline constexpr double kLimitThreshold = 1e-9;
inline constexpr double kDefaultRelativeSlack = 1e-8;

class AlphaDivergence {
 public:
  explicit AlphaDivergence(double alpha) : alpha_(alpha) {
    if (!std::isfinite(alpha)) throw DomainError("alpha must be finite");
  }

  static AlphaDivergence kl() { return AlphaDivergence(1.0); }
  static AlphaDivergence reverse_kl() { return AlphaDivergence(0.0); }
  static AlphaDivergence pearson() { return AlphaDivergence(2.0); }
  static AlphaDivergence neyman() { return AlphaDivergence(-1.0); }
  static AlphaDivergence hellinger() { return AlphaDivergence(0.5); }

  double alpha() const { return alpha_; }
  bool is_kl() const { return std::abs(alpha_ - 1.0) <= kLimitThreshold; }
  bool is_reverse_kl() const { return std::abs(alpha_) <= kLimitThreshold; }

  double f(double x) const {
    require_positive(x, "f");
    double value;
    if (is_kl()) {
      value = x * std::log(x) - (x - 1.0);
    } else if (is_reverse_kl()) {
      value = -std::log(x) + (x - 1.0);
    } else {
      value = ((std::pow(x, alpha_) - 1.0) - alpha_ * (x - 1.0)) / (alpha_ * (alpha_ - 1.0));
    }
    if (!std::isfinite(value)) throw DomainError(fmt::format("f({}) is not finite", x));
    return value;
  }

  double f_prime(double x) const {
    require_positive(x, "f'");
    double value;
    if (is_kl()) {
      value = std::log(x);
    } else if (is_reverse_kl()) {
      value = 1.0 - 1.0 / x;
    } else {
      value = (std::pow(x, alpha_ - 1.0) - 1.0) / (alpha_ - 1.0);
    }
    if (!std::isfinite(value)) throw DomainError(fmt::format("f'({}) is not finite", x));
    return value;
  }

  ConjugateDomain domain() const {
    if (is_kl()) return {DomainKind::all_reals, 0.0, 0.0, false};
    const double bound = 1.0 / (1.0 - alpha_);
    const double slack = kDefaultRelativeSlack * std::max(1.0, std::abs(bound));
    if (alpha_ < 1.0) return {DomainKind::upper_bounded, bound, slack, false};
    return {DomainKind::lower_bounded, bound, slack, true};
  }

  double conjugate(double y) const {
    if (is_kl()) {
      if (!std::isfinite(y)) throw DomainError("f* argument is not finite");
      const double value = std::expm1(y);
      if (!std::isfinite(value)) throw OverflowError(fmt::format("f*({}) overflows", y));
      return value;
    }
    return conjugate_from_base(base_of(y, "f*"));
  }

  double conjugate_prime(double y) const {
    if (is_kl()) {
      if (!std::isfinite(y)) throw DomainError("(f*)' argument is not finite");
      const double value = std::exp(y);
      if (!std::isfinite(value)) throw OverflowError(fmt::format("(f*)'({}) overflows", y));
      return value;
    }
    return conjugate_prime_from_base(base_of(y, "(f*)'"));
  }

  /// (f*)''(y) = base^((2 - alpha) / (alpha - 1)).
  double conjugate_second(double y) const {
    if (is_kl()) return conjugate_prime(y);
    return conjugate_second_from_base(base_of(y, "(f*)''"));
  }

  // Evaluation through the distance to the domain bound. Near a singular bound
  // the base is a tiny difference of O(1) numbers; passing the margin directly
  // keeps its relative precision. For KL the margin is meaningless and the
  // argument is interpreted as y itself.
  double conjugate_at_margin(double margin) const {
    if (is_kl()) return conjugate(margin);
    return conjugate_from_base(base_of_margin(margin));
  }

  double conjugate_prime_at_margin(double margin) const {
    if (is_kl()) return conjugate_prime(margin);
    return conjugate_prime_from_base(base_of_margin(margin));
  }

  double conjugate_second_at_margin(double margin) const {
    if (is_kl()) return conjugate_prime(margin);
    return conjugate_second_from_base(base_of_margin(margin));
  }

 private:
  static void require_positive(double x, const char* what) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw DomainError(fmt::format("{} requires x > 0, got {}", what, x));
    }
  }

  double base_of(double y, const char* what) const {
    if (!std::isfinite(y)) throw DomainError(fmt::format("{} argument is not finite", what));
    const double base = 1.0 + (alpha_ - 1.0) * y;
    check_base(base, y, what);
    return base;
  }

  double base_of_margin(double margin) const {
    if (!std::isfinite(margin)) throw DomainError("margin is not finite");
    const double base = std::abs(alpha_ - 1.0) * margin;
    check_base(base, margin, "margin");
    return base;
  }

  void check_base(double base, double arg, const char* what) const {
    // alpha > 1 admits base == 0 (zero probability); alpha < 1 is singular there.
    const bool ok = alpha_ > 1.0 ? base >= 0.0 : base > 0.0;
    if (!ok) {
      throw DomainError(fmt::format("{} argument {} outside conjugate domain (alpha = {})", what,
                                    arg, alpha_));
    }
  }

  double conjugate_from_base(double base) const {
    double value;
    if (is_reverse_kl()) {
      value = -std::log(base);
    } else {
      value = (std::pow(base, alpha_ / (alpha_ - 1.0)) - 1.0) / alpha_;
    }
    if (!std::isfinite(value)) throw OverflowError("f* overflows");
    return value;
  }

  double conjugate_prime_from_base(double base) const {
    const double value = std::pow(base, 1.0 / (alpha_ - 1.0));
    if (!std::isfinite(value)) throw OverflowError("(f*)' overflows");
    return value;
  }

  double conjugate_second_from_base(double base) const {
    const double value = std::pow(base, (2.0 - alpha_) / (alpha_ - 1.0));
    if (!std::isfinite(value)) throw OverflowError("(f*)'' overflows");
    return value;
  }

  double alpha_;
};

/// A user-supplied generator bundle (f, f', f*, (f*)', domain).
struct CustomDivergence {
  std::function<double(double)> f_fn;
  std::function<double(double)> f_prime_fn;
  std::function<double(double)> conjugate_fn;
  std::function<double(double)> conjugate_prime_fn;
  ConjugateDomain dom;

  double f(double x) const { return f_fn(x); }
  double f_prime(double x) const { return f_prime_fn(x); }
  double conjugate(double y) const { return conjugate_fn(y); }
  double conjugate_prime(double y) const { return conjugate_prime_fn(y); }
  ConjugateDomain domain() const { return dom; }
  double conjugate_at_margin(double margin) const { return conjugate(point_at(margin)); }
  double conjugate_prime_at_margin(double margin) const {
    return conjugate_prime(point_at(margin));
  }

 private:
  double point_at(double margin) const {
    switch (dom.kind) {
      case DomainKind::all_reals:
        return margin;
      case DomainKind::upper_bounded:
        return dom.bound - margin;
      case DomainKind::lower_bounded:
        return dom.bound + margin;
    }
    return margin;
  }
};

template <class D>
concept Divergence = requires(const D& d, double v) {
  { d.f(v) } -> std::convertible_to<double>;
  { d.f_prime(v) } -> std::convertible_to<double>;
  { d.conjugate(v) } -> std::convertible_to<double>;
  { d.conjugate_prime(v) } -> std::convertible_to<double>;
  { d.conjugate_at_margin(v) } -> std::convertible_to<double>;
  { d.conjugate_prime_at_margin(v) } -> std::convertible_to<double>;
  { d.domain() } -> std::same_as<ConjugateDomain>;
};

static_assert(Divergence<AlphaDivergence>);
static_assert(Divergence<CustomDivergence>);

template <Divergence D>
double f_value(const D& d, double x) {
  return d.f(x);
}

template <Divergence D>
double f_derivative(const D& d, double x) {
  return d.f_prime(x);
}

template <Divergence D>
double conjugate_value(const D& d, double y) {
  return d.conjugate(y);
}

template <Divergence D>
double conjugate_derivative(const D& d, double y) {
  return d.conjugate_prime(y);
}

template <Divergence D>
ConjugateDomain conjugate_domain(const D& d) {
  return d.domain();
}

/// |f*(y) + f(x*) - y x*| with x* = (f*)'(y); zero up to roundoff.
template <Divergence D>
double fenchel_residual(const D& d, double y) {
  const double x = d.conjugate_prime(y);
  return std::abs(d.conjugate(y) + d.f(x) - y * x);
}

/// Conjugate argument (a - lambda + kappa) / eta together with its margin to
/// the domain bound. Carrying both lets callers evaluate near the bound.
struct ConjugatePoint {
  double y = 0.0;
  double margin = std::numeric_limits<double>::infinity();
};

template <Divergence D>
double conjugate_at(const D& d, const ConjugatePoint& p) {
  if (d.domain().kind == DomainKind::all_reals) return d.conjugate(p.y);
  return d.conjugate_at_margin(p.margin);
}

template <Divergence D>
double conjugate_prime_at(const D& d, const ConjugatePoint& p) {
  if (d.domain().kind == DomainKind::all_reals) return d.conjugate_prime(p.y);
  return d.conjugate_prime_at_margin(p.margin);
}

/// (f*)'' at p. Generators without an analytic second derivative fall back to
/// a one-sided difference of (f*)' taken away from the domain bound.
template <Divergence D>
double conjugate_second_at(const D& d, const ConjugatePoint& p) {
  if constexpr (requires { d.conjugate_second_at_margin(p.margin); d.conjugate_second(p.y); }) {
    if (d.domain().kind == DomainKind::all_reals) return d.conjugate_second(p.y);
    return d.conjugate_second_at_margin(p.margin);
  } else {
    const ConjugateDomain dom = d.domain();
    double h = 1e-6 * std::max(1.0, std::abs(p.y));
    if (dom.kind != DomainKind::all_reals) h = std::min(h, 0.5 * p.margin);
    if (!(h > 0.0)) return 0.0;
    const double sign = dom.kind == DomainKind::upper_bounded ? -1.0 : 1.0;
    const ConjugatePoint q{p.y + sign * h, dom.kind == DomainKind::all_reals ? p.margin : p.margin + h};
    return sign * (conjugate_prime_at(d, q) - conjugate_prime_at(d, p)) / h;
  }
}

}  // namespace fdv
