#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace fdv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kNormalizationTolerance = 1e-9;

/// Probability weights over a finite index set.
class DiscreteDistribution {
 public:
  DiscreteDistribution() = default;

  explicit DiscreteDistribution(Vector weights) : weights_(std::move(weights)) { validate(); }

  DiscreteDistribution(std::initializer_list<double> weights)
      : weights_(Eigen::Map<const Vector>(weights.begin(), static_cast<Eigen::Index>(weights.size()))) {
    validate();
  }

  static DiscreteDistribution uniform(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform distribution over an empty set");
    return DiscreteDistribution(Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
  }

  /// Scales nonnegative weights to unit mass.
  static DiscreteDistribution normalized(const Vector& weights) {
    const double total = weights.sum();
    if (!(total > 0.0) || !std::isfinite(total) || (weights.array() < 0.0).any()) {
      throw std::invalid_argument("cannot normalize weights: need nonnegative weights with positive finite mass");
    }
    return DiscreteDistribution(weights / total);
  }

  std::size_t size() const { return static_cast<std::size_t>(weights_.size()); }
  double operator[](std::size_t i) const { return weights_(static_cast<Eigen::Index>(i)); }
  const Vector& weights() const { return weights_; }

  double expectation(const Vector& values) const {
    if (values.size() != weights_.size()) throw std::invalid_argument("length mismatch");
    return weights_.dot(values);
  }

  /// Lowest index among the largest weights.
  std::size_t argmax() const {
    Eigen::Index best = 0;
    weights_.maxCoeff(&best);
    return static_cast<std::size_t>(best);
  }

 private:
  void validate() const {
    if (weights_.size() == 0) throw std::invalid_argument("empty distribution");
    for (Eigen::Index i = 0; i < weights_.size(); ++i) {
      if (!(weights_(i) >= 0.0) || !std::isfinite(weights_(i))) {
        throw std::invalid_argument(fmt::format("weight {} is {}", i, weights_(i)));
      }
    }
    const double total = weights_.sum();
    if (std::abs(total - 1.0) > kNormalizationTolerance) {
      throw std::invalid_argument(fmt::format("weights sum to {}", total));
    }
  }

  Vector weights_;
};

inline double linf_distance(const Vector& a, const Vector& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace fdv
