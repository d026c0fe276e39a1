#pragma once

// Derivative-free reference solver for the bandit primal, independent of the
// conjugate machinery: a simplex grid scan followed by pairwise mass-exchange
// search with a shrinking step.

#include <functional>
#include <limits>
#include <vector>

#include "fdiv/bandit.hpp"

namespace fdv {

template <Divergence D>
DiscreteDistribution primal_oracle_bandit(const BanditInstance<D>& inst, int grid_resolution = 20) {
  if (grid_resolution < 1) throw std::invalid_argument("grid_resolution must be positive");
  std::vector<Eigen::Index> support;
  for (std::size_t a = 0; a < inst.arms(); ++a) {
    if (inst.q[a] > 0.0) support.push_back(static_cast<Eigen::Index>(a));
  }
  const auto k = static_cast<Eigen::Index>(inst.arms());
  auto score = [&](const Vector& pi) { return primal_objective_bandit(inst, pi); };

  Vector best = inst.q.weights();
  double best_value = score(best);

  if (support.size() <= 5) {
    Vector pi = Vector::Zero(k);
    std::function<void(std::size_t, int)> scan = [&](std::size_t i, int remaining) {
      const auto a = support[i];
      if (i + 1 == support.size()) {
        pi(a) = static_cast<double>(remaining) / grid_resolution;
        const double v = score(pi);
        if (v > best_value) {
          best_value = v;
          best = pi;
        }
        return;
      }
      for (int units = 0; units <= remaining; ++units) {
        pi(a) = static_cast<double>(units) / grid_resolution;
        scan(i + 1, remaining - units);
      }
      pi(a) = 0.0;
    };
    scan(0, grid_resolution);
  }

  double step = 1.0 / grid_resolution;
  while (step > 1e-13) {
    bool improved = false;
    for (auto from : support) {
      for (auto to : support) {
        if (from == to || best(from) <= 0.0) continue;
        Vector trial = best;
        const double moved = std::min(step, best(from));
        trial(from) -= moved;
        trial(to) += moved;
        const double v = score(trial);
        if (v > best_value) {
          best_value = v;
          best = trial;
          improved = true;
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return DiscreteDistribution::normalized(best);
}

}  // namespace fdv
