#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

#include "fdiv/environments.hpp"
#include "fdiv/mdp.hpp"

namespace fdv {

struct TemperatureSchedule {
  double eta0 = 1.0;
  double decay = 1.0;

  void validate() const {
    if (!(eta0 > 0.0) || !std::isfinite(eta0)) {
      throw ConfigError(fmt::format("schedule.eta0 must be positive, got {}", eta0));
    }
    if (!(decay > 0.0 && decay <= 1.0)) {
      throw ConfigError(fmt::format("schedule.decay must lie in (0, 1], got {}", decay));
    }
  }
};

/// eta after k updates.
inline double temperature_decay(const TemperatureSchedule& schedule, int k) {
  if (k < 0) throw std::invalid_argument("temperature_decay: k must be nonnegative");
  return schedule.eta0 * std::pow(schedule.decay, k);
}

struct PolicyIterationConfig {
  int iterations = 30;
  int samples_per_update = 800;
  bool warm_start = true;
  std::optional<FeatureMap> features;
  MdpSolveOptions solver{};
};

struct LearningCurve {
  /// J(pi_k) for k = 0..iterations, from the model.
  std::vector<double> exact_return;
  /// Mean sampled reward of each batch.
  std::vector<double> sample_return;
  std::vector<Policy> policies;
  /// Per update, states where every action was eliminated; they keep pi_k.
  std::vector<std::vector<int>> degenerate_states;
};

/// N consecutive transitions under pi, continuing from `state`.
inline TransitionBatch collect_batch(const TabularMdp& model, const Policy& pi, int samples, int& state, Rng& rng) {
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const int a = sample_index(pi.row(state), rng);
    const StepResult step = env_step(model, state, a, rng);
    out.push_back({state, a, step.next, step.reward});
    state = step.next;
  }
  return TransitionBatch(model.n_states(), model.n_actions(), std::move(out), pi);
}

template <Divergence D>
LearningCurve policy_iteration_loop(const TabularMdp& model, const D& d, const TemperatureSchedule& schedule,
                                    const PolicyIterationConfig& config, Rng& rng) {
  schedule.validate();
  if (config.iterations < 0 || config.samples_per_update < 1) {
    throw std::invalid_argument("policy iteration needs iterations >= 0 and samples_per_update >= 1");
  }
  const FeatureMap features = config.features.value_or(FeatureMap::one_hot(model.n_states()));
  LearningCurve curve;
  Policy pi = uniform_policy(model.n_states(), model.n_actions());
  int state = sample_index(model.start().transpose(), rng);
  std::optional<Vector> warm;
  curve.policies.push_back(pi);
  curve.exact_return.push_back(expected_return_exact(model, pi));
  for (int k = 0; k < config.iterations; ++k) {
    const double eta = temperature_decay(schedule, k);
    const TransitionBatch batch = collect_batch(model, pi, config.samples_per_update, state, rng);
    double total = 0.0;
    for (const auto& t : batch.samples()) total += t.reward;
    curve.sample_return.push_back(total / static_cast<double>(batch.size()));

    MdpSolveOptions options = config.solver;
    if (config.warm_start) options.warm_start = warm;
    const MdpDualSolution sol = solve_mdp_dual(batch, d, eta, features, options);
    warm = sol.value.theta;
    std::vector<int> degenerate;
    pi = improve_mdp_policy(pi, estimate_advantages(batch, sol.value), sol, d, eta, &degenerate);
    curve.degenerate_states.push_back(std::move(degenerate));
    curve.policies.push_back(pi);
    curve.exact_return.push_back(expected_return_exact(model, pi));
  }
  return curve;
}

}  // namespace fdv
