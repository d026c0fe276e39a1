#pragma once

// Seeded simulators: a Gaussian multi-armed bandit and three small tabular
// MDPs (Chain, CliffWalking, FrozenLake) with terminal cells rewired to the
// start state so every chain is irreducible. The generator is std::mt19937_64;
// independent streams come from std::seed_seq over (seed, run, stream).

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "fdiv/distribution.hpp"
#include "fdiv/errors.hpp"
#include "fdiv/mdp.hpp"

namespace fdv {

using Rng = std::mt19937_64;

inline Rng make_rng(std::initializer_list<std::uint64_t> key) {
  std::vector<std::uint32_t> words;
  for (auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

struct GaussianBandit {
  Vector means;
  double sigma = 1.0;

  GaussianBandit(Vector means_, double sigma_) : means(std::move(means_)), sigma(sigma_) {
    if (means.size() < 1 || !means.allFinite()) throw std::invalid_argument("bandit means must be finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("bandit sigma must be positive");
  }

  int arms() const { return static_cast<int>(means.size()); }
  double best_mean() const { return means.maxCoeff(); }
};

inline double sample_bandit_reward(const GaussianBandit& env, int arm, Rng& rng) {
  if (arm < 0 || arm >= env.arms()) throw std::out_of_range(fmt::format("arm {} out of range", arm));
  std::normal_distribution<double> noise(env.means(arm), env.sigma);
  return noise(rng);
}

inline std::pair<double, Rng> sample_bandit_reward(const GaussianBandit& env, int arm, const Rng& rng) {
  Rng next = rng;
  const double r = sample_bandit_reward(env, arm, next);
  return {r, next};
}

struct StepResult {
  int next = 0;
  double reward = 0.0;
};

inline int sample_index(const Eigen::Ref<const Eigen::RowVectorXd>& probabilities, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double cumulative = 0.0;
  int last = 0;
  for (Eigen::Index i = 0; i < probabilities.size(); ++i) {
    if (probabilities(i) <= 0.0) continue;
    cumulative += probabilities(i);
    last = static_cast<int>(i);
    if (u < cumulative) return last;
  }
  return last;
}

inline StepResult env_step(const TabularMdp& model, int s, int a, Rng& rng) {
  const auto row = model.transition_row(s, a);
  return {sample_index(row, rng), model.reward(s, a)};
}

inline std::pair<StepResult, Rng> env_step(const TabularMdp& model, int s, int a, const Rng& rng) {
  Rng next = rng;
  const StepResult r = env_step(model, s, a, next);
  return {r, next};
}

/// UCB1: unplayed arms first (lowest index), then mean + sqrt(2 ln t / n).
inline int ucb_select(const std::vector<int>& counts, const std::vector<double>& means, long t) {
  if (t < 1) throw std::invalid_argument("ucb_select: t must be at least 1");
  if (counts.size() != means.size() || counts.empty()) throw std::invalid_argument("ucb_select: size mismatch");
  for (std::size_t a = 0; a < counts.size(); ++a) {
    if (counts[a] == 0) return static_cast<int>(a);
  }
  const double log_t = std::log(static_cast<double>(t));
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < counts.size(); ++a) {
    const double score = means[a] + std::sqrt(2.0 * log_t / counts[a]);
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(a);
    }
  }
  return best;
}

enum class EnvKind { chain, cliffwalking, frozenlake };

inline std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::chain:
      return "chain";
    case EnvKind::cliffwalking:
      return "cliffwalking";
    case EnvKind::frozenlake:
      return "frozenlake";
  }
  return "unknown";
}

inline EnvKind env_kind_from_string(const std::string& name) {
  if (name == "chain") return EnvKind::chain;
  if (name == "cliffwalking") return EnvKind::cliffwalking;
  if (name == "frozenlake") return EnvKind::frozenlake;
  throw ConfigError(fmt::format("env.kind: unknown environment '{}'", name));
}

struct EnvConfig {
  EnvKind kind = EnvKind::chain;
  // Chain
  int n_states = 8;
  double small_reward = 2.0;
  double large_reward = 10.0;
  /// Probability that the chosen action takes effect (Chain, FrozenLake).
  double success_prob = 0.9;
  // CliffWalking
  int rows = 4;
  int cols = 12;
  double cliff_reward = -10.0;
  double goal_reward = 100.0;
  double step_reward = -1.0;
  // FrozenLake
  std::vector<std::string> map = {"SFFF", "FHFH", "FFFH", "HFFG"};
  double lake_goal_reward = 1.0;

  static EnvConfig preset(EnvKind kind) {
    EnvConfig c;
    c.kind = kind;
    if (kind == EnvKind::frozenlake) c.success_prob = 0.8;
    return c;
  }

  void validate() const {
    if (!(success_prob >= 0.0 && success_prob <= 1.0)) {
      throw ConfigError(fmt::format("env.success_prob must lie in [0, 1], got {}", success_prob));
    }
    switch (kind) {
      case EnvKind::chain:
        if (n_states < 1) throw ConfigError("env.n_states must be at least 1");
        break;
      case EnvKind::cliffwalking:
        if (rows < 2 || cols < 3) throw ConfigError("env.rows must be >= 2 and env.cols >= 3");
        break;
      case EnvKind::frozenlake: {
        if (map.empty()) throw ConfigError("env.map must not be empty");
        int starts = 0;
        for (const auto& line : map) {
          if (line.size() != map.front().size() || line.empty()) throw ConfigError("env.map rows must share a length");
          for (char c : line) {
            if (std::string("SFHG").find(c) == std::string::npos) {
              throw ConfigError(fmt::format("env.map: unknown cell '{}'", c));
            }
            starts += c == 'S';
          }
        }
        if (starts != 1) throw ConfigError("env.map needs exactly one start cell");
        break;
      }
    }
  }
};

namespace detail {

inline TabularMdp build_chain(const EnvConfig& cfg) {
  // Actions: 0 forward, 1 reset. The other action fires with 1 - success_prob.
  const int n = cfg.n_states;
  Matrix p = Matrix::Zero(2 * n, n);
  Matrix r = Matrix::Zero(n, 2);
  for (int s = 0; s < n; ++s) {
    const int fwd_next = std::min(s + 1, n - 1);
    const double fwd_reward = s == n - 1 ? cfg.large_reward : 0.0;
    for (int a = 0; a < 2; ++a) {
      const double p_fwd = a == 0 ? cfg.success_prob : 1.0 - cfg.success_prob;
      p(2 * s + a, fwd_next) += p_fwd;
      p(2 * s + a, 0) += 1.0 - p_fwd;
      r(s, a) = p_fwd * fwd_reward + (1.0 - p_fwd) * cfg.small_reward;
    }
  }
  Vector start = Vector::Zero(n);
  start(0) = 1.0;
  return TabularMdp(n, 2, std::move(p), std::move(r), std::move(start));
}

// Grid actions: 0 up, 1 right, 2 down, 3 left.
inline constexpr int kRowStep[4] = {-1, 0, 1, 0};
inline constexpr int kColStep[4] = {0, 1, 0, -1};

inline TabularMdp build_cliffwalking(const EnvConfig& cfg) {
  const int rows = cfg.rows;
  const int cols = cfg.cols;
  auto is_cliff = [&](int row, int col) { return row == rows - 1 && col > 0 && col < cols - 1; };
  // Cliff cells are never occupied: stepping onto one returns to the start.
  std::vector<int> state_of(static_cast<std::size_t>(rows * cols), -1);
  int n = 0;
  for (int row = 0; row < rows; ++row) {
    for (int col = 0; col < cols; ++col) {
      if (!is_cliff(row, col)) state_of[static_cast<std::size_t>(row * cols + col)] = n++;
    }
  }
  const int start = state_of[static_cast<std::size_t>((rows - 1) * cols)];
  const int goal = state_of[static_cast<std::size_t>((rows - 1) * cols + cols - 1)];
  Matrix p = Matrix::Zero(4 * n, n);
  Matrix r = Matrix::Zero(n, 4);
  for (int row = 0; row < rows; ++row) {
    for (int col = 0; col < cols; ++col) {
      const int s = state_of[static_cast<std::size_t>(row * cols + col)];
      if (s < 0) continue;
      for (int a = 0; a < 4; ++a) {
        const Eigen::Index idx = static_cast<Eigen::Index>(s) * 4 + a;
        if (s == goal) {
          p(idx, start) = 1.0;
          continue;
        }
        const int nr = std::clamp(row + kRowStep[a], 0, rows - 1);
        const int nc = std::clamp(col + kColStep[a], 0, cols - 1);
        if (is_cliff(nr, nc)) {
          p(idx, start) = 1.0;
          r(s, a) = cfg.cliff_reward;
        } else {
          const int t = state_of[static_cast<std::size_t>(nr * cols + nc)];
          p(idx, t) = 1.0;
          r(s, a) = t == goal ? cfg.goal_reward : cfg.step_reward;
        }
      }
    }
  }
  Vector start_dist = Vector::Zero(n);
  start_dist(start) = 1.0;
  return TabularMdp(n, 4, std::move(p), std::move(r), std::move(start_dist));
}

inline TabularMdp build_frozenlake(const EnvConfig& cfg) {
  const int rows = static_cast<int>(cfg.map.size());
  const int cols = static_cast<int>(cfg.map.front().size());
  const int n = rows * cols;
  auto cell = [&](int s) { return cfg.map[static_cast<std::size_t>(s / cols)][static_cast<std::size_t>(s % cols)]; };
  int start = 0;
  for (int s = 0; s < n; ++s) {
    if (cell(s) == 'S') start = s;
  }
  const double side = (1.0 - cfg.success_prob) / 2.0;
  Matrix p = Matrix::Zero(4 * n, n);
  Matrix r = Matrix::Zero(n, 4);
  for (int s = 0; s < n; ++s) {
    const int row = s / cols;
    const int col = s % cols;
    for (int a = 0; a < 4; ++a) {
      const Eigen::Index idx = static_cast<Eigen::Index>(s) * 4 + a;
      if (cell(s) == 'H' || cell(s) == 'G') {
        p(idx, start) = 1.0;
        continue;
      }
      const int moves[3] = {a, (a + 1) % 4, (a + 3) % 4};
      const double probs[3] = {cfg.success_prob, side, side};
      for (int k = 0; k < 3; ++k) {
        const int nr = std::clamp(row + kRowStep[moves[k]], 0, rows - 1);
        const int nc = std::clamp(col + kColStep[moves[k]], 0, cols - 1);
        const int t = nr * cols + nc;
        p(idx, t) += probs[k];
        if (cell(t) == 'G') r(s, a) += probs[k] * cfg.lake_goal_reward;
      }
    }
  }
  Vector start_dist = Vector::Zero(n);
  start_dist(start) = 1.0;
  return TabularMdp(n, 4, std::move(p), std::move(r), std::move(start_dist));
}

}  // namespace detail

inline TabularMdp build_env(const EnvConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case EnvKind::chain:
      return detail::build_chain(cfg);
    case EnvKind::cliffwalking:
      return detail::build_cliffwalking(cfg);
    case EnvKind::frozenlake:
      return detail::build_frozenlake(cfg);
  }
  throw ConfigError("unknown environment kind");
}

}  // namespace fdv
