// One improvement step on a three-armed bandit for a few divergences.
#include <fmt/format.h>

#include "fdiv/fdiv.hpp"

int main() {
  const fdv::DiscreteDistribution q{0.2, 0.3, 0.5};
  fdv::Vector values(3);
  values << 1.0, 0.0, 0.4;
  for (double alpha : {-5.0, 0.0, 1.0, 2.0, 10.0}) {
    const fdv::BanditInstance<fdv::AlphaDivergence> inst(q, values, 0.5, fdv::AlphaDivergence(alpha));
    const auto [pi, sol] = fdv::bandit_update(inst);
    fmt::print("alpha={:>5}  pi=({:.4f}, {:.4f}, {:.4f})  lambda={:.4f}\n", alpha, pi[0], pi[1], pi[2], sol.lambda);
  }
}
