// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference oracle. It only ever calls the forward pass of
// the function under test, so it is independent of every backward rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lmkit/numerics/graph.hpp"

namespace lmkit::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input#index" of the worst entry
};

/// Builds a scalar loss from leaf vars bound to `inputs`.
using LossBuilder =
    std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline double eval_loss(const LossBuilder& build, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return build(g, vars).value()[0];
}

/// Compares reverse-mode gradients against central differences with step h.
/// With max_per_input > 0, a seeded random subset of each input is probed.
inline GradCheckResult grad_check(const LossBuilder& build,
                                  std::vector<Tensor<double>> inputs,
                                  double h = 1e-5, std::size_t max_per_input = 0,
                                  unsigned seed = 7) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t));
  Var<double> loss = build(g, vars);
  g.backward(loss);

  GradCheckResult res;
  std::mt19937 rng(seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = g.grad(vars[k]);
    std::vector<std::size_t> idx(inputs[k].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_input && idx.size() > max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_input);
    }
    for (std::size_t i : idx) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = eval_loss(build, inputs);
      inputs[k][i] = orig - h;
      const double down = eval_loss(build, inputs);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = rel_error(analytic[i], numeric);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace lmkit::testing
