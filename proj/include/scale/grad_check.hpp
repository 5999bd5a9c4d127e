#pragma once

// Central-difference verification of reverse-mode gradients. 64-bit only;
// finite differences are too noisy in 32-bit.

#include <functional>
#include <span>

#include "scale/graph.hpp"

namespace scale {

// f builds a fresh scalar graph from the current parameter values.
// Returns max over all parameter entries of
//   |analytic - central_difference| / max(|analytic|, |cd|, 1e-8).
inline double grad_check(std::span<Parameter<double>* const> params,
                         const std::function<double()>& eval_loss,
                         const std::function<void()>& accumulate_grads, double step) {
  for (auto* p : params) p->zero_grad();
  accumulate_grads();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad.data);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    for (size_t e = 0; e < p.value.data.size(); ++e) {
      double saved = p.value.data[e];
      p.value.data[e] = saved + step;
      double up = eval_loss();
      p.value.data[e] = saved - step;
      double down = eval_loss();
      p.value.data[e] = saved;
      double cd = (up - down) / (2.0 * step);
      double an = analytic[pi][e];
      double denom = std::max({std::abs(an), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(an - cd) / denom);
    }
  }
  return worst;
}

// Convenience wrapper when the loss is expressed as a graph builder.
inline double grad_check(std::span<Parameter<double>* const> params,
                         const std::function<Var(Graph<double>&)>& build, double step) {
  auto eval_loss = [&]() {
    Graph<double> g(false);
    return g.value(build(g)).data[0];
  };
  auto accumulate = [&]() {
    Graph<double> g;
    Var loss = build(g);
    g.backward(loss);
  };
  return grad_check(params, eval_loss, accumulate, step);
}

}  // namespace scale
