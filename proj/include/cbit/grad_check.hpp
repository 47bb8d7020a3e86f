#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cbit/autodiff.hpp"
#include "cbit/random.hpp"

namespace cbit {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Tensors larger than this are checked on `samples` uniformly drawn
  // coordinates instead of exhaustively.
  std::size_t sample_above = 10000;
  std::size_t samples = 200;
  // Lower bound on the relative-error denominator, so coordinates whose true
  // gradient is ~0 are judged by absolute error instead of amplified noise.
  double denominator_floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients with central differences
// (f(p+eps) - f(p-eps)) / (2 eps). `build` must register each parameter with
// Graph::param() and return a scalar; it must be deterministic (dropout off
// or seed-pinned). Parameters are perturbed in place and restored.
inline GradCheckResult grad_check(const std::function<Var(Graph&)>& build,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& opt = {}) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
    for (const auto& p : params) analytic.push_back(g.param_grad(*p.tensor));
  }
  auto eval = [&] {
    Graph g;
    return build(g).value().item();
  };

  GradCheckResult result;
  Rng rng(opt.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = *params[k].tensor;
    std::vector<std::size_t> coords;
    if (t.size() > opt.sample_above) {
      for (std::size_t i = 0; i < opt.samples; ++i) coords.push_back(rng.index(t.size()));
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(i);
    }
    for (std::size_t i : coords) {
      const double saved = t.data[i];
      t.data[i] = saved + opt.eps;
      const double up = eval();
      t.data[i] = saved - opt.eps;
      const double down = eval();
      t.data[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = analytic[k].data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = params[k].name;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cbit
