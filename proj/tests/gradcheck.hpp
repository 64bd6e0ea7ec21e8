#pragma once

// Central-difference gradient check shared by the test binaries.

#include "curvelane/autograd.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
  int checked = 0;
};

/// `params` are leaves; `loss` rebuilds the graph from their current values.
inline GradReport check_gradients(std::vector<curvelane::ag::Tensor<double>>& params,
                                  const std::function<curvelane::ag::Tensor<double>()>& loss, double h = 1e-6,
                                  double abs_floor = 1e-6, int max_per_param = 1 << 30) {
  for (auto& p : params) p.zero_grad();
  curvelane::ag::backward(loss());
  GradReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<double> analytic = p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0);
    const std::size_t stride = std::max<std::size_t>(1, p.size() / static_cast<std::size_t>(max_per_param));
    for (std::size_t i = 0; i < p.size(); i += stride) {
      double& v = p.mutable_values()[i];
      const double saved = v;
      v = saved + h;
      double up, down;
      {
        curvelane::ag::NoGradGuard ng;
        up = loss().item();
        v = saved - h;
        down = loss().item();
      }
      v = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), abs_floor});
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) + "] analytic " +
                    std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

}  // namespace testutil
