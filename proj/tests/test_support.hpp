#pragma once

// Shared fixtures and the finite-difference oracle used by the gradient tests.
// The oracle only calls the model's forward pass; it never touches backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "rbc/model.hpp"

namespace rbc::testing {

inline ArchConfig tiny_arch(int size = 4) {
  ArchConfig a;
  a.height = a.width = size;
  a.width0 = 4;
  a.width1 = 5;
  a.width2 = 6;
  return a;
}

template <typename T>
Tensor<T> random_image(int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> t(c, h, w);
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

/// Random biases so the ReLUs see both signs and the head is not degenerate.
inline void jitter_biases(SegModel<double>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& l : m.layers)
    for (auto& b : l.bias) b = n(rng);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Central differences of `loss(model)` over every parameter, compared with
/// `analytic`. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult check_gradients(SegModel<double> model, const Gradients<double>& analytic,
                                       const std::function<double(const SegModel<double>&)>& loss,
                                       double step = 1e-5, double floor = 1e-6) {
  GradCheckResult r;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto probe = [&](std::vector<double>& params, const std::vector<double>& grad, const char* kind) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double keep = params[i];
        params[i] = keep + step;
        const double up = loss(model);
        params[i] = keep - step;
        const double down = loss(model);
        params[i] = keep;
        const double numeric = (up - down) / (2 * step);
        const double a = grad[i];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > r.max_rel_error) {
          r.max_rel_error = rel;
          r.worst = std::string(layer_name(static_cast<int>(l))) + "." + kind + "[" + std::to_string(i) +
                    "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
        }
      }
    };
    probe(model.layers[l].weight, analytic.weight[l], "w");
    probe(model.layers[l].bias, analytic.bias[l], "b");
  }
  return r;
}

}  // namespace rbc::testing
