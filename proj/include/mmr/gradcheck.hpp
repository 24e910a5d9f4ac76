#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmr/nn.hpp"

namespace mmr {

struct GradCheckResult {
  std::string name;
  double rel_error = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Builds a scalar from leaf variables on a fresh tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares backward() against central differences over every input coordinate:
/// rel = ||a - n||_2 / max(||a||_2, ||n||_2, 1e-6).
GradCheckResult check_gradient(const std::string& name, const ScalarFn& f, const std::vector<Tensord>& inputs,
                               double step = 1e-5, double tol = 1e-4);

/// Same comparison for a loss over a parameter store, sampling at most
/// `per_tensor` coordinates from each parameter.
GradCheckResult check_param_gradient(const std::string& name, const ParamStore<double>& params,
                                     const std::function<Var<double>(const Bound<double>&)>& loss,
                                     std::size_t per_tensor, std::uint64_t seed, double step = 1e-5,
                                     double tol = 1e-4);

/// The full suite: every differentiable op, the encoders, and the end-to-end loss.
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 1);

}  // namespace mmr
