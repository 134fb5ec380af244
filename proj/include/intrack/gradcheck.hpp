// Central finite-difference verification of the reverse-mode tape.
#pragma once

#include "intrack/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace intrack {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-3;  // relative
  int probes = 10;          // random coordinates per input tensor
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0;
  int probes = 0;
  bool passed = false;
};

using ScalarFunction = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-4), maximised over probes.
double relative_error(double analytic, double numeric);

/// Compares tape gradients of `fn` w.r.t. every tensor in `inputs` against
/// central differences evaluated without a tape.
GradCheckResult check_gradient(const std::string& name, const ScalarFunction& fn,
                               const std::vector<Tensor<double>>& inputs, const GradCheckOptions& options = {});

/// Every differentiable tensor op, plus InT (T=4, C=4, 8x8) and Conv-GRU
/// unrolls through the readout and binary cross-entropy.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {});

}  // namespace intrack
