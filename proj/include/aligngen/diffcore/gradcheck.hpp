#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aligngen/diffcore/ops.hpp"
#include "aligngen/diffcore/tape.hpp"
#include "aligngen/diffcore/tensor.hpp"
#include "aligngen/errors.hpp"

namespace aligngen::ad {

struct GradReport {
  std::string op_name;
  double max_rel_err = 0.0;
  std::map<std::string, double> per_parameter;
  std::size_t checked_scalars = 0;

  bool passed(double tol) const { return max_rel_err < tol; }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor<double>>>;

// Builds a scalar from the leaves (same order as the named parameters).
using ScalarForward = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  // Check every `stride`-th scalar of each tensor (1 = all).
  std::size_t stride = 1;
};

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

namespace detail {

inline double eval_scalar(const ScalarForward& fwd, const NamedTensors& params) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, t] : params) leaves.push_back(tape.constant(t));
  Var<double> out = fwd(tape, leaves);
  if (out.value().size() != 1) throw ShapeError("gradcheck: forward must return a scalar");
  return out.value()[0];
}

}  // namespace detail

// Central-difference check of reverse-mode gradients for every parameter.
inline GradReport gradcheck(std::string op_name, const ScalarForward& fwd,
                            NamedTensors params, const GradcheckOptions& opt = {}) {
  if (opt.eps < 1e-6 || opt.eps > 1e-3) {
    throw ArgumentError("gradcheck: eps must lie in [1e-6, 1e-3]");
  }
  GradReport report;
  report.op_name = std::move(op_name);

  const double f0 = detail::eval_scalar(fwd, params);
  if (detail::eval_scalar(fwd, params) != f0) {
    throw NumericError("gradcheck(" + report.op_name + "): non-deterministic forward");
  }

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& [name, t] : params) leaves.push_back(tape.leaf(t, true));
    Var<double> out = fwd(tape, leaves);
    tape.backward(out);
    for (const auto& v : leaves) analytic.push_back(v.grad());
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    double worst = 0.0;
    Tensor<double>& theta = params[p].second;
    for (std::size_t i = 0; i < theta.size(); i += std::max<std::size_t>(1, opt.stride)) {
      const double orig = theta[i];
      theta[i] = orig + opt.eps;
      const double fp = detail::eval_scalar(fwd, params);
      theta[i] = orig - opt.eps;
      const double fm = detail::eval_scalar(fwd, params);
      theta[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      worst = std::max(worst, rel_err(analytic[p][i], numeric));
      ++report.checked_scalars;
    }
    report.per_parameter[params[p].first] = worst;
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  return report;
}

// Reduces a non-scalar output to a scalar with a fixed random projection so
// every output element contributes a distinct weight to the checked gradient.
inline Var<double> random_projection(Var<double> y, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto w = Tensor<double>::uniform(y.dims(), rng, -1.0, 1.0);
  return sum(mul(y, y.tape->constant(std::move(w))));
}

}  // namespace aligngen::ad
