#pragma once

// Central-finite-difference gradient verification. The relative error of an
// element is |analytic - numeric| / max(1, |analytic|, |numeric|), i.e.
// absolute error for small gradients and relative error for large ones.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/tensor.hpp"

namespace vdp {

struct GradCheckParam {
  std::string name;
  Tensor value;  // leaf parameter; perturbed in place during the check
};

struct GradCheckResult {
  bool pass = false;
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_param;  // name -> max rel error
};

// Compares a precomputed gradient map against central differences of f.
// f must rebuild its value from the current parameter contents on each call.
inline GradCheckResult grad_check_against(const std::function<double()>& f,
                                          const std::vector<GradCheckParam>& params,
                                          const Gradients& analytic, double step = 1e-3,
                                          double tolerance = 1e-4) {
  GradCheckResult report;
  for (const auto& p : params) {
    const std::vector<double>* grad = analytic.find(p.value);
    std::vector<double>& data = const_cast<Tensor&>(p.value).mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double fp = f();
      data[i] = saved - step;
      const double fm = f();
      data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: objective is non-finite near parameter '" + p.name + "'");
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = grad ? (*grad)[i] : 0.0;
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    report.per_param.emplace_back(p.name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

// Builds the graph once for the analytic gradient, then sweeps central
// differences. f() must return a rank-0 tensor.
inline GradCheckResult grad_check(const std::function<Tensor()>& f,
                                  const std::vector<GradCheckParam>& params, double step = 1e-3,
                                  double tolerance = 1e-4) {
  Tensor out = f();
  if (!std::isfinite(out.value())) throw NumericError("grad_check: objective is non-finite");
  Gradients analytic = backward(out);
  auto value_fn = [&f]() {
    NoGradGuard no_grad;
    return f().value();
  };
  return grad_check_against(value_fn, params, analytic, step, tolerance);
}

}  // namespace vdp
