#pragma once

#include <functional>
#include <vector>

#include "anomalens/diff/tensor.hpp"

namespace anomalens::diff {

struct GradcheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (step 1e-5) in double precision. The relative error of each
/// component is |a - n| / max(|a|, |n|, floor).
inline GradcheckReport gradcheck(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                 std::vector<Tensor<double>> inputs, double tolerance, double step = 1e-5,
                                 double floor = 1e-6) {
  for (auto& in : inputs) {
    in = Tensor<double>::parameter(in.shape(), std::vector<double>(in.values().begin(), in.values().end()));
  }
  const Tensor<double> out = f(inputs);
  require(out.numel() == 1, "gradcheck: function must return a scalar");
  backward(out);
  GradcheckReport r;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());
    for (double a : analytic)
      if (!std::isfinite(a)) throw NumericError("gradcheck: non-finite analytic gradient");
    auto vals = in.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double x0 = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = x0 + step;
        fp = f(inputs).item();
        vals[i] = x0 - step;
        fm = f(inputs).item();
        vals[i] = x0;
      }
      const double numeric = (fp - fm) / (2 * step);
      if (!std::isfinite(numeric)) throw NumericError("gradcheck: non-finite numeric gradient");
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
      ++r.checked;
    }
  }
  r.passed = r.max_rel_error <= tolerance;
  return r;
}

}  // namespace anomalens::diff
