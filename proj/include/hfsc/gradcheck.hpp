#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hfsc/tensor.hpp"

namespace hfsc {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::string worst;  // "param[i]: analytic=.. numeric=.."
  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Central-difference check of d(loss)/d(inputs). `fn` must rebuild the graph
// from the given leaves on every call and return a scalar. Run with T=double;
// float's ~1e-7 roundoff swamps the h^2 truncation term.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
                           std::vector<Tensor<T>>& inputs, T h = T(1e-5)) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<T> loss = fn(inputs);
  backward(loss);

  GradCheckResult res;
  for (size_t pi = 0; pi < inputs.size(); ++pi) {
    auto& in = inputs[pi];
    const auto analytic = in.grad();  // copy: fn re-runs will not disturb it
    for (int64_t j = 0; j < in.numel(); ++j) {
      const T saved = in.values()[j];
      in.values()[j] = saved + h;
      const T fp = fn(inputs).item();
      in.values()[j] = saved - h;
      const T fm = fn(inputs).item();
      in.values()[j] = saved;
      const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[j]);
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(pi) + "[" + std::to_string(j) + "]: analytic=" +
                    std::to_string(a) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace hfsc
