#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/tensor.hpp"

namespace hieratok {

namespace detail {

inline double relative_gap(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

inline double checked(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("grad_check: non-finite ") + what);
  return v;
}

}  // namespace detail

/// Compares backpropagated gradients of a scalar function against central
/// differences with step `eps`, perturbing every coordinate of every tensor in
/// `params` (which must require grad). `f` must rebuild its graph on each call.
/// Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check_params(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                                double eps = 1e-4) {
  for (auto& p : params) p.zero_grad();
  {
    Tensor<double> y = f();
    detail::checked(y.item(), "function value");
    y.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = detail::checked(f().item(), "function value");
      values[i] = saved - eps;
      const double down = detail::checked(f().item(), "function value");
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, detail::relative_gap(detail::checked(analytic[t][i], "gradient"), numeric));
    }
  }
  return worst;
}

/// Single-input form: checks d f(x) / d x.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                         double eps = 1e-4) {
  Tensor<double> leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  return grad_check_params([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace hieratok
