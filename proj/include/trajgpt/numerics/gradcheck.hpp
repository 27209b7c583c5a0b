#pragma once

#include <functional>
#include <span>
#include <vector>

namespace trajgpt {

/// Central-difference oracle. Returns
///   max_i |analytic_i − fd_i| / (|fd_i| + 1e−8),  fd_i = (f(p + εe_i) − f(p − εe_i)) / 2ε.
/// Throws ContractViolation when f is non-finite at any probe.
double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> params, std::span<const double> analytic,
                         double eps);

/// Central-difference gradient of f at params.
std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> params, double eps);

}  // namespace trajgpt
