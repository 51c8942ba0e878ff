#pragma once

#include "bipars/tensor.hpp"

#include <functional>

namespace bipars {

/// Central-difference gradient, one coordinate at a time.
/// Throws NumericError if the function returns a non-finite value.
ParamVector finite_diff_grad(const std::function<double(const ParamVector&)>& fn, const ParamVector& at,
                             double eps);

Vec finite_diff_grad(const std::function<double(const Vec&)>& fn, const Vec& at, double eps);

/// Central-difference Jacobian of a vector-valued map; column j is d f / d x_j.
Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& fn, const Vec& at, double eps);

/// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor). Scale-aware so that
/// near-zero coordinates in a non-trivial gradient do not blow up the ratio.
double max_rel_error(const Vec& analytic, const Vec& numeric, double floor = 1e-12);

}  // namespace bipars
