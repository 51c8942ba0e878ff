#include "bipars/finite_diff.hpp"

#include <cmath>
#include <stdexcept>

namespace bipars {

namespace {

double checked(double v) {
  if (!std::isfinite(v)) throw NumericError("finite-difference probe returned a non-finite value");
  return v;
}

}  // namespace

Vec finite_diff_grad(const std::function<double(const Vec&)>& fn, const Vec& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite-difference eps must be positive");
  Vec g(at.size());
  Vec x = at;
  for (Index i = 0; i < at.size(); ++i) {
    x[i] = at[i] + eps;
    const double fp = checked(fn(x));
    x[i] = at[i] - eps;
    const double fm = checked(fn(x));
    x[i] = at[i];
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

ParamVector finite_diff_grad(const std::function<double(const ParamVector&)>& fn, const ParamVector& at,
                             double eps) {
  ParamVector probe = at;
  Vec g = finite_diff_grad(
      [&](const Vec& x) {
        probe.data() = x;
        return fn(probe);
      },
      at.data(), eps);
  return ParamVector(at.layout(), std::move(g));
}

Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& fn, const Vec& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite-difference eps must be positive");
  Vec x = at;
  Mat jac;
  for (Index i = 0; i < at.size(); ++i) {
    x[i] = at[i] + eps;
    const Vec fp = fn(x);
    x[i] = at[i] - eps;
    const Vec fm = fn(x);
    x[i] = at[i];
    if (!fp.allFinite() || !fm.allFinite()) throw NumericError("finite-difference probe returned a non-finite value");
    if (i == 0) jac.resize(fp.size(), at.size());
    jac.col(i) = (fp - fm) / (2.0 * eps);
  }
  return jac;
}

double max_rel_error(const Vec& analytic, const Vec& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw ShapeError("max_rel_error: length mismatch");
  if (analytic.size() == 0) return 0.0;
  const double scale = std::max({analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>(), floor});
  return (analytic - numeric).lpNorm<Eigen::Infinity>() / scale;
}

}  // namespace bipars
