#pragma once

// One-dimensional mechanisms with binary parent and uniform noise:
//   t1: X = PA + U        t2: X = PA + 1 - U        t3: X = U (PA=0), 2 - U (PA=1)
// All three induce P(X | PA=pa) = Uniform(pa, pa + 1), but t3 reverses rank
// under intervention.

#include <string>
#include <string_view>

#include "cfot/error.hpp"

namespace cfot::closedform {

enum class Mechanism1D { t1, t2, t3 };

inline std::string_view name(Mechanism1D m) {
  switch (m) {
    case Mechanism1D::t1: return "t1";
    case Mechanism1D::t2: return "t2";
    case Mechanism1D::t3: return "t3";
  }
  return "?";
}

namespace detail {

inline void check_parent(int pa) {
  if (pa != 0 && pa != 1) throw InputError("parent must be 0 or 1, got " + std::to_string(pa));
}

inline void check_support(int pa, double x) {
  check_parent(pa);
  if (!(x >= pa && x <= pa + 1.0))
    throw InputError("x=" + std::to_string(x) + " outside support [" + std::to_string(pa) + ", " +
                     std::to_string(pa + 1) + "]");
}

}  // namespace detail

inline double apply(Mechanism1D m, int pa, double u) {
  detail::check_parent(pa);
  switch (m) {
    case Mechanism1D::t1: return pa + u;
    case Mechanism1D::t2: return pa + 1.0 - u;
    case Mechanism1D::t3: return pa == 0 ? u : 2.0 - u;
  }
  return u;
}

/// Exogenous value that reproduces x under the mechanism at pa.
inline double abduct(Mechanism1D m, int pa, double x) {
  detail::check_support(pa, x);
  switch (m) {
    case Mechanism1D::t1: return x - pa;
    case Mechanism1D::t2: return pa + 1.0 - x;
    case Mechanism1D::t3: return pa == 0 ? x : 2.0 - x;
  }
  return x;
}

inline double cf_1d(Mechanism1D m, int pa, double x, int pa_star) {
  const double u = abduct(m, pa, x);
  return apply(m, pa_star, u);
}

/// Quantile level of x under P(X | PA=pa) = Uniform(pa, pa + 1). The
/// conditional is shared by all three mechanisms.
inline double rank_1d(Mechanism1D /*m*/, int pa, double x) {
  detail::check_support(pa, x);
  return (x - pa) / 1.0;
}

/// Quantile-transport counterfactual F^{-1}_{pa*}(F_{pa}(x)).
inline double quantile_cf(int pa, double x, int pa_star) {
  detail::check_support(pa, x);
  detail::check_parent(pa_star);
  return pa_star + (x - pa);
}

}  // namespace cfot::closedform
