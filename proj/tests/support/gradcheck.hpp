#pragma once

#include <algorithm>
#include <cmath>

namespace xgram::testing {

// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero up
// to round-off from producing meaningless ratios.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central difference of f() with respect to x, restoring x afterwards.
template <class F>
double central_difference(double& x, F&& f, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace xgram::testing
