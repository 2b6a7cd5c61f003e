#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace dar::test {

/// Central difference of f at x along coordinate i.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                           std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/// |a - n| / max(|a| + |n|, 1e-6); zero when both vanish.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
  return std::abs(analytic - numeric) / denom;
}

}  // namespace dar::test
