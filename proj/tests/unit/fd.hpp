#pragma once

// Central finite-difference oracle shared by the gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace fd {

inline std::vector<double> central(const std::function<double(const std::vector<double>&)>& f,
                                   std::vector<double> x, double eps = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double hi = f(x);
    x[i] = keep - eps;
    const double lo = f(x);
    x[i] = keep;
    g[i] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

// Relative error with an absolute floor so near-zero entries do not blow up.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max({den, std::abs(a[i]), std::abs(b[i])});
  }
  return num / std::max(den, floor);
}

}  // namespace fd
