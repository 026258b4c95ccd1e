#pragma once

#include <vector>

#include "diffwin/tensor.hpp"

// Independent reference implementations used only as test oracles. They must
// stay brute-force and must not share code with the library paths they check.

namespace oracles {

// Plain ijk triple loop, C = A[m x k] * B[k x n].
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double sum = 0.0;
      for (int p = 0; p < k; ++p)
        sum += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = sum;
    }
  return c;
}

// Expected discrete window mask under independent boundary draws:
// E[1(l <= i <= r) + 1(r <= i <= l)] enumerated over all (l, r) pairs.
// O(n^3) per query row; this double sum is the definition, not the library's
// prefix-sum formulation.
inline std::vector<double> expectation_mask(const std::vector<double>& phi_left,
                                            const std::vector<double>& phi_right, int n) {
  std::vector<double> out(n, 0.0);
  for (int i = 1; i <= n; ++i) {
    double acc = 0.0;
    for (int a = 1; a <= n; ++a)
      for (int b = 1; b <= n; ++b) {
        const double p = phi_left[a - 1] * phi_right[b - 1];
        if (a <= i && i <= b) acc += p;
        if (b <= i && i <= a) acc += p;
      }
    out[i - 1] = acc;
  }
  return out;
}

// Random probability distribution over n positions.
inline std::vector<double> random_distribution(diffwin::Rng& rng, int n) {
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) {
    v = rng.next_double() + 1e-4;
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace oracles
