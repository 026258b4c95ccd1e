#include "diffwin/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace diffwin::kernels {

namespace {

// Shared row bodies. Both the serial and the OpenMP entry points call these,
// which pins down one reduction order (ascending k) per output element.

inline void row_nn(int k, int n, const double* arow, const double* b, double* crow,
                   bool accumulate) {
  if (!accumulate) std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(n));
  for (int p = 0; p < k; ++p) {
    const double av = arow[p];
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void row_nt(int k, int n, const double* arow, const double* b, double* crow,
                   bool accumulate) {
  for (int j = 0; j < n; ++j) {
    const double* brow = b + static_cast<std::size_t>(j) * k;
    double sum = 0.0;
    for (int p = 0; p < k; ++p) sum += arow[p] * brow[p];
    crow[j] = accumulate ? crow[j] + sum : sum;
  }
}

// One output row of C = A^T * B (row p of C gathers column p of A).
inline void row_tn(int m, int k, int n, int p, const double* a, const double* b,
                   double* crow, bool accumulate) {
  if (!accumulate) std::memset(crow, 0, sizeof(double) * static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i) {
    const double av = a[static_cast<std::size_t>(i) * k + p];
    const double* brow = b + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void row_softmax(int cols, const double* in, double* out) {
  double mx = in[0];
  for (int j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
  double denom = 0.0;
  for (int j = 0; j < cols; ++j) {
    const double e = std::exp(in[j] - mx);
    out[j] = e;
    denom += e;
  }
  const double inv = 1.0 / denom;
  for (int j = 0; j < cols; ++j) out[j] *= inv;
}

// Below this many multiply-adds the fork/join overhead dominates; the
// dispatch happens before any OpenMP construct so small calls never touch
// the runtime.
constexpr long long kParallelFlopCutoff = 256LL * 1024;

}  // namespace

void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  if (static_cast<long long>(m) * k * n < kParallelFlopCutoff || m == 1) {
    serial::matmul_nn(m, k, n, a, b, c, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    row_nn(k, n, a + static_cast<std::size_t>(i) * k, b,
           c + static_cast<std::size_t>(i) * n, accumulate);
  }
}

void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  if (static_cast<long long>(m) * k * n < kParallelFlopCutoff || m == 1) {
    serial::matmul_nt(m, k, n, a, b, c, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    row_nt(k, n, a + static_cast<std::size_t>(i) * k, b,
           c + static_cast<std::size_t>(i) * n, accumulate);
  }
}

void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  if (static_cast<long long>(m) * k * n < kParallelFlopCutoff || k == 1) {
    serial::matmul_tn(m, k, n, a, b, c, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int p = 0; p < k; ++p) {
    row_tn(m, k, n, p, a, b, c + static_cast<std::size_t>(p) * n, accumulate);
  }
}

void softmax_rows(int rows, int cols, const double* in, double* out) {
  if (rows == 1 || static_cast<long long>(rows) * cols < 16384) {
    serial::softmax_rows(rows, cols, in, out);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i) {
    row_softmax(cols, in + static_cast<std::size_t>(i) * cols,
                out + static_cast<std::size_t>(i) * cols);
  }
}

namespace serial {

void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    row_nn(k, n, a + static_cast<std::size_t>(i) * k, b,
           c + static_cast<std::size_t>(i) * n, accumulate);
  }
}

void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    row_nt(k, n, a + static_cast<std::size_t>(i) * k, b,
           c + static_cast<std::size_t>(i) * n, accumulate);
  }
}

void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate) {
  for (int p = 0; p < k; ++p) {
    row_tn(m, k, n, p, a, b, c + static_cast<std::size_t>(p) * n, accumulate);
  }
}

void softmax_rows(int rows, int cols, const double* in, double* out) {
  for (int i = 0; i < rows; ++i) {
    row_softmax(cols, in + static_cast<std::size_t>(i) * cols,
                out + static_cast<std::size_t>(i) * cols);
  }
}

}  // namespace serial

}  // namespace diffwin::kernels
