#pragma once

#include <cstddef>

// Dense f64 kernels behind the tensor engine. Every kernel has a serial
// reference implementation in kernels::serial and an OpenMP front door with
// the same elementwise reduction order, so parallel output is bit-identical
// to the serial reference regardless of thread count.

namespace diffwin::kernels {

// C[m x n] = (or +=) A[m x k] * B[k x n], row-major.
void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);

// C[m x n] = (or +=) A[m x k] * B[n x k]^T, row-major.
void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);

// C[k x n] = (or +=) A[m x k]^T * B[m x n], row-major.
void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);

// Row-wise softmax with per-row max subtraction. in/out may alias.
void softmax_rows(int rows, int cols, const double* in, double* out);

namespace serial {
void matmul_nn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);
void matmul_nt(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);
void matmul_tn(int m, int k, int n, const double* a, const double* b, double* c,
               bool accumulate = false);
void softmax_rows(int rows, int cols, const double* in, double* out);
}  // namespace serial

}  // namespace diffwin::kernels
