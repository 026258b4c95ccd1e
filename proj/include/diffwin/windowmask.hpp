#pragma once

#include <iosfwd>
#include <vector>

#include "diffwin/tensor.hpp"

// Window masks over key positions: the discrete interval form, the trainable
// soft form built from boundary confidence distributions, and the
// segment-shared variant. Position math is 1-based to match the usual
// convention for interval endpoints; everything else in the library is
// 0-based.

namespace diffwin::windowmask {

// L[i,j] = 1 iff i <= j (unit upper triangular).
// J[i,j] = 1 iff i <= b * ceil(j / b); J with b == 1 equals L.
struct StructureMatrices {
  int n = 0;
  int b = 1;
  std::vector<double> L;  // n x n
  std::vector<double> J;  // n x n
};

// Cached per (n, b); the returned reference stays valid for process lifetime.
const StructureMatrices& build_structure(int n, int b);

// Per-query distributions over key positions for the left and right window
// boundaries. Rows are softmax outputs and sum to 1.
struct BoundaryScores {
  Tensor phi_left;   // m x n
  Tensor phi_right;  // m x n
};

// phi_left  = softmax_rows((Q Wlq)(K Wlk)^T / sqrt(p)), p = projected width;
// phi_right analogously. With causal set, entries j > i are pushed to -1e9
// before the softmax so each query's distributions live on its visible
// prefix (requires square m == n).
BoundaryScores boundary_scores(Tape& tape, const Tensor& Q, const Tensor& K,
                               const Tensor& Wlq, const Tensor& Wlk, const Tensor& Wrq,
                               const Tensor& Wrk, bool causal = false);

// Variant over already-projected boundary inputs (used per attention head).
// key_invalid, when given, marks key columns to exclude (padding).
BoundaryScores boundary_scores_projected(Tape& tape, const Tensor& QL, const Tensor& KL,
                                         const Tensor& QR, const Tensor& KR, bool causal,
                                         const std::vector<std::uint8_t>* key_invalid = nullptr);

enum class MaskMode { discrete, soft_token, soft_segment };

struct MaskMatrix {
  Tensor values;  // m x n, entries in [0, 2] for the soft modes
  MaskMode mode = MaskMode::soft_token;
  int segment_size = 1;  // meaningful iff soft_segment
};

// m = (phi_l^T L) .* (phi_r^T L^T) + (phi_r^T L) .* (phi_l^T L^T),
// realized as prefix/suffix scans per row. The first term covers l <= r, the
// swap term covers l > r.
MaskMatrix soft_mask(Tape& tape, const BoundaryScores& bs);

// Same with L replaced by the segment block matrix J: all positions of a
// length-b segment share one value. A short tail segment keeps the remainder.
MaskMatrix segment_soft_mask(Tape& tape, const BoundaryScores& bs, int segment_size);

// Discrete interval mask for 1-based boundaries, computed literally as
// (phi_l^T L) .* (phi_r^T L^T) with one-hot phi. All-zero when l > r.
std::vector<double> discrete_mask(int l, int r, int n);

// CSV with header query_index,pos_1..pos_n and 17 significant digits.
void write_mask_csv(std::ostream& os, const double* data, int rows, int cols);

}  // namespace diffwin::windowmask
