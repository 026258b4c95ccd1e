#include "diffwin/windowmask.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <stdexcept>

namespace diffwin::windowmask {

namespace {

constexpr double kMaskedScore = -1e9;

std::vector<std::uint8_t> strict_upper_bytes(int m, int n) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m) * n, 0);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < n; ++j) bytes[static_cast<std::size_t>(i) * n + j] = 1;
  return bytes;
}

std::vector<std::uint8_t> expand_key_mask(int m, int n, const std::vector<std::uint8_t>& key) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m) * n, 0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) bytes[static_cast<std::size_t>(i) * n + j] = key[j];
  return bytes;
}

}  // namespace

const StructureMatrices& build_structure(int n, int b) {
  if (n < 1) throw std::invalid_argument("build_structure: n must be >= 1");
  if (b < 1 || b > n) throw std::invalid_argument("build_structure: need 1 <= b <= n");

  static std::mutex mu;
  static std::map<std::pair<int, int>, std::unique_ptr<StructureMatrices>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[{n, b}];
  if (!slot) {
    auto s = std::make_unique<StructureMatrices>();
    s->n = n;
    s->b = b;
    s->L.assign(static_cast<std::size_t>(n) * n, 0.0);
    s->J.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 1; i <= n; ++i) {
      for (int j = 1; j <= n; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i - 1) * n + (j - 1);
        if (i <= j) s->L[idx] = 1.0;
        if (i <= b * ((j + b - 1) / b)) s->J[idx] = 1.0;
      }
    }
    slot = std::move(s);
  }
  return *slot;
}

BoundaryScores boundary_scores_projected(Tape& tape, const Tensor& QL, const Tensor& KL,
                                         const Tensor& QR, const Tensor& KR, bool causal,
                                         const std::vector<std::uint8_t>* key_invalid) {
  const int m = QL.shape()[0];
  const int n = KL.shape()[0];
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(QL.shape()[1]));

  std::vector<std::uint8_t> bytes;
  if (causal) {
    if (m != n) throw std::invalid_argument("boundary_scores: causal needs m == n");
    bytes = strict_upper_bytes(m, n);
  }
  if (key_invalid) {
    if (bytes.empty()) bytes.assign(static_cast<std::size_t>(m) * n, 0);
    const auto key_bytes = expand_key_mask(m, n, *key_invalid);
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] |= key_bytes[i];
  }
  const std::vector<std::uint8_t>* mask = bytes.empty() ? nullptr : &bytes;

  auto one_side = [&](const Tensor& q, const Tensor& k) {
    return tape.softmax_scaled_masked(tape.matmul_nt(q, k), inv_sqrt, mask, kMaskedScore);
  };
  return {one_side(QL, KL), one_side(QR, KR)};
}

BoundaryScores boundary_scores(Tape& tape, const Tensor& Q, const Tensor& K,
                               const Tensor& Wlq, const Tensor& Wlk, const Tensor& Wrq,
                               const Tensor& Wrk, bool causal) {
  return boundary_scores_projected(tape, tape.matmul(Q, Wlq), tape.matmul(K, Wlk),
                                   tape.matmul(Q, Wrq), tape.matmul(K, Wrk), causal);
}

MaskMatrix soft_mask(Tape& tape, const BoundaryScores& bs) {
  // m = (phi_l^T L) .* (phi_r^T L^T) + (phi_r^T L) .* (phi_l^T L^T), with the
  // L products realized as row prefix/suffix scans.
  const int n = bs.phi_left.cols();
  std::vector<int> idx(n);
  for (int j = 0; j < n; ++j) idx[j] = j;
  return {tape.window_mask_rows(bs.phi_left, bs.phi_right, idx, idx), MaskMode::soft_token, 1};
}

MaskMatrix segment_soft_mask(Tape& tape, const BoundaryScores& bs, int segment_size) {
  const int n = bs.phi_left.cols();
  if (segment_size < 1) throw std::invalid_argument("segment_soft_mask: segment size must be >= 1");
  const int b = std::min(segment_size, n);

  // phi^T J picks the prefix sum at each position's segment end (clamped to
  // n for a short tail); phi^T J^T picks the suffix sum at the segment start.
  std::vector<int> seg_end(n), seg_start(n);
  for (int j = 0; j < n; ++j) {
    const int seg = j / b;  // 0-based segment index
    seg_end[j] = std::min((seg + 1) * b, n) - 1;
    seg_start[j] = seg * b;
  }
  return {tape.window_mask_rows(bs.phi_left, bs.phi_right, seg_start, seg_end),
          MaskMode::soft_segment, b};
}

std::vector<double> discrete_mask(int l, int r, int n) {
  if (l < 1 || l > n || r < 1 || r > n)
    throw std::invalid_argument("discrete_mask: boundary index out of range");
  const StructureMatrices& s = build_structure(n, 1);

  std::vector<double> phi_l(n, 0.0), phi_r(n, 0.0);
  phi_l[l - 1] = 1.0;
  phi_r[r - 1] = 1.0;
  std::vector<double> f(n, 0.0), g(n, 0.0), mask(n, 0.0);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      f[j] += phi_l[i] * s.L[static_cast<std::size_t>(i) * n + j];
      g[j] += phi_r[i] * s.L[static_cast<std::size_t>(j) * n + i];  // L^T
    }
    mask[j] = f[j] * g[j];
  }
  return mask;
}

void write_mask_csv(std::ostream& os, const double* data, int rows, int cols) {
  os << "query_index";
  for (int j = 1; j <= cols; ++j) os << ",pos_" << j;
  os << "\n";
  char buf[64];
  for (int i = 0; i < rows; ++i) {
    os << i + 1;
    for (int j = 0; j < cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data[static_cast<std::size_t>(i) * cols + j]);
      os << ',' << buf;
    }
    os << "\n";
  }
}

}  // namespace diffwin::windowmask
