#include "diffwin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "diffwin/kernels.hpp"

namespace diffwin {

namespace {
bool g_finite_checks = true;

constexpr double kLayerNormEps = 1e-6;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}
}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail("tensor: non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

void check_finite(const char* what, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) fail(std::string(what) + ": non-finite value");
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  const std::size_t count = numel_of(shape);
  n->shape = std::move(shape);
  n->value.assign(count, 0.0);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(count, 0.0);
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, double fill, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
  if (g_finite_checks) check_finite("constant", t.node_->value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  require(numel_of(shape) == data.size(),
          "from_data: " + shape_str(shape) + " does not match data length " +
              std::to_string(data.size()));
  if (g_finite_checks) check_finite("from_data", data);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->value.size(), 0.0);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.node_->value) v = rng.uniform(lo, hi);
  return t;
}

int Tensor::rows() const {
  return static_cast<int>(node_->value.size()) / node_->shape.back();
}

std::vector<double>& Tensor::grad() {
  require(node_->requires_grad, "grad: tensor does not require grad");
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  require(node_->requires_grad, "grad: tensor does not require grad");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::at(int i, int j) const {
  return node_->value[static_cast<std::size_t>(i) * cols() + j];
}

double Tensor::item() const {
  require(node_->value.size() == 1, "item: tensor is not a single element");
  return node_->value[0];
}

Tensor Tensor::clone_values() const {
  return Tensor::from_data(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------------------
// Tape

void Tape::set_finite_checks(bool on) { g_finite_checks = on; }
bool Tape::finite_checks() { return g_finite_checks; }

Tensor Tape::make_result(Shape shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad && !no_grad_);
}

void Tape::backward(const Tensor& loss) {
  require(loss.size() == 1, "backward: loss must be a scalar");
  bool found = false;
  for (const auto& e : entries_) {
    if (e.out.get() == loss.node()) found = true;
  }
  require(found, "backward: loss was not recorded on this tape");

  // Entry outputs are created with zeroed grads; re-zero only on repeat
  // sweeps over the same tape.
  if (backward_ran_)
    for (auto& e : entries_) std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
  backward_ran_ = true;
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->backward) it->backward();
  }
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be rank 2");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner dimensions " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
  Tensor out = make_result({m, n}, a.requires_grad() || b.requires_grad());
  kernels::matmul_nn(m, k, n, a.data(), b.data(), out.data());

  auto an = a.handle(), bn = b.handle(), on = out.handle();
  record("matmul", out, [an, bn, on, m, k, n] {
    if (an->requires_grad)
      kernels::matmul_nt(m, n, k, on->grad.data(), bn->value.data(), an->grad.data(), true);
    if (bn->requires_grad)
      kernels::matmul_tn(m, k, n, an->value.data(), on->grad.data(), bn->grad.data(), true);
  });
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul_nt: both operands must be rank 2");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  require(b.shape()[1] == k, "matmul_nt: inner dimensions " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()) + "^T");
  Tensor out = make_result({m, n}, a.requires_grad() || b.requires_grad());
  kernels::matmul_nt(m, k, n, a.data(), b.data(), out.data());

  auto an = a.handle(), bn = b.handle(), on = out.handle();
  record("matmul_nt", out, [an, bn, on, m, k, n] {
    // y = a b^T: da = g b, db = g^T a
    if (an->requires_grad)
      kernels::matmul_nn(m, n, k, on->grad.data(), bn->value.data(), an->grad.data(), true);
    if (bn->requires_grad)
      kernels::matmul_tn(m, n, k, on->grad.data(), an->value.data(), bn->grad.data(), true);
  });
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: rank-2 only");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out = make_result({n, m}, a.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[static_cast<std::size_t>(j) * m + i] = a.at(i, j);

  auto an = a.handle(), on = out.handle();
  record("transpose", out, [an, on, m, n] {
    if (!an->requires_grad) return;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        an->grad[static_cast<std::size_t>(i) * n + j] +=
            on->grad[static_cast<std::size_t>(j) * m + i];
  });
  return out;
}

Tensor Tape::softmax_rows(const Tensor& a) {
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad());
  kernels::softmax_rows(rows, cols, a.data(), out.data());

  auto an = a.handle(), on = out.handle();
  record("softmax_rows", out, [an, on, rows, cols] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += on->grad[off + j] * on->value[off + j];
      for (int j = 0; j < cols; ++j)
        an->grad[off + j] += on->value[off + j] * (on->grad[off + j] - dot);
    }
  });
  return out;
}

Tensor Tape::softmax_scaled_masked(const Tensor& a, double scale,
                                   const std::vector<std::uint8_t>* add_mask,
                                   double add_value) {
  require(std::isfinite(scale), "softmax_scaled_masked: non-finite scale");
  if (add_mask)
    require(add_mask->size() == a.size(), "softmax_scaled_masked: mask length mismatch");
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad());
  {
    std::vector<double> row(cols);
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) {
        double v = a.data()[off + j] * scale;
        if (add_mask && (*add_mask)[off + j]) v += add_value;
        row[j] = v;
      }
      kernels::serial::softmax_rows(1, cols, row.data(), out.data() + off);
    }
  }

  auto an = a.handle(), on = out.handle();
  record("softmax_scaled_masked", out, [an, on, rows, cols, scale] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += on->grad[off + j] * on->value[off + j];
      for (int j = 0; j < cols; ++j)
        an->grad[off + j] += scale * on->value[off + j] * (on->grad[off + j] - dot);
    }
  });
  return out;
}

Tensor Tape::window_mask_rows(const Tensor& phi_l, const Tensor& phi_r,
                              const std::vector<int>& seg_start,
                              const std::vector<int>& seg_end) {
  require(phi_l.shape() == phi_r.shape(), "window_mask_rows: shape mismatch");
  const int rows = phi_l.rows(), cols = phi_l.cols();
  require(static_cast<int>(seg_start.size()) == cols &&
              static_cast<int>(seg_end.size()) == cols,
          "window_mask_rows: segment bound length mismatch");
  for (int j = 0; j < cols; ++j)
    require(seg_start[j] >= 0 && seg_start[j] < cols && seg_end[j] >= 0 && seg_end[j] < cols,
            "window_mask_rows: segment bound out of range");

  Tensor out =
      make_result(phi_l.shape(), phi_l.requires_grad() || phi_r.requires_grad());
  auto scan_rows = [cols](const double* l, const double* r, double* pre_l, double* suf_l,
                          double* pre_r, double* suf_r) {
    double run_pl = 0.0, run_pr = 0.0;
    for (int j = 0; j < cols; ++j) {
      run_pl += l[j];
      pre_l[j] = run_pl;
      run_pr += r[j];
      pre_r[j] = run_pr;
    }
    double run_sl = 0.0, run_sr = 0.0;
    for (int j = cols - 1; j >= 0; --j) {
      run_sl += l[j];
      suf_l[j] = run_sl;
      run_sr += r[j];
      suf_r[j] = run_sr;
    }
  };

  {
    std::vector<double> pl(cols), sl(cols), pr(cols), sr(cols);
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      scan_rows(phi_l.data() + off, phi_r.data() + off, pl.data(), sl.data(), pr.data(),
                sr.data());
      for (int j = 0; j < cols; ++j)
        out.data()[off + j] =
            pl[seg_end[j]] * sr[seg_start[j]] + pr[seg_end[j]] * sl[seg_start[j]];
    }
  }

  auto ln = phi_l.handle(), rn = phi_r.handle(), on = out.handle();
  record("window_mask_rows", out,
         [ln, rn, on, rows, cols, seg_start, seg_end, scan_rows] {
           std::vector<double> pl(cols), sl(cols), pr(cols), sr(cols);
           std::vector<double> d_pre_l(cols), d_suf_l(cols), d_pre_r(cols), d_suf_r(cols);
           for (int i = 0; i < rows; ++i) {
             const std::size_t off = static_cast<std::size_t>(i) * cols;
             scan_rows(ln->value.data() + off, rn->value.data() + off, pl.data(), sl.data(),
                       pr.data(), sr.data());
             std::fill(d_pre_l.begin(), d_pre_l.end(), 0.0);
             std::fill(d_suf_l.begin(), d_suf_l.end(), 0.0);
             std::fill(d_pre_r.begin(), d_pre_r.end(), 0.0);
             std::fill(d_suf_r.begin(), d_suf_r.end(), 0.0);
             for (int j = 0; j < cols; ++j) {
               const double g = on->grad[off + j];
               d_pre_l[seg_end[j]] += g * sr[seg_start[j]];
               d_suf_r[seg_start[j]] += g * pl[seg_end[j]];
               d_pre_r[seg_end[j]] += g * sl[seg_start[j]];
               d_suf_l[seg_start[j]] += g * pr[seg_end[j]];
             }
             // adjoint of a prefix scan is a suffix scan and vice versa
             if (ln->requires_grad) {
               double run = 0.0;
               for (int j = cols - 1; j >= 0; --j) {
                 run += d_pre_l[j];
                 ln->grad[off + j] += run;
               }
               run = 0.0;
               for (int j = 0; j < cols; ++j) {
                 run += d_suf_l[j];
                 ln->grad[off + j] += run;
               }
             }
             if (rn->requires_grad) {
               double run = 0.0;
               for (int j = cols - 1; j >= 0; --j) {
                 run += d_pre_r[j];
                 rn->grad[off + j] += run;
               }
               run = 0.0;
               for (int j = 0; j < cols; ++j) {
                 run += d_suf_r[j];
                 rn->grad[off + j] += run;
               }
             }
           }
         });
  return out;
}

namespace {
enum class Broadcast { none, row, scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rank() <= 2 && b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  fail(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
       shape_str(b.shape()));
}
}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const Broadcast bc = broadcast_kind(a, b, "add");
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  if (bc == Broadcast::none) {
    for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] + bp[i];
  } else if (bc == Broadcast::scalar) {
    for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] + bp[0];
  } else {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        op[static_cast<std::size_t>(i) * cols + j] =
            ap[static_cast<std::size_t>(i) * cols + j] + bp[j];
  }

  auto an = a.handle(), bn = b.handle(), on = out.handle();
  record("add", out, [an, bn, on, bc, rows, cols] {
    const std::size_t n = on->grad.size();
    if (an->requires_grad)
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    if (bn->requires_grad) {
      if (bc == Broadcast::none) {
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
      } else if (bc == Broadcast::scalar) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += on->grad[i];
        bn->grad[0] += s;
      } else {
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            bn->grad[j] += on->grad[static_cast<std::size_t>(i) * cols + j];
      }
    }
  });
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const Broadcast bc = broadcast_kind(a, b, "mul");
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  if (bc == Broadcast::none) {
    for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * bp[i];
  } else if (bc == Broadcast::scalar) {
    for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * bp[0];
  } else {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        op[static_cast<std::size_t>(i) * cols + j] =
            ap[static_cast<std::size_t>(i) * cols + j] * bp[j];
  }

  auto an = a.handle(), bn = b.handle(), on = out.handle();
  record("mul", out, [an, bn, on, bc, rows, cols] {
    const std::size_t n = on->grad.size();
    if (an->requires_grad) {
      if (bc == Broadcast::none) {
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
      } else if (bc == Broadcast::scalar) {
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[0];
      } else {
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            an->grad[static_cast<std::size_t>(i) * cols + j] +=
                on->grad[static_cast<std::size_t>(i) * cols + j] * bn->value[j];
      }
    }
    if (bn->requires_grad) {
      if (bc == Broadcast::none) {
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
      } else if (bc == Broadcast::scalar) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += on->grad[i] * an->value[i];
        bn->grad[0] += s;
      } else {
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j)
            bn->grad[j] += on->grad[static_cast<std::size_t>(i) * cols + j] *
                           an->value[static_cast<std::size_t>(i) * cols + j];
      }
    }
  });
  return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
  require(std::isfinite(c), "scale: non-finite factor");
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;

  auto an = a.handle(), on = out.handle();
  record("scale", out, [an, on, c] {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
  });
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;

  auto an = a.handle(), on = out.handle();
  record("relu", out, [an, on] {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      if (an->value[i] > 0.0) an->grad[i] += on->grad[i];
  });
  return out;
}

Tensor Tape::layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  const int rows = a.rows(), cols = a.cols();
  require(static_cast<int>(gain.size()) == cols && static_cast<int>(bias.size()) == cols,
          "layer_norm: gain/bias length must equal the last dimension");
  Tensor out = make_result(a.shape(), a.requires_grad() || gain.requires_grad() ||
                                          bias.requires_grad());
  std::vector<double> mean(rows), invstd(rows);
  for (int i = 0; i < rows; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * cols;
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += a.data()[off + j];
    m /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = a.data()[off + j] - m;
      var += d * d;
    }
    var /= cols;
    mean[i] = m;
    invstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < cols; ++j)
      out.data()[off + j] = (a.data()[off + j] - m) * invstd[i] * gain.data()[j] + bias.data()[j];
  }

  auto an = a.handle(), gn = gain.handle(), bn = bias.handle(), on = out.handle();
  record("layer_norm", out,
         [an, gn, bn, on, rows, cols, mean = std::move(mean), invstd = std::move(invstd)] {
           for (int i = 0; i < rows; ++i) {
             const std::size_t off = static_cast<std::size_t>(i) * cols;
             double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
             for (int j = 0; j < cols; ++j) {
               const double xhat = (an->value[off + j] - mean[i]) * invstd[i];
               const double g = on->grad[off + j];
               if (gn->requires_grad) gn->grad[j] += g * xhat;
               if (bn->requires_grad) bn->grad[j] += g;
               const double dxhat = g * gn->value[j];
               sum_dxhat += dxhat;
               sum_dxhat_xhat += dxhat * xhat;
             }
             if (!an->requires_grad) continue;
             for (int j = 0; j < cols; ++j) {
               const double xhat = (an->value[off + j] - mean[i]) * invstd[i];
               const double dxhat = on->grad[off + j] * gn->value[j];
               an->grad[off + j] +=
                   (dxhat - sum_dxhat / cols - xhat * sum_dxhat_xhat / cols) * invstd[i];
             }
           }
         });
  return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require(table.rank() == 2, "embedding_lookup: table must be rank 2");
  require(!ids.empty(), "embedding_lookup: empty id list");
  const int vocab = table.shape()[0], dim = table.shape()[1];
  for (int id : ids)
    require(id >= 0 && id < vocab,
            "embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                std::to_string(vocab) + ")");
  Tensor out = make_result({static_cast<int>(ids.size()), dim}, table.requires_grad());
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::memcpy(out.data() + t * dim, table.data() + static_cast<std::size_t>(ids[t]) * dim,
                sizeof(double) * static_cast<std::size_t>(dim));

  auto tn = table.handle(), on = out.handle();
  record("embedding_lookup", out, [tn, on, ids, dim] {
    if (!tn->requires_grad) return;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      double* dst = tn->grad.data() + static_cast<std::size_t>(ids[t]) * dim;
      const double* src = on->grad.data() + t * dim;
      for (int j = 0; j < dim; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor Tape::cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                           int ignore_id) {
  require(logits.rank() == 2, "cross_entropy: logits must be rank 2");
  const int n = logits.shape()[0], vocab = logits.shape()[1];
  require(static_cast<int>(targets.size()) == n,
          "cross_entropy: target count does not match logit rows");
  std::vector<double> probs(logits.size());
  kernels::softmax_rows(n, vocab, logits.data(), probs.data());

  int counted = 0;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (targets[i] == ignore_id) continue;
    require(targets[i] >= 0 && targets[i] < vocab, "cross_entropy: target id out of range");
    total -= std::log(probs[static_cast<std::size_t>(i) * vocab + targets[i]]);
    ++counted;
  }
  require(counted > 0, "cross_entropy: no non-ignored targets (zero-length reduction)");
  Tensor out = make_result({1}, logits.requires_grad());
  out.data()[0] = total / counted;

  auto ln = logits.handle(), on = out.handle();
  record("cross_entropy", out,
         [ln, on, targets, ignore_id, n, vocab, counted, probs = std::move(probs)] {
           if (!ln->requires_grad) return;
           const double g = on->grad[0] / counted;
           for (int i = 0; i < n; ++i) {
             if (targets[i] == ignore_id) continue;
             const std::size_t off = static_cast<std::size_t>(i) * vocab;
             for (int j = 0; j < vocab; ++j) ln->grad[off + j] += g * probs[off + j];
             ln->grad[off + targets[i]] -= g;
           }
         });
  return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const int cols = parts[0].cols();
  int rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.cols() == cols, "concat_rows: column mismatch");
    rows += p.shape()[0];
    rg = rg || p.requires_grad();
  }
  Tensor out = make_result({rows, cols}, rg);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off, p.data(), sizeof(double) * p.size());
    off += p.size();
  }

  std::vector<std::shared_ptr<TensorNode>> hs;
  for (const auto& p : parts) hs.push_back(p.handle());
  auto on = out.handle();
  record("concat_rows", out, [hs, on] {
    std::size_t off2 = 0;
    for (const auto& h : hs) {
      if (h->requires_grad)
        for (std::size_t i = 0; i < h->value.size(); ++i) h->grad[i] += on->grad[off2 + i];
      off2 += h->value.size();
    }
  });
  return out;
}

Tensor Tape::slice_rows(const Tensor& a, int begin, int count) {
  require(a.rank() == 2, "slice_rows: rank-2 only");
  const int rows = a.shape()[0], cols = a.shape()[1];
  require(begin >= 0 && count > 0 && begin + count <= rows, "slice_rows: range out of bounds");
  Tensor out = make_result({count, cols}, a.requires_grad());
  std::memcpy(out.data(), a.data() + static_cast<std::size_t>(begin) * cols,
              sizeof(double) * out.size());

  auto an = a.handle(), on = out.handle();
  record("slice_rows", out, [an, on, begin, cols] {
    if (!an->requires_grad) return;
    const std::size_t base = static_cast<std::size_t>(begin) * cols;
    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[base + i] += on->grad[i];
  });
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const int rows = parts[0].shape()[0];
  int cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.shape()[0] == rows, "concat_cols: row mismatch");
    cols += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  Tensor out = make_result({rows, cols}, rg);
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p.shape()[1];
    for (int i = 0; i < rows; ++i)
      std::memcpy(out.data() + static_cast<std::size_t>(i) * cols + coff,
                  p.data() + static_cast<std::size_t>(i) * pc, sizeof(double) * pc);
    coff += pc;
  }

  std::vector<std::shared_ptr<TensorNode>> hs;
  for (const auto& p : parts) hs.push_back(p.handle());
  auto on = out.handle();
  record("concat_cols", out, [hs, on, rows, cols] {
    int coff2 = 0;
    for (const auto& h : hs) {
      const int pc = h->shape[1];
      if (h->requires_grad)
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < pc; ++j)
            h->grad[static_cast<std::size_t>(i) * pc + j] +=
                on->grad[static_cast<std::size_t>(i) * cols + coff2 + j];
      coff2 += pc;
    }
  });
  return out;
}

Tensor Tape::slice_cols(const Tensor& a, int begin, int count) {
  require(a.rank() == 2, "slice_cols: rank-2 only");
  const int rows = a.shape()[0], cols = a.shape()[1];
  require(begin >= 0 && count > 0 && begin + count <= cols, "slice_cols: range out of bounds");
  Tensor out = make_result({rows, count}, a.requires_grad());
  for (int i = 0; i < rows; ++i)
    std::memcpy(out.data() + static_cast<std::size_t>(i) * count,
                a.data() + static_cast<std::size_t>(i) * cols + begin, sizeof(double) * count);

  auto an = a.handle(), on = out.handle();
  record("slice_cols", out, [an, on, begin, rows, cols, count] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < count; ++j)
        an->grad[static_cast<std::size_t>(i) * cols + begin + j] +=
            on->grad[static_cast<std::size_t>(i) * count + j];
  });
  return out;
}

Tensor Tape::prefix_sum_rows(const Tensor& a) {
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (int i = 0; i < rows; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * cols;
    double run = 0.0;
    for (int j = 0; j < cols; ++j) {
      run += a.data()[off + j];
      out.data()[off + j] = run;
    }
  }

  auto an = a.handle(), on = out.handle();
  record("prefix_sum_rows", out, [an, on, rows, cols] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      double run = 0.0;
      for (int j = cols - 1; j >= 0; --j) {
        run += on->grad[off + j];
        an->grad[off + j] += run;
      }
    }
  });
  return out;
}

Tensor Tape::suffix_sum_rows(const Tensor& a) {
  const int rows = a.rows(), cols = a.cols();
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (int i = 0; i < rows; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * cols;
    double run = 0.0;
    for (int j = cols - 1; j >= 0; --j) {
      run += a.data()[off + j];
      out.data()[off + j] = run;
    }
  }

  auto an = a.handle(), on = out.handle();
  record("suffix_sum_rows", out, [an, on, rows, cols] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * cols;
      double run = 0.0;
      for (int j = 0; j < cols; ++j) {
        run += on->grad[off + j];
        an->grad[off + j] += run;
      }
    }
  });
  return out;
}

Tensor Tape::gather_cols(const Tensor& a, const std::vector<int>& src_col) {
  const int rows = a.rows(), cols = a.cols();
  const int out_cols = static_cast<int>(src_col.size());
  require(out_cols > 0, "gather_cols: empty index list");
  for (int c : src_col)
    require(c >= 0 && c < cols, "gather_cols: source column out of range");
  Shape out_shape = a.shape();
  out_shape.back() = out_cols;
  Tensor out = make_result(out_shape, a.requires_grad());
  for (int i = 0; i < rows; ++i) {
    const std::size_t in_off = static_cast<std::size_t>(i) * cols;
    const std::size_t out_off = static_cast<std::size_t>(i) * out_cols;
    for (int j = 0; j < out_cols; ++j) out.data()[out_off + j] = a.data()[in_off + src_col[j]];
  }

  auto an = a.handle(), on = out.handle();
  record("gather_cols", out, [an, on, src_col, rows, cols, out_cols] {
    if (!an->requires_grad) return;
    for (int i = 0; i < rows; ++i) {
      const std::size_t in_off = static_cast<std::size_t>(i) * cols;
      const std::size_t out_off = static_cast<std::size_t>(i) * out_cols;
      for (int j = 0; j < out_cols; ++j)
        an->grad[in_off + src_col[j]] += on->grad[out_off + j];
    }
  });
  return out;
}

Tensor Tape::add_where(const Tensor& a, const std::vector<std::uint8_t>& mask, double v) {
  require(mask.size() == a.size(), "add_where: mask length mismatch");
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = mask[i] ? a.data()[i] + v : a.data()[i];

  auto an = a.handle(), on = out.handle();
  record("add_where", out, [an, on] {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
  });
  return out;
}

Tensor Tape::dropout(const Tensor& a, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<std::uint8_t> keep(a.size());
  for (auto& k : keep) k = rng.next_double() >= rate ? 1 : 0;
  Tensor out = make_result(a.shape(), a.requires_grad());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = keep[i] ? a.data()[i] * keep_scale : 0.0;

  auto an = a.handle(), on = out.handle();
  record("dropout", out, [an, on, keep = std::move(keep), keep_scale] {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      if (keep[i]) an->grad[i] += on->grad[i] * keep_scale;
  });
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  Tensor out = make_result({1}, a.requires_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  out.data()[0] = s;

  auto an = a.handle(), on = out.handle();
  record("sum", out, [an, on] {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[0];
  });
  return out;
}

}  // namespace diffwin
