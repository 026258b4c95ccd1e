#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "diffwin/rng.hpp"

// Dense f64 tensors with reverse-mode automatic differentiation on an
// explicit tape. A tape is rebuilt for every forward pass; parameters are
// leaf tensors that outlive tapes and accumulate gradients across backward
// calls until zeroed.

namespace diffwin {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
void check_finite(const char* what, const std::vector<double>& v);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value iff requires_grad
  bool requires_grad = false;
  bool is_leaf = true;  // cleared when a tape op produces the node
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, double fill, bool requires_grad = false);
  // Validates finiteness and that the data length matches the shape.
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  // All leading dims collapsed; cols() is the last dim.
  int rows() const;
  int cols() const { return node_->shape.back(); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double at(int i, int j) const;  // rank-2 convenience
  double item() const;            // single-element tensor

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& handle() const { return node_; }

  // Deep copy of values (no grad, leaf).
  Tensor clone_values() const;

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
  friend class Tape;
};

// Records primitive applications in creation order; operands always precede
// their results, so backward is a single reverse sweep over the entries.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool no_grad) : no_grad_(no_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- recorded primitives -------------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a[m x k] * b[n x k]^T without materializing the transpose.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor softmax_rows(const Tensor& a);
  // softmax_rows(a * scale + add_value at mask positions); add_mask may be
  // null. One op because this is the inner loop of every attention head.
  Tensor softmax_scaled_masked(const Tensor& a, double scale,
                               const std::vector<std::uint8_t>* add_mask, double add_value);
  // Fused window-mask row kernel over boundary distributions:
  //   m[j] = pre_l[E[j]] * suf_r[S[j]] + pre_r[E[j]] * suf_l[S[j]]
  // with pre/suf the row prefix/suffix sums and S/E per-column segment
  // bounds (identity for token-level masks).
  Tensor window_mask_rows(const Tensor& phi_l, const Tensor& phi_r,
                          const std::vector<int>& seg_start,
                          const std::vector<int>& seg_end);
  Tensor add(const Tensor& a, const Tensor& b);  // shapes equal, or b a single row / scalar
  Tensor mul(const Tensor& a, const Tensor& b);  // same broadcast rules as add
  Tensor scale(const Tensor& a, double c);
  Tensor relu(const Tensor& a);
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);
  Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
  // Mean negative log-likelihood over targets != ignore_id.
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                       int ignore_id = -1);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor slice_rows(const Tensor& a, int begin, int count);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor slice_cols(const Tensor& a, int begin, int count);
  // y[., j] = sum_{i <= j} a[., i]  /  sum_{i >= j} a[., i]
  Tensor prefix_sum_rows(const Tensor& a);
  Tensor suffix_sum_rows(const Tensor& a);
  // y[., j] = a[., src_col[j]]; src_col entries may repeat.
  Tensor gather_cols(const Tensor& a, const std::vector<int>& src_col);
  // Adds v to every element where mask != 0; mask has one byte per element.
  Tensor add_where(const Tensor& a, const std::vector<std::uint8_t>& mask, double v);
  Tensor dropout(const Tensor& a, double rate, Rng& rng);
  Tensor sum(const Tensor& a);

  // --- reverse sweep -------------------------------------------------------
  // Accumulates d loss / d leaf into every reachable leaf with requires_grad.
  // Repeated calls without zero_grad accumulate.
  void backward(const Tensor& loss);

  std::size_t num_entries() const { return entries_.size(); }
  bool no_grad() const { return no_grad_; }

  // Finite-value validation of op outputs (on by default; a contract
  // violation raises std::runtime_error naming the op).
  static void set_finite_checks(bool on);
  static bool finite_checks();

 private:
  struct Entry {
    std::shared_ptr<TensorNode> out;
    std::function<void()> backward;
  };

  Tensor make_result(Shape shape, bool requires_grad);

  template <typename F>
  void record(const char* op, Tensor& out, F&& backward) {
    if (finite_checks()) check_finite(op, out.values());
    if (!out.requires_grad() || no_grad_) return;
    out.node()->is_leaf = false;
    entries_.push_back({out.handle(), std::function<void()>(std::forward<F>(backward))});
  }

  bool want_grad(const Tensor& t) const { return !no_grad_ && t.requires_grad(); }

  std::vector<Entry> entries_;
  bool no_grad_ = false;
  bool backward_ran_ = false;
};

}  // namespace diffwin
