#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "univa/common.h"

// Minimal reverse-mode differentiation over dense row-major matrices of doubles.
// Every value is 2-D; scalars are 1x1 and row vectors are 1xN.
namespace univa::ag {

struct Node {
  int rows = 0;
  int cols = 0;
  Vec value;
  Vec grad;  // allocated on demand for nodes that require grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(int rows, int cols, Vec values);
  static Tensor zeros(int rows, int cols);
  static Tensor parameter(int rows, int cols, Vec values);
  static Tensor scalar(double v) { return constant(1, 1, {v}); }
  static Tensor row(Vec values);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  size_t size() const { return node_->value.size(); }
  const Vec& value() const { return node_->value; }
  Vec& mutable_value() { return node_->value; }
  const Vec& grad() const { return node_->grad; }
  Vec& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  double at(int r, int c) const { return node_->value[static_cast<size_t>(r) * cols() + c]; }
  double item() const { return node_->value.at(0); }
  std::span<const double> row_span(int r) const {
    return {node_->value.data() + static_cast<size_t>(r) * cols(), static_cast<size_t>(cols())};
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording for the guard's lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);      // broadcast 1xC over rows
Tensor mul_scalar(const Tensor& a, const Tensor& s);     // broadcast 1x1
Tensor scale(const Tensor& a, double s);
Tensor add_const(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);       // zero gradient outside (lo, hi)
Tensor minimum(const Tensor& a, const Tensor& b);        // ties route gradient to `a`
Tensor softmax_rows(const Tensor& a, bool causal = false);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-5);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor pick(const Tensor& a, int r, int c);
Tensor sum(const Tensor& a);
Tensor sum_scalars(std::span<const Tensor> scalars);

}  // namespace univa::ag
