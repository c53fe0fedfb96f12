#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ghoststereo/tensor.hpp"

namespace gs {

// Reverse-mode autodiff over a dynamically recorded tape. Each op produces a
// Node holding the forward value and a closure that scatters the node's
// gradient into its inputs. Nodes own shared_ptrs to their inputs (child ->
// parent), so keeping the loss tensor alive keeps the whole graph alive.
struct Node {
  Array val;
  Array grad;
  bool requires_grad = false;
  bool grad_ready = false;  // grad buffer allocated and zeroed
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Array& ensure_grad();
  void accumulate_grad(const Array& g);
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Array a, bool requires_grad = false);

  static Tensor from_scalar(double v) { return Tensor(Array::scalar(v)); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->val.shape; }
  i64 numel() const { return n_->val.numel(); }
  int rank() const { return n_->val.rank(); }
  i64 dim(size_t i) const { return n_->val.shape[i]; }

  Array& val() { return n_->val; }
  const Array& val() const { return n_->val; }
  Array& grad() { return n_->ensure_grad(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }
  void zero_grad() { n_->grad_ready = false; n_->grad = Array(); }

  double item() const;  // scalar tensors only

  NodePtr node() const { return n_; }
  static Tensor wrap(NodePtr n);

 private:
  NodePtr n_;
};

// Runs reverse-mode accumulation from a scalar root. Gradients accumulate
// into every reachable node with requires_grad set.
void backward(const Tensor& root);

// RAII guard disabling tape recording (inference / metric evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Op construction helper: result requires grad iff recording is on and any
// input requires grad; only then is the closure attached.
Tensor make_op(Array value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

}  // namespace gs
