#include "ghoststereo/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace gs {

namespace {
thread_local bool g_grad_enabled = true;
}

Array& Node::ensure_grad() {
  if (!grad_ready) {
    grad = Array::zeros(val.shape);
    grad_ready = true;
  }
  return grad;
}

void Node::accumulate_grad(const Array& g) {
  Array& dst = ensure_grad();
  const i64 n = dst.numel();
  for (i64 i = 0; i < n; ++i) dst[i] += g[i];
}

Tensor::Tensor(Array a, bool requires_grad) {
  n_ = std::make_shared<Node>();
  n_->val = std::move(a);
  n_->requires_grad = requires_grad;
}

Tensor Tensor::wrap(NodePtr n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("Tensor::item: tensor is not scalar");
  return n_->val[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_op(Array value, std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->val = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) {
      if (t.defined()) node->inputs.push_back(t.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(node);
}

void backward(const Tensor& root) {
  if (!root.defined()) throw std::logic_error("backward: undefined tensor");
  if (root.numel() != 1) throw std::logic_error("backward: root must be scalar");

  // Iterative post-order DFS to get a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad_ready) node->backward_fn(*node);
  }
}

}  // namespace gs
