#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "rgbt/tensor.hpp"

namespace rgbt {

// Reverse-mode tape node. Graphs are built define-by-run; backward() walks
// the DAG in reverse topological order and accumulates into leaf grads.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool is_leaf = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_op;  // scatter this->grad into parents
  std::string name;  // set for parameters

  Tensor& g() {
    if (grad.v.empty()) grad = Tensor(value.shape);
    return grad;
  }
  void zero_grad() {
    if (!grad.v.empty()) grad.fill(0.0);
  }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Tensor t, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  return n;
}

inline Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(out);
  bool need = false;
  for (const auto& p : parents)
    if (p->requires_grad) need = true;
  n->requires_grad = need;
  if (need) {
    n->parents = std::move(parents);
    n->backward_op = std::move(bw);
  }
  return n;
}

// Accumulate into a parent only if it participates in the backward pass.
inline void accum(const Var& p, const Tensor& delta) {
  if (!p->requires_grad) return;
  Tensor& g = p->g();
  for (int64_t i = 0; i < delta.numel(); ++i) g[i] += delta[i];
}

inline void backward(const Var& root) {
  // iterative topo sort (DFS post-order)
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !p->is_leaf && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // order is post-order: parents before children; walk in reverse
  Tensor& g0 = root->g();
  if (root->value.numel() == 1) g0[0] = 1.0;
  else g0.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_op && !n->grad.v.empty()) n->backward_op(*n);
  }
}

}  // namespace rgbt
