#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value in the graph is a 2-D matrix; scalars are 1x1.
// Nodes are reference counted and the graph lives exactly as long as the
// last Var that refers to its root.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rasa/error.hpp"

namespace rasa {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require gradients.
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  template <class Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] const Matrix& value() const { return node_->value; }
  [[nodiscard]] Matrix& mutable_value() { return node_->value; }
  [[nodiscard]] bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  [[nodiscard]] bool has_grad() const noexcept { return node_ && node_->grad.size() != 0; }

  /// Gradient accumulated by the last backward pass; zeros if none reached this node.
  [[nodiscard]] Matrix grad() const {
    if (has_grad()) return node_->grad;
    return Matrix::Zero(rows(), cols());
  }
  [[nodiscard]] Matrix& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  [[nodiscard]] Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Index cols() const { return node_->value.cols(); }
  [[nodiscard]] double item() const {
    require<DimensionError>(rows() == 1 && cols() == 1, "item() on a non-scalar value");
    return node_->value(0, 0);
  }

  /// Same value, cut from the graph.
  [[nodiscard]] Var detach() const { return Var(node_->value, false); }

  [[nodiscard]] const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates a graph node. The backward closure is dropped when no input
/// requires a gradient, so inference graphs carry no bookkeeping.
inline Var make_node(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

inline Var constant(Matrix value) { return Var(std::move(value), false); }

inline Var scalar(double v, bool requires_grad = false) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m), requires_grad);
}

/// Backpropagates from a scalar root. Leaf gradients accumulate across calls.
inline void backward(const Var& root) {
  require<DimensionError>(root.defined() && root.rows() == 1 && root.cols() == 1,
                          "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) {
      node->backward(*node);
    }
  }
}

}  // namespace ag

using ag::Var;

}  // namespace rasa
