#pragma once

#include "octmae/common.hpp"
#include "octmae/nn/params.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

namespace octmae::nn {

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Mat<T>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return graph != nullptr; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// creation order is a valid topological order for backpropagation.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(const Mat<T>& grad_out, const Mat<T>& out, Graph& g)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

  /// Leaf whose gradient is retained (e.g. inputs under a gradient check).
  Var<T> input(Mat<T> v) { return push(std::move(v), record_, nullptr); }

  /// Leaf bound to a parameter; the same parameter always maps to one node.
  Var<T> param(Param<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    auto v = push(p.value, record_, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var<T> emit(Mat<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool needs = false;
    if (record_)
      for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Mat<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer of `v`, zero-initialized on first access; nullptr when
  /// `v` does not participate in differentiation.
  Mat<T>* grad_ptr(Var<T> v) {
    auto& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.size() != n.value.size()) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  const Mat<T>& grad(Var<T> v) {
    auto* g = grad_ptr(v);
    if (!g) throw ConfigError("grad requested for a node that does not require gradients");
    return *g;
  }

  void backward(Var<T> root, T seed = T(1)) {
    if (!record_) throw ConfigError("backward on a graph built without recording");
    if (root.value().size() != 1) throw ConfigError("backward root must be a scalar");
    auto* g = grad_ptr(root);
    if (!g) return;
    (*g)(0, 0) += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad.size() == n.value.size() && n.grad.size() > 0) n.backward(n.grad, n.value, *this);
    }
  }

  /// Adds leaf gradients into Param::grad.
  void accumulate_param_grads() {
    for (auto& [p, id] : param_nodes_) {
      auto& n = nodes_[id];
      if (n.grad.size() == n.value.size() && n.grad.size() > 0) n.param->grad += n.grad;
    }
  }

  /// Parameter gradient of the last backward pass, or nullptr if untouched.
  const Mat<T>* param_grad(const Param<T>& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return nullptr;
    const auto& n = nodes_[it->second];
    return n.grad.size() == n.value.size() && n.grad.size() > 0 ? &n.grad : nullptr;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Param<T>* param = nullptr;
  };

  Var<T> push(Mat<T> v, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Mat<T>(), needs, std::move(fn), nullptr});
    return {this, nodes_.size() - 1};
  }

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, std::size_t> param_nodes_;
};

}  // namespace octmae::nn
