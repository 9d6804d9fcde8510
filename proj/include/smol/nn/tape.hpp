// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over row-major Eigen matrices.
//
// Every activation is a 2-D matrix. Spatial feature maps use the
// [H*W, C] layout (one row per pixel/token, channels along columns), so
// per-pixel layer norms and 1x1 convolutions are plain row operations.
#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace smol::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
};

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix<T>& out_grad)>;

  /// With `record == false` no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to a parameter; gradients accumulate straight into `p.grad`.
  Var param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    if (record_) {
      n.param = &p;
      n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf that tracks its own gradient (used by gradient checks on inputs).
  Var variable(Matrix<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Var push(Matrix<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    if (record_) {
      for (Var v : inputs) n.requires_grad = n.requires_grad || node(v).requires_grad;
      if (n.requires_grad) n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Zero-initialised on first access.
  Matrix<T>& grad_ref(Var v) {
    Node& n = node(v);
    Matrix<T>& g = n.param ? n.param->grad : n.grad;
    const auto& val = value(v);
    if (g.rows() != val.rows() || g.cols() != val.cols()) g = Matrix<T>::Zero(val.rows(), val.cols());
    return g;
  }

  const Matrix<T>& grad(Var v) const {
    const Node& n = node(v);
    return n.param ? n.param->grad : n.grad;
  }

  /// Back-propagates from a scalar (1x1) output with seed `seed`.
  void backward(Var loss, T seed = T(1)) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (value(loss).size() != 1) throw std::invalid_argument("backward expects a 1x1 output");
    if (!node(loss).requires_grad) return;
    grad_ref(loss)(0, 0) += seed;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
      n.grad.resize(0, 0);
      n.backward = nullptr;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v) {
    assert(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size());
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    assert(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size());
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  bool record_;
  std::deque<Node> nodes_;
};

}  // namespace smol::nn
