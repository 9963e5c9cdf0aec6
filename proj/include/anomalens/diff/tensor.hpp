#pragma once

// Reverse-mode differentiation over dense n-d arrays.
//
// A Tensor is a shared handle to a graph node. Operations record a backward
// closure on their result when any input requires a gradient; backward()
// replays the closures in reverse topological order and accumulates into
// every reachable node's gradient buffer. Parameters are leaves whose
// gradients persist until zero_grad().

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "anomalens/common.hpp"

namespace anomalens::diff {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph recording on this thread for its lifetime.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<T> values) {
    require(values.size() == diff::numel(shape),
            "Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto count = diff::numel(shape);
    return constant(std::move(shape), std::vector<T>(count, T(0)));
  }
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }
  static Tensor scalar(T v) { return constant({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const {
    require(numel() == 1, "item(): tensor is not a scalar");
    return node_->value[0];
  }
  void zero_grad() { node_->grad.clear(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op result. Values are checked for finiteness; the backward
/// closure is attached only when some parent requires a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  for (const T& v : values)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(values);
  require(n->value.size() == numel(n->shape), std::string(op) + ": result size mismatch");
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs && grad_enabled()) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Accumulates d(root)/d(node) into every reachable node requiring a gradient.
template <class T>
void backward(const Tensor<T>& root, T seed = T(1)) {
  require(root.numel() == 1, "backward(): root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate gradients are not needed after the sweep.
  for (Node<T>* n : order)
    if (n->backward) n->grad.clear();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives.

template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.numel(), "reshape: element count mismatch " + shape_str(a.shape()) +
                                         " -> " + shape_str(shape));
  auto pa = a.ptr();
  return make_result<T>("reshape", std::move(shape), std::vector<T>(a.values().begin(), a.values().end()),
                        {a}, [pa](Node<T>& out) {
                          T* g = pa->grad_buffer();
                          for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                        });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result<T>("add", a.shape(), std::move(v), {a, b}, [pa, pb](Node<T>& out) {
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result<T>("sub", a.shape(), std::move(v), {a, b}, [pa, pb](Node<T>& out) {
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result<T>("mul", a.shape(), std::move(v), {a, b}, [pa, pb](Node<T>& out) {
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * a.values()[i];
  auto pa = a.ptr();
  return make_result<T>("scale", a.shape(), std::move(v), {a}, [pa, c](Node<T>& out) {
    T* g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += c * out.grad[i];
  });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * a.values()[i];
  auto pa = a.ptr();
  return make_result<T>("square", a.shape(), std::move(v), {a}, [pa](Node<T>& out) {
    T* g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += T(2) * pa->value[i] * out.grad[i];
  });
}

/// ReLU; the gradient at exactly 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
  auto pa = a.ptr();
  return make_result<T>("relu", a.shape(), std::move(v), {a}, [pa](Node<T>& out) {
    T* g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      if (pa->value[i] > T(0)) g[i] += out.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  auto pa = a.ptr();
  return make_result<T>("sum", {1}, {s}, {a}, [pa](Node<T>& out) {
    T* g = pa->grad_buffer();
    const T go = out.grad[0];
    for (std::size_t i = 0; i < pa->value.size(); ++i) g[i] += go;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Sum of squared differences against a constant target.
template <class T>
Tensor<T> sum_squared_error(const Tensor<T>& a, std::span<const T> target) {
  require(target.size() == a.numel(), "sum_squared_error: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = a.values()[i] - target[i];
    s += d * d;
  }
  auto pa = a.ptr();
  std::vector<T> tgt(target.begin(), target.end());
  return make_result<T>("sum_squared_error", {1}, {s}, {a}, [pa, tgt = std::move(tgt)](Node<T>& out) {
    T* g = pa->grad_buffer();
    const T go = out.grad[0];
    for (std::size_t i = 0; i < tgt.size(); ++i) g[i] += T(2) * (pa->value[i] - tgt[i]) * go;
  });
}

/// a[M,K] x b[K,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> v(static_cast<std::size_t>(M) * N);
  MatMap<T>(v.data(), M, N).noalias() =
      ConstMatMap<T>(a.values().data(), M, K) * ConstMatMap<T>(b.values().data(), K, N);
  auto pa = a.ptr(), pb = b.ptr();
  return make_result<T>("matmul", {M, N}, std::move(v), {a, b}, [pa, pb, M, K, N](Node<T>& out) {
    ConstMatMap<T> go(out.grad.data(), M, N);
    if (pa->requires_grad)
      MatMap<T>(pa->grad_buffer(), M, K).noalias() += go * ConstMatMap<T>(pb->value.data(), K, N).transpose();
    if (pb->requires_grad)
      MatMap<T>(pb->grad_buffer(), K, N).noalias() += ConstMatMap<T>(pa->value.data(), M, K).transpose() * go;
  });
}

/// Identity on the way forward only where it matters: the result carries
/// `replacement` values while the gradient flows to `a` unchanged.
template <class T>
Tensor<T> straight_through(const Tensor<T>& a, std::vector<T> replacement) {
  require(replacement.size() == a.numel(), "straight_through: size mismatch");
  auto pa = a.ptr();
  return make_result<T>("straight_through", a.shape(), std::move(replacement), {a}, [pa](Node<T>& out) {
    T* g = pa->grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

}  // namespace anomalens::diff
