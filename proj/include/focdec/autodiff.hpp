#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <vector>

#include "focdec/tensor.hpp"

namespace focdec {

// Tape-based reverse-mode autodiff. Nodes are created in forward order; the
// creation stamp is a valid topological order, so backward() just replays
// reachable nodes by descending stamp.

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in scope (inference / data statistics).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  uint64_t order = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;  // accumulates this->grad into parents

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && detail::grad_mode();
    n->order = detail::node_counter()++;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& val() const { return node_->value; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.defined(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() {
    if (node_->grad.defined()) node_->grad.fill(T(0));
  }

  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
bool any_requires(std::initializer_list<const Var<T>*> vars) {
  if (!detail::grad_mode()) return false;
  for (const Var<T>* v : vars)
    if (v->defined() && v->requires_grad()) return true;
  return false;
}

/// Builds an op node. `make_backprop` is only invoked when some parent needs
/// gradients, so saved-for-backward captures are skipped during inference.
template <class T, class F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, F&& make_backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->order = detail::node_counter()++;
  bool req = false;
  if (detail::grad_mode())
    for (const auto& p : parents) req = req || p.requires_grad();
  n->requires_grad = req;
  if (req) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = make_backprop();
  }
  return Var<T>(std::move(n));
}

/// Accumulates `g_data` (flat, `n` elements) into the parent's grad if needed.
template <class T>
void accum_grad(const std::shared_ptr<Node<T>>& parent, const T* g_data, int64_t n) {
  if (!parent->requires_grad) return;
  Tensor<T>& g = parent->ensure_grad();
  T* dst = g.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g_data[i];
}

/// Reverse pass from a scalar root; seeds d(root)/d(root) = 1.
template <class T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) throw ContractError("backward: root does not require grad");
  if (root.val().size() != 1) throw ContractError("backward: root must be scalar");
  root.node()->ensure_grad()[0] += T(1);

  std::vector<Node<T>*> topo;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    topo.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(topo.begin(), topo.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->order > b->order; });
  for (Node<T>* n : topo)
    if (n->backprop && n->grad.defined()) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " +
                     b.val().shape_str());
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op<T>(std::move(out), {a, b}, [n] {
    return [n](Node<T>& self) {
      accum_grad(self.parents[0], self.grad.data(), n);
      accum_grad(self.parents[1], self.grad.data(), n);
    };
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return make_op<T>(std::move(out), {a, b}, [n] {
    return [n](Node<T>& self) {
      accum_grad(self.parents[0], self.grad.data(), n);
      if (self.parents[1]->requires_grad) {
        Tensor<T>& g = self.parents[1]->ensure_grad();
        T* dst = g.data();
        const T* src = self.grad.data();
        for (int64_t i = 0; i < n; ++i) dst[i] -= src[i];
      }
    };
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return make_op<T>(std::move(out), {a, b}, [&a, &b, n] {
    Tensor<T> av = a.val(), bv = b.val();
    return [av, bv, n](Node<T>& self) {
      const T* g = self.grad.data();
      if (self.parents[0]->requires_grad) {
        T* dst = self.parents[0]->ensure_grad().data();
        const T* pb2 = bv.data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * pb2[i];
      }
      if (self.parents[1]->requires_grad) {
        T* dst = self.parents[1]->ensure_grad().data();
        const T* pa2 = av.data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * pa2[i];
      }
    };
  });
}

template <class T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "divide");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  return make_op<T>(std::move(out), {a, b}, [&a, &b, n] {
    Tensor<T> av = a.val(), bv = b.val();
    return [av, bv, n](Node<T>& self) {
      const T* g = self.grad.data();
      const T* pa2 = av.data();
      const T* pb2 = bv.data();
      if (self.parents[0]->requires_grad) {
        T* dst = self.parents[0]->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i] / pb2[i];
      }
      if (self.parents[1]->requires_grad) {
        T* dst = self.parents[1]->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) dst[i] -= g[i] * pa2[i] / (pb2[i] * pb2[i]);
      }
    };
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  return make_op<T>(std::move(out), {a}, [n] {
    return [n](Node<T>& self) { accum_grad(self.parents[0], self.grad.data(), n); };
  });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  return make_op<T>(std::move(out), {a}, [n, c] {
    return [n, c](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      const T* g = self.grad.data();
      for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * c;
    };
  });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return mul_scalar(a, T(-1));
}

template <class T, class Fwd, class Dfn>
Var<T> unary_op(const Var<T>& a, Fwd f, Dfn dfn) {
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  T* po = out.data();
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return make_op<T>(std::move(out), {a}, [&a, n, dfn] {
    Tensor<T> av = a.val();
    return [av, n, dfn](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      const T* g = self.grad.data();
      const T* x = av.data();
      const T* y = self.value.data();
      for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * dfn(x[i], y[i]);
    };
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> tanh_op(const Var<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary_op(
      a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> abs_op(const Var<T>& a) {
  // subgradient 0 at x == 0
  return unary_op(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

// Elementwise min/max; on ties the gradient goes to the first argument.
template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "maximum");
  int64_t n = a.val().size();
  Tensor<T> out(a.shape());
  std::vector<uint8_t> pick_a(static_cast<size_t>(n));
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    pick_a[static_cast<size_t>(i)] = pa[i] >= pb[i];
    po[i] = pick_a[static_cast<size_t>(i)] ? pa[i] : pb[i];
  }
  return make_op<T>(std::move(out), {a, b}, [n, pick = std::move(pick_a)]() mutable {
    return [n, pick = std::move(pick)](Node<T>& self) {
      const T* g = self.grad.data();
      for (int s = 0; s < 2; ++s) {
        if (!self.parents[static_cast<size_t>(s)]->requires_grad) continue;
        T* dst = self.parents[static_cast<size_t>(s)]->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i)
          if (pick[static_cast<size_t>(i)] == (s == 0)) dst[i] += g[i];
      }
    };
  });
}

template <class T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "minimum");
  int64_t n = a.val().size();
  Tensor<T> out(a.shape());
  std::vector<uint8_t> pick_a(static_cast<size_t>(n));
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    pick_a[static_cast<size_t>(i)] = pa[i] <= pb[i];
    po[i] = pick_a[static_cast<size_t>(i)] ? pa[i] : pb[i];
  }
  return make_op<T>(std::move(out), {a, b}, [n, pick = std::move(pick_a)]() mutable {
    return [n, pick = std::move(pick)](Node<T>& self) {
      const T* g = self.grad.data();
      for (int s = 0; s < 2; ++s) {
        if (!self.parents[static_cast<size_t>(s)]->requires_grad) continue;
        T* dst = self.parents[static_cast<size_t>(s)]->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i)
          if (pick[static_cast<size_t>(i)] == (s == 0)) dst[i] += g[i];
      }
    };
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  int64_t n = a.val().size();
  const T* pa = a.val().data();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  return make_op<T>(Tensor<T>::scalar(acc), {a}, [n] {
    return [n](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      T g = self.grad[0];
      for (int64_t i = 0; i < n; ++i) dst[i] += g;
    };
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.val().size()));
}

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape) {
  Tensor<T> out = a.val().reshaped(std::move(shape));  // aliases the buffer
  int64_t n = out.size();
  return make_op<T>(std::move(out), {a}, [n] {
    return [n](Node<T>& self) { accum_grad(self.parents[0], self.grad.data(), n); };
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, int64_t start, int64_t len) {
  if (a.val().rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
  int64_t rows = a.dim(0), cols = a.dim(1);
  if (start < 0 || start + len > cols) throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({rows, len});
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < len; ++c) po[r * len + c] = pa[r * cols + start + c];
  return make_op<T>(std::move(out), {a}, [rows, cols, start, len] {
    return [rows, cols, start, len](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      const T* g = self.grad.data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < len; ++c) dst[r * cols + start + c] += g[r * len + c];
    };
  });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  if (a.val().rank() != 2 || b.val().rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: incompatible shapes");
  int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out({rows, ca + cb});
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < ca; ++c) po[r * (ca + cb) + c] = pa[r * ca + c];
    for (int64_t c = 0; c < cb; ++c) po[r * (ca + cb) + ca + c] = pb[r * cb + c];
  }
  return make_op<T>(std::move(out), {a, b}, [rows, ca, cb] {
    return [rows, ca, cb](Node<T>& self) {
      const T* g = self.grad.data();
      if (self.parents[0]->requires_grad) {
        T* dst = self.parents[0]->ensure_grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < ca; ++c) dst[r * ca + c] += g[r * (ca + cb) + c];
      }
      if (self.parents[1]->requires_grad) {
        T* dst = self.parents[1]->ensure_grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cb; ++c) dst[r * cb + c] += g[r * (ca + cb) + ca + c];
      }
    };
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<int64_t> indices) {
  if (a.val().rank() != 2) throw ShapeError("gather_rows: rank-2 input required");
  int64_t rows = a.dim(0), cols = a.dim(1);
  int64_t m = static_cast<int64_t>(indices.size());
  Tensor<T> out({m, cols});
  const T* pa = a.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    int64_t r = indices[static_cast<size_t>(i)];
    if (r < 0 || r >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy(pa + r * cols, pa + (r + 1) * cols, po + i * cols);
  }
  return make_op<T>(std::move(out), {a}, [cols, idx = std::move(indices)]() mutable {
    return [cols, idx = std::move(idx)](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      const T* g = self.grad.data();
      for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t c = 0; c < cols; ++c) dst[idx[i] * cols + c] += g[static_cast<int64_t>(i) * cols + c];
    };
  });
}

/// Mean binary cross-entropy between sigmoid(logits) and soft targets,
/// computed in the numerically stable logits form.
template <class T>
Var<T> bce_with_logits_mean(const Var<T>& logits, const Tensor<T>& targets) {
  if (logits.val().size() != targets.size())
    throw ShapeError("bce_with_logits_mean: size mismatch");
  int64_t n = logits.val().size();
  const T* z = logits.val().data();
  const T* y = targets.data();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T zi = z[i];
    acc += std::max(zi, T(0)) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  acc /= static_cast<T>(n);
  return make_op<T>(Tensor<T>::scalar(acc), {logits}, [&logits, targets, n] {
    Tensor<T> zv = logits.val();
    return [zv, targets, n](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dst = self.parents[0]->ensure_grad().data();
      const T* z2 = zv.data();
      const T* y2 = targets.data();
      T g = self.grad[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) {
        T zi = z2[i];
        T p = zi >= T(0) ? T(1) / (T(1) + std::exp(-zi)) : std::exp(zi) / (T(1) + std::exp(zi));
        dst[i] += g * (p - y2[i]);
      }
    };
  });
}

}  // namespace focdec
