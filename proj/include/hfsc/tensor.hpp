#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "hfsc/rng.hpp"

namespace hfsc {

// Up-to-4D extents, conventionally (batch, channels, height, width).
struct Shape {
  int nd = 0;
  std::array<int64_t, 4> d{1, 1, 1, 1};

  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    if (dims.size() > 4) throw std::invalid_argument("Shape: rank > 4");
    nd = static_cast<int>(dims.size());
    int i = 0;
    for (int64_t v : dims) {
      if (v < 1) throw std::invalid_argument("Shape: extent < 1");
      d[i++] = v;
    }
  }

  int64_t operator[](int i) const { return d[i]; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < nd; ++i) n *= d[i];
    return n;
  }
  bool operator==(const Shape& o) const { return nd == o.nd && d == o.d; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < nd; ++i) os << (i ? "x" : "") << d[i];
    os << ']';
    return os.str();
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII guard that disables graph construction (evaluation passes).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily; same length as value when present
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;  // adds d(this)/d(parent) * this->grad into parents

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Shared handle to a node in the autodiff graph. Cheap to copy; forward
// values are written once at construction and treated as immutable by ops.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(const Shape& s, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->shape = s;
    node_->value.assign(static_cast<size_t>(s.numel()), fill);
  }

  static Tensor from(const Shape& s, std::vector<T> vals) {
    if (static_cast<int64_t>(vals.size()) != s.numel())
      throw std::invalid_argument("Tensor::from: " + std::to_string(vals.size()) +
                                  " values for shape " + s.str());
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = s;
    t.node_->value = std::move(vals);
    return t;
  }

  static Tensor scalar(T v) { return from(Shape{1}, {v}); }

  static Tensor uniform(const Shape& s, Rng& rng, T lo, T hi) {
    Tensor t(s);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(const Shape& s, Rng& rng, T mean = 0, T stddev = 1) {
    Tensor t(s);
    for (auto& v : t.values()) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->shape.numel(); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor " + shape().str() + " not scalar");
    return node_->value[0];
  }

  bool all_finite() const {
    for (const T& v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node<T>> node() const { return node_; }
  Node<T>* raw() const { return node_.get(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// reachable node that requires grad; leaf grads are not cleared first, so
// callers control accumulation across steps via zero_grad().
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " + root.shape().str());

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS over parents.
  struct Frame {
    Node<T>* n;
    size_t next_child = 0;
  };
  std::vector<Frame> stack;
  if (root.raw()->requires_grad) {
    stack.push_back({root.raw()});
    seen.insert(root.raw());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.n->parents.size()) {
      Node<T>* child = f.n->parents[f.next_child++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) n->ensure_grad();
  root.raw()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward();
}

// Marks `out` as produced from `parents` with the given backward body.
// The closure must read out->grad and accumulate into each parent's grad.
template <typename T>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> parents,
            std::function<void()> backward_fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return;
  out.raw()->requires_grad = true;
  for (const auto& p : parents) out.raw()->parents.push_back(p.node());
  out.raw()->backward = std::move(backward_fn);
}

inline int64_t idx4(const Shape& s, int64_t n, int64_t c, int64_t y, int64_t x) {
  return ((n * s.d[1] + c) * s.d[2] + y) * s.d[3] + x;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace hfsc
