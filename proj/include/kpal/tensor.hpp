#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpal/rng.hpp"

namespace kpal {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
class Tape;

// Dense row-major tensor. Copies are shallow: they share data and grad
// storage, so a tensor captured by a backward closure sees gradients
// accumulated through any alias.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  int node_id = -1;  // position in the recording tape, -1 if untracked

  Tensor() = default;

  static Tensor zeros(const Shape& s) {
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<T>>(shape_numel(s), T(0));
    return t;
  }

  static Tensor full(const Shape& s, T v) {
    Tensor t = zeros(s);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(const Shape& s, std::vector<T> values) {
    if (values.size() != shape_numel(s))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(s);
    for (auto& v : *t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  std::size_t numel() const { return data ? data->size() : 0; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T* gptr() { return grad ? grad->data() : nullptr; }

  T& operator[](std::size_t i) { return (*data)[i]; }
  const T& operator[](std::size_t i) const { return (*data)[i]; }

  bool is_scalar() const { return numel() == 1; }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg && !grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
    if (!rg) grad.reset();
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Deep copy of values (and gradient buffer if present).
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    if (grad) t.grad = std::make_shared<std::vector<T>>(*grad);
    t.requires_grad = requires_grad;
    return t;
  }

  // View with a new shape; shares data and grad so gradients flow without
  // a tape node.
  Tensor reshaped(const Shape& s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape = s;
    return t;
  }

  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape.size()); }
};

// Reverse-mode tape. Ops append nodes in construction order, which is
// topological by construction; backward() visits each node exactly once in
// reverse.
template <typename T>
class Tape {
 public:
  int record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Tensor<T>& loss) {
    if (!loss.is_scalar())
      throw ValueError("backward requires a scalar loss, got shape " +
                       shape_str(loss.shape));
    if (!loss.grad) throw ValueError("backward on a loss with no grad buffer");
    (*loss.grad)[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Marks an op output: tracked iff a tape is active and any input needs grad.
template <typename T>
Tensor<T> make_output(Tape<T>* tape, const Shape& s, bool any_input_grad) {
  Tensor<T> out = Tensor<T>::zeros(s);
  if (tape != nullptr && any_input_grad) out.set_requires_grad(true);
  return out;
}

template <typename T>
void sgd_step(const std::vector<Tensor<T>*>& params, T lr) {
  for (Tensor<T>* p : params) {
    if (!p->grad)
      throw ValueError("sgd_step: parameter has no gradient populated");
    T* d = p->ptr();
    const T* g = p->grad->data();
    const std::size_t n = p->numel();
    for (std::size_t i = 0; i < n; ++i) d[i] -= lr * g[i];
  }
}

template <typename T>
void zero_grads(const std::vector<Tensor<T>*>& params) {
  for (Tensor<T>* p : params) p->zero_grad();
}

}  // namespace kpal
