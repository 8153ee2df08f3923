#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cofusion/error.hpp"

namespace cofusion {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient has been accumulated
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, the same way
/// framework tensors behave. Values are treated as immutable once built; the
/// only sanctioned in-place writes are parameter initialization and the
/// optimizer update, both through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor parameter(Shape shape, std::vector<double> data) {
    return Tensor(std::move(shape), std::move(data), true);
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return impl().shape[axis];
  }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl_mut().data; }
  const std::vector<double>& values() const { return impl().data; }

  double operator[](std::size_t i) const { return impl().data[i]; }

  double item() const {
    if (numel() != 1) {
      throw ArgumentError("item() needs a single-element tensor, shape is " + shape_str(shape()));
    }
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag) { impl_mut().requires_grad = flag; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }

  // Zero-filled view when no gradient has reached this tensor yet.
  std::vector<double> grad_or_zeros() const {
    return has_grad() ? impl().grad : std::vector<double>(numel(), 0.0);
  }

  void clear_grad() { impl_mut().grad.clear(); }

  // Constants silently ignore accumulation.
  void accumulate_grad(std::span<const double> g) const {
    auto& im = *impl_;
    if (!im.requires_grad) return;
    if (g.size() != im.data.size()) {
      throw DimensionError("gradient of size " + std::to_string(g.size()) + " for tensor " +
                           shape_str(im.shape));
    }
    if (im.grad.empty()) {
      im.grad.assign(g.begin(), g.end());
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) im.grad[i] += g[i];
  }

  // Allocates a zero gradient buffer so the tensor reports has_grad().
  void touch_grad() const {
    auto& im = *impl_;
    if (im.requires_grad && im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
  }

  Tensor detach() const { return Tensor(shape(), values()); }

  const void* id() const noexcept { return impl_.get(); }

 private:
  const detail::TensorImpl& impl() const {
    if (!impl_) throw StateError("use of an undefined tensor");
    return *impl_;
  }
  detail::TensorImpl& impl_mut() {
    if (!impl_) throw StateError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

enum class Mode { training, inference };

/// Tape of primitive operations recorded during one forward pass.
///
/// Constructing a Graph makes it the active tape for the current thread until
/// it is destroyed; graphs nest. Ops record a node only when the innermost
/// graph is in training mode and at least one input requires a gradient, so
/// an inference-mode graph (or no graph at all) records nothing.
class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_output)>;

  struct Node {
    std::string op;
    Tensor output;
    BackwardFn backward;
  };

  explicit Graph(Mode mode = Mode::training) : mode_(mode), parent_(current()) { current() = this; }

  ~Graph() { current() = parent_; }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  static Graph* active() noexcept { return current(); }

  static bool recording() noexcept {
    const Graph* g = current();
    return g != nullptr && g->mode_ == Mode::training;
  }

  void record(std::string op, Tensor output, BackwardFn fn) {
    nodes_.push_back(Node{std::move(op), std::move(output), std::move(fn)});
  }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The tape is
  /// released afterwards; leaf gradients keep accumulating across calls until
  /// cleared.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const double one = 1.0;
    loss.accumulate_grad(std::span<const double>(&one, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
#ifdef COFUSION_FAULT_INJECTION
      if (!fault_op().empty() && it->op == fault_op()) {
        std::vector<double> g(it->output.grad().begin(), it->output.grad().end());
        for (auto& v : g) v *= 1.5;
        it->backward(g);
        continue;
      }
#endif
      it->backward(it->output.grad());
    }
    nodes_.clear();
  }

#ifdef COFUSION_FAULT_INJECTION
  // Test builds only: scales the incoming gradient of every node named `op`.
  static std::string& fault_op() {
    static std::string op;
    return op;
  }
#endif

 private:
  static Graph*& current() noexcept {
    thread_local Graph* graph = nullptr;
    return graph;
  }

  Mode mode_;
  Graph* parent_;
  std::vector<Node> nodes_;
};

inline void backward(const Tensor& loss) {
  Graph* g = Graph::active();
  if (g == nullptr) throw StateError("backward() called without an active graph");
  g->backward(loss);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

inline bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

// Marks `out` as differentiable and appends its backward rule to the tape.
inline void record(std::string op, Tensor& out, Graph::BackwardFn fn) {
  out.set_requires_grad(true);
  Graph::active()->record(std::move(op), out, std::move(fn));
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  return Graph::recording() && any_requires_grad(inputs);
}

inline bool should_record(const std::vector<Tensor>& inputs) {
  return Graph::recording() && any_requires_grad(inputs);
}

}  // namespace detail

}  // namespace cofusion
