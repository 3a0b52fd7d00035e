// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations whose inputs
// require gradients append an entry to the calling thread's GradTape; a
// call to backward() replays the tape in reverse recording order and then
// retires it, so every recording supports exactly one backward pass.
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace avnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tensor;
template <typename T>
class GradTape;

namespace detail {

template <typename T>
struct TensorNode {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_epoch = 0;  // 0 for leaves
  std::size_t tape_index = 0;
};

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// Gradient buffer of a node, or nullptr when the node does not take part
// in differentiation.
template <typename T>
T* grad_sink(const NodePtr<T>& node) {
  if (!node || !node->requires_grad) return nullptr;
  if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
  return node->grad.data();
}

struct TensorAccess {
  template <typename T>
  static const NodePtr<T>& node(const Tensor<T>& t) {
    return t.node_;
  }
  template <typename T>
  static Tensor<T> wrap(NodePtr<T> node) {
    Tensor<T> t;
    t.node_ = std::move(node);
    return t;
  }
};

template <typename T>
const NodePtr<T>& node_of(const Tensor<T>& t) {
  return TensorAccess::node(t);
}

}  // namespace detail

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " +
                         shape_string(shape));
      }
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_numel(shape)) +
                       " elements but data has " +
                       std::to_string(data.size()));
    }
    node_->id = detail::next_tensor_id();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::uint64_t id() const { return node_->id; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Direct writes are meant for leaves (parameters, optimizer updates).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() needs a single-element tensor, got " +
                       shape_string(shape()));
    }
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  // NCHW element read.
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }
  // CHW element read.
  T at(std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = node_->shape;
    return node_->data[(c * s[1] + h) * s[2] + w];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (node_->tape_epoch != 0) {
      throw AutodiffError("requires_grad can only be changed on leaf tensors");
    }
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void drop_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the values; no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), false);
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend struct detail::TensorAccess;
  detail::NodePtr<T> node_;
};

// Disables recording on the current thread's tape for its lifetime.
template <typename T>
class NoGradGuard;

template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void(const std::vector<T>& grad_output)>;

  struct Entry {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
    detail::NodePtr<T> output;
    BackwardFn backward;
  };

  static GradTape& current() {
    thread_local GradTape tape;
    return tape;
  }

  bool recording() const { return enabled_; }
  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  // Drops the current recording without running it.
  void clear() {
    entries_.clear();
    ++epoch_;
  }

  void record(std::string_view op, std::vector<std::uint64_t> input_ids,
              const detail::NodePtr<T>& output, BackwardFn backward) {
    output->tape_epoch = epoch_;
    output->tape_index = entries_.size();
    entries_.push_back(Entry{std::string(op), std::move(input_ids), output->id,
                             output, std::move(backward)});
  }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw AutodiffError("backward on undefined tensor");
    if (loss.numel() != 1 || loss.rank() > 1) {
      throw AutodiffError("backward needs a scalar loss, got shape " +
                          shape_string(loss.shape()));
    }
    const auto& node = detail::node_of(loss);
    if (!node->requires_grad) {
      throw AutodiffError("loss does not depend on any tensor requiring grad");
    }
    if (node->tape_epoch != epoch_ || node->tape_index >= entries_.size() ||
        entries_[node->tape_index].output != node) {
      throw AutodiffError(
          "loss graph is no longer recorded; backward may run once per "
          "forward pass");
    }
    detail::grad_sink(node)[0] += T(1);
    for (std::size_t i = node->tape_index + 1; i-- > 0;) {
      Entry& e = entries_[i];
      if (e.output->grad.empty()) continue;
      e.backward(e.output->grad);
    }
    clear();
  }

 private:
  friend class NoGradGuard<T>;
  std::vector<Entry> entries_;
  std::uint64_t epoch_ = 1;
  bool enabled_ = true;
};

template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradTape<T>::current().enabled_) {
    GradTape<T>::current().enabled_ = false;
  }
  ~NoGradGuard() { GradTape<T>::current().enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  GradTape<T>::current().backward(loss);
}

namespace detail {

template <typename T>
void check_finite(std::string_view op, const std::vector<T>& values) {
#ifndef NDEBUG
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + " produced a non-finite value");
    }
  }
#else
  (void)op;
  (void)values;
#endif
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace detail

// Builds the result of an operation and, when any input takes part in
// differentiation, records `backward` on the current tape. The callback
// receives the gradient of the result and must accumulate into the inputs
// it captured (see detail::grad_sink).
template <typename T>
Tensor<T> make_op_result(std::string_view op, Shape shape, std::vector<T> data,
                         std::initializer_list<const Tensor<T>*> inputs,
                         typename GradTape<T>::BackwardFn backward) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const Tensor<T>* in : inputs) {
    inputs_finite = inputs_finite && detail::all_finite(in->data());
  }
  if (inputs_finite) detail::check_finite(op, data);
#endif
  Tensor<T> out(std::move(shape), std::move(data), false);
  GradTape<T>& tape = GradTape<T>::current();
  if (!tape.recording()) return out;
  bool needs_grad = false;
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor<T>* in : inputs) {
    needs_grad = needs_grad || in->requires_grad();
    ids.push_back(in->id());
  }
  if (!needs_grad) return out;
  const auto& node = detail::node_of(out);
  node->requires_grad = true;
  tape.record(op, std::move(ids), node, std::move(backward));
  return out;
}

// Same as above for a variable number of inputs.
template <typename T>
Tensor<T> make_op_result(std::string_view op, Shape shape, std::vector<T> data,
                         const std::vector<Tensor<T>>& inputs,
                         typename GradTape<T>::BackwardFn backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  GradTape<T>& tape = GradTape<T>::current();
  if (!tape.recording()) return out;
  bool needs_grad = false;
  std::vector<std::uint64_t> ids;
  for (const Tensor<T>& in : inputs) {
    needs_grad = needs_grad || in.requires_grad();
    ids.push_back(in.id());
  }
  if (!needs_grad) return out;
  const auto& node = detail::node_of(out);
  node->requires_grad = true;
  tape.record(op, std::move(ids), node, std::move(backward));
  return out;
}

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Neg, Relu, Exp, Log, Tanh, Square };

inline std::string_view op_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::Add: return "add";
    case BinaryOp::Sub: return "sub";
    case BinaryOp::Mul: return "mul";
    case BinaryOp::Div: return "div";
  }
  return "?";
}

inline std::string_view op_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::Neg: return "neg";
    case UnaryOp::Relu: return "relu";
    case UnaryOp::Exp: return "exp";
    case UnaryOp::Log: return "log";
    case UnaryOp::Tanh: return "tanh";
    case UnaryOp::Square: return "square";
  }
  return "?";
}

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t n = a.numel();
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(n);
  switch (op) {
    case BinaryOp::Add: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i]; break;
    case BinaryOp::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i]; break;
    case BinaryOp::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i]; break;
    case BinaryOp::Div: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[i]; break;
  }
  auto an = detail::node_of(a);
  auto bn = detail::node_of(b);
  return make_op_result<T>(
      op_name(op), a.shape(), std::move(out), {&a, &b},
      [op, an, bn](const std::vector<T>& g) {
        T* ga = detail::grad_sink(an);
        T* gb = detail::grad_sink(bn);
        const auto& x = an->data;
        const auto& y = bn->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case BinaryOp::Add:
              if (ga) ga[i] += g[i];
              if (gb) gb[i] += g[i];
              break;
            case BinaryOp::Sub:
              if (ga) ga[i] += g[i];
              if (gb) gb[i] -= g[i];
              break;
            case BinaryOp::Mul:
              if (ga) ga[i] += g[i] * y[i];
              if (gb) gb[i] += g[i] * x[i];
              break;
            case BinaryOp::Div:
              if (ga) ga[i] += g[i] / y[i];
              if (gb) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
              break;
          }
        }
      });
}

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, T b) {
  const std::size_t n = a.numel();
  const auto& av = a.values();
  std::vector<T> out(n);
  switch (op) {
    case BinaryOp::Add: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + b; break;
    case BinaryOp::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - b; break;
    case BinaryOp::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * b; break;
    case BinaryOp::Div: for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / b; break;
  }
  auto an = detail::node_of(a);
  return make_op_result<T>(
      op_name(op), a.shape(), std::move(out), {&a},
      [op, an, b](const std::vector<T>& g) {
        T* ga = detail::grad_sink(an);
        if (!ga) return;
        const T scale = op == BinaryOp::Mul ? b : op == BinaryOp::Div ? T(1) / b : T(1);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * scale;
      });
}

template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  const auto& av = a.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i];
    switch (op) {
      case UnaryOp::Neg: out[i] = -x; break;
      case UnaryOp::Relu: out[i] = x > T(0) ? x : T(0); break;
      case UnaryOp::Exp: out[i] = std::exp(x); break;
      case UnaryOp::Log: out[i] = std::log(x); break;
      case UnaryOp::Tanh: out[i] = std::tanh(x); break;
      case UnaryOp::Square: out[i] = x * x; break;
    }
  }
  auto an = detail::node_of(a);
  std::vector<T> saved;
  if (op == UnaryOp::Exp || op == UnaryOp::Tanh) saved = out;
  return make_op_result<T>(
      op_name(op), a.shape(), std::move(out), {&a},
      [op, an, y = std::move(saved)](const std::vector<T>& g) {
        T* ga = detail::grad_sink(an);
        if (!ga) return;
        const auto& x = an->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case UnaryOp::Neg: ga[i] -= g[i]; break;
            case UnaryOp::Relu: if (x[i] > T(0)) ga[i] += g[i]; break;
            case UnaryOp::Exp: ga[i] += g[i] * y[i]; break;
            case UnaryOp::Log: ga[i] += g[i] / x[i]; break;
            case UnaryOp::Tanh: ga[i] += g[i] * (T(1) - y[i] * y[i]); break;
            case UnaryOp::Square: ga[i] += g[i] * T(2) * x[i]; break;
          }
        }
      });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Div, a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return elementwise(UnaryOp::Neg, a); }

template <typename T> Tensor<T> relu(const Tensor<T>& a) { return elementwise(UnaryOp::Relu, a); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return elementwise(UnaryOp::Exp, a); }
template <typename T> Tensor<T> log(const Tensor<T>& a) { return elementwise(UnaryOp::Log, a); }
template <typename T> Tensor<T> tanh(const Tensor<T>& a) { return elementwise(UnaryOp::Tanh, a); }
template <typename T> Tensor<T> square(const Tensor<T>& a) { return elementwise(UnaryOp::Square, a); }

// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto an = detail::node_of(a);
  return make_op_result<T>("sum", Shape{}, std::vector<T>{total}, {&a},
                           [an](const std::vector<T>& g) {
                             T* ga = detail::grad_sink(an);
                             if (!ga) return;
                             for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[0];
                           });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return sum(a) / static_cast<T>(a.numel());
}

// Same values under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) +
                     " as " + shape_string(shape));
  }
  auto an = detail::node_of(a);
  return make_op_result<T>("reshape", std::move(shape), a.values(), {&a},
                           [an](const std::vector<T>& g) {
                             T* ga = detail::grad_sink(an);
                             if (!ga) return;
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
}

}  // namespace avnet
