#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable node. Operations on tensors
// that require gradients record their inputs and a backward closure on the
// produced node; backward() topologically orders the reachable subgraph (the
// tape) and replays it in reverse. Only parameter leaves are ever mutated,
// and only between steps, through mutable_data().

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pfseg/errors.hpp"
#include "pfseg/rng.hpp"

namespace pfseg {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
void validate_shape(const Shape& shape);

namespace init {
struct Zeros {};
struct Ones {};
struct Uniform {
  std::uint64_t seed;
  double lo;
  double hi;
};
struct Normal {
  std::uint64_t seed;
  double mean;
  double stddev;
};
}  // namespace init

using Init = std::variant<init::Zeros, init::Ones, init::Uniform, init::Normal>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  std::span<T> grad_span() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor create(const Shape& shape, const Init& how);
  static Tensor zeros(const Shape& shape) { return create(shape, init::Zeros{}); }
  static Tensor ones(const Shape& shape) { return create(shape, init::Ones{}); }
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value) { return full({1}, value); }
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);
  static Tensor normal(const Shape& shape, Rng& rng, double mean, double stddev);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  /// Write access for parameter updates between steps. Only valid on leaves.
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Marks a leaf as a trainable parameter (or freezes it).
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Accumulated gradient; zeros if backward never reached this tensor.
  std::vector<T> grad() const;
  void zero_grad();

  /// Fresh leaf holding a copy of the values, cut from any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  template <typename U>
  Tensor<U> cast() const;

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Gradient recording mode (per thread).

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Tape: the reachable subgraph of a loss in topological order.

template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);

  /// Nodes ordered so that every node's inputs precede it.
  const std::vector<detail::Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }
  /// Replays the backward closures in reverse order, seeding the root with 1.
  /// Returns the number of nodes visited.
  std::size_t backward();

 private:
  std::vector<detail::Node<T>*> order_;
  std::shared_ptr<detail::Node<T>> root_;
};

/// Accumulates d(loss)/d(leaf) into every requires-grad leaf reachable from loss.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Operations. Shapes must match exactly, or one operand may have a single
// element (scalar broadcast). No other implicit broadcasting exists.

enum class Unary { Gelu, Sigmoid, Neg, Exp, Log, Tanh, Relu, Square };
enum class Binary { Add, Sub, Mul, Div };

template <typename T> Tensor<T> elementwise(Binary op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> elementwise(Unary op, const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Binary::Add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Binary::Sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Binary::Mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Binary::Div, a, b); }
template <typename T> Tensor<T> gelu(const Tensor<T>& a) { return elementwise(Unary::Gelu, a); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise(Unary::Sigmoid, a); }
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return elementwise(Unary::Neg, a); }
template <typename T> Tensor<T> square(const Tensor<T>& a) { return elementwise(Unary::Square, a); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
double gelu_value(double x);
double gelu_derivative(double x);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes);

/// [M,K] x [K,N] -> [M,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// [B,M,K] x [B,K,N] -> [B,M,N]; transpose_b treats b as [B,N,K].
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
/// x[..., D_in] * weight[D_out, D_in]^T + bias[D_out]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

/// Adds bias[C] along axis 1 of x[N, C, ...].
template <typename T> Tensor<T> channel_bias(const Tensor<T>& x, const Tensor<T>& bias);
/// Repeats x (any shape S) into [n, S...].
template <typename T> Tensor<T> broadcast_batch(const Tensor<T>& x, std::int64_t n);

template <typename T> Tensor<T> softmax_last(const Tensor<T>& x);
template <typename T> Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Mean per-pixel cross-entropy of logits[N,C,H,W] against labels (N*H*W, row-major).
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// fn maps a [shape]-tensor to a scalar tensor. Compares backward() against
/// central differences (f(x+h) - f(x-h)) / 2h at every coordinate.
/// relative error = |a - n| / (|a| + |n| + eps)
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                           const Tensor<double>& point, double h = 1e-5, double eps = 1e-12);

}  // namespace pfseg
