#include "pfseg/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pfseg/detail/op_builder.hpp"

namespace pfseg {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "invalid-shape";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::InvalidGeometry: return "invalid-geometry";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Checkpoint: return "checkpoint";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) fail(ErrorKind::InvalidShape, "shape must be nonempty");
  for (auto d : shape)
    if (d < 1) fail(ErrorKind::InvalidShape, "dimension < 1 in " + shape_str(shape));
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    fail(ErrorKind::ShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

double gelu_value(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  validate_shape(shape);
  if (pfseg::numel(shape) != static_cast<std::int64_t>(data.size()))
    fail(ErrorKind::InvalidShape, "data length " + std::to_string(data.size()) + " does not match shape " +
                                      shape_str(shape));
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::create(const Shape& shape, const Init& how) {
  validate_shape(shape);
  std::vector<T> data(static_cast<std::size_t>(pfseg::numel(shape)));
  std::visit(
      [&](const auto& spec) {
        using S = std::decay_t<decltype(spec)>;
        if constexpr (std::is_same_v<S, init::Zeros>) {
          std::fill(data.begin(), data.end(), T(0));
        } else if constexpr (std::is_same_v<S, init::Ones>) {
          std::fill(data.begin(), data.end(), T(1));
        } else if constexpr (std::is_same_v<S, init::Uniform>) {
          Rng rng(spec.seed);
          for (auto& v : data) v = static_cast<T>(rng.uniform(spec.lo, spec.hi));
        } else {
          Rng rng(spec.seed);
          for (auto& v : data) v = static_cast<T>(rng.normal(spec.mean, spec.stddev));
        }
      },
      how);
  return Tensor(shape, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  validate_shape(shape);
  return Tensor(shape, std::vector<T>(static_cast<std::size_t>(pfseg::numel(shape)), value));
}

template <typename T>
Tensor<T> Tensor<T>::uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  validate_shape(shape);
  std::vector<T> data(static_cast<std::size_t>(pfseg::numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor(shape, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::normal(const Shape& shape, Rng& rng, double mean, double stddev) {
  validate_shape(shape);
  std::vector<T> data(static_cast<std::size_t>(pfseg::numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
  return Tensor(shape, std::move(data));
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) fail(ErrorKind::Contract, "mutable_data() on a non-leaf tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(ErrorKind::Contract, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) fail(ErrorKind::ShapeMismatch, "index rank mismatch");
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) fail(ErrorKind::ShapeMismatch, "index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) fail(ErrorKind::Contract, "requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(node_->data.begin(), node_->data.end());
  return Tensor<U>(node_->shape, std::move(out));
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root.node();
  if (!root.requires_grad()) return tape;
  std::unordered_set<const detail::Node<T>*> seen;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
std::size_t Tape<T>::backward() {
  if (!root_ || order_.empty()) return 0;
  if (root_->data.size() != 1)
    fail(ErrorKind::Contract, "backward() requires a scalar loss, got shape " + shape_str(root_->shape));
  auto root_grad = root_->grad_span();
  root_grad[0] += T(1);
  std::size_t visited = 0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node<T>* node = *it;
    ++visited;
    if (node->is_leaf() || !node->backward) continue;
    if (node->grad.empty()) continue;
    node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
  return visited;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) fail(ErrorKind::Contract, "backward() on undefined tensor");
  if (loss.numel() != 1)
    fail(ErrorKind::Contract, "backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  auto tape = Tape<T>::record(loss);
  tape.backward();
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> elementwise(Binary op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a.shape(), b.shape(), "elementwise");
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(pfseg::numel(out_shape));
  auto A = a.data();
  auto B = b.data();
  auto ai = [&](std::size_t i) { return a_scalar ? A[0] : A[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? B[0] : B[i]; };
  std::vector<T> out(n);
  switch (op) {
    case Binary::Add: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) + bi(i); break;
    case Binary::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) - bi(i); break;
    case Binary::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) * bi(i); break;
    case Binary::Div: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) / bi(i); break;
  }
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  return detail::make_result<T>(out_shape, std::move(out), names[static_cast<int>(op)], {&a, &b},
                                [op, a_scalar, b_scalar, n](detail::Node<T>& self) {
    const auto& G = self.grad;
    const auto& A = self.inputs[0]->data;
    const auto& B = self.inputs[1]->data;
    auto ga = detail::input_grad(self, 0);
    auto gb = detail::input_grad(self, 1);
    auto av = [&](std::size_t i) { return a_scalar ? A[0] : A[i]; };
    auto bv = [&](std::size_t i) { return b_scalar ? B[0] : B[i]; };
    for (std::size_t i = 0; i < n; ++i) {
      T da = 0, db = 0;
      switch (op) {
        case Binary::Add: da = G[i]; db = G[i]; break;
        case Binary::Sub: da = G[i]; db = -G[i]; break;
        case Binary::Mul: da = G[i] * bv(i); db = G[i] * av(i); break;
        case Binary::Div: da = G[i] / bv(i); db = -G[i] * av(i) / (bv(i) * bv(i)); break;
      }
      if (!ga.empty()) ga[a_scalar ? 0 : i] += da;
      if (!gb.empty()) gb[b_scalar ? 0 : i] += db;
    }
  });
}

template <typename T>
Tensor<T> elementwise(Unary op, const Tensor<T>& a) {
  auto A = a.data();
  const std::size_t n = A.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = A[i];
    switch (op) {
      case Unary::Gelu: out[i] = static_cast<T>(gelu_value(x)); break;
      case Unary::Sigmoid: out[i] = T(1) / (T(1) + std::exp(-x)); break;
      case Unary::Neg: out[i] = -x; break;
      case Unary::Exp: out[i] = std::exp(x); break;
      case Unary::Log: out[i] = std::log(x); break;
      case Unary::Tanh: out[i] = std::tanh(x); break;
      case Unary::Relu: out[i] = x > T(0) ? x : T(0); break;
      case Unary::Square: out[i] = x * x; break;
    }
  }
  static constexpr const char* names[] = {"gelu", "sigmoid", "neg", "exp", "log", "tanh", "relu", "square"};
  return detail::make_result<T>(a.shape(), std::move(out), names[static_cast<int>(op)], {&a},
                                [op](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    if (ga.empty()) return;
    const auto& G = self.grad;
    const auto& X = self.inputs[0]->data;
    const auto& Y = self.data;
    for (std::size_t i = 0; i < G.size(); ++i) {
      T d = 0;
      switch (op) {
        case Unary::Gelu: d = static_cast<T>(gelu_derivative(X[i])); break;
        case Unary::Sigmoid: d = Y[i] * (T(1) - Y[i]); break;
        case Unary::Neg: d = T(-1); break;
        case Unary::Exp: d = Y[i]; break;
        case Unary::Log: d = T(1) / X[i]; break;
        case Unary::Tanh: d = T(1) - Y[i] * Y[i]; break;
        case Unary::Relu: d = X[i] > T(0) ? T(1) : T(0); break;
        case Unary::Square: d = T(2) * X[i]; break;
      }
      ga[i] += G[i] * d;
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto A = a.data();
  std::vector<T> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a}, [factor](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  auto A = a.data();
  std::vector<T> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + value;
  return detail::make_result<T>(a.shape(), std::move(out), "add_scalar", {&a}, [](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_result<T>({1}, {total}, "sum", {&a}, [](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    for (auto& g : ga) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  validate_shape(shape);
  if (pfseg::numel(shape) != a.numel())
    fail(ErrorKind::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(shape, std::move(out), "reshape", {&a}, [](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace {

// Maps every output flat index to its source flat index for a permutation.
std::vector<std::int64_t> permutation_gather(const Shape& in_shape, const std::vector<int>& axes, Shape& out_shape) {
  const std::size_t r = in_shape.size();
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  out_shape.resize(r);
  std::vector<std::int64_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    src_strides[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  const std::int64_t n = pfseg::numel(in_shape);
  std::vector<std::int64_t> gather(static_cast<std::size_t>(n));
  std::vector<std::int64_t> counter(r, 0);
  std::int64_t src = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    gather[static_cast<std::size_t>(o)] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      src += src_strides[ax];
      if (++counter[ax] < out_shape[ax]) break;
      src -= src_strides[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  return gather;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) fail(ErrorKind::ShapeMismatch, "permute: axis count mismatch");
  std::vector<bool> used(r, false);
  for (int ax : axes) {
    if (ax < 0 || static_cast<std::size_t>(ax) >= r || used[static_cast<std::size_t>(ax)])
      fail(ErrorKind::Contract, "permute: invalid axes");
    used[static_cast<std::size_t>(ax)] = true;
  }
  Shape out_shape;
  auto gather = permutation_gather(a.shape(), axes, out_shape);
  auto A = a.data();
  std::vector<T> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[static_cast<std::size_t>(gather[i])];
  return detail::make_result<T>(out_shape, std::move(out), "permute", {&a},
                                [gather = std::move(gather)](detail::Node<T>& self) {
    auto ga = detail::input_grad(self, 0);
    if (ga.empty()) return;
    for (std::size_t i = 0; i < gather.size(); ++i) ga[static_cast<std::size_t>(gather[i])] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) fail(ErrorKind::ShapeMismatch, "matmul expects rank-2 operands");
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K)
    fail(ErrorKind::ShapeMismatch, "matmul inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(M * N));
  MapM<T>(out.data(), M, N).noalias() = MapC<T>(a.data().data(), M, K) * MapC<T>(b.data().data(), K, N);
  return detail::make_result<T>({M, N}, std::move(out), "matmul", {&a, &b}, [M, K, N](detail::Node<T>& self) {
    MapC<T> dC(self.grad.data(), M, N);
    if (detail::wants_grad(self, 0)) {
      auto ga = detail::input_grad(self, 0);
      MapM<T>(ga.data(), M, K).noalias() += dC * MapC<T>(self.inputs[1]->data.data(), K, N).transpose();
    }
    if (detail::wants_grad(self, 1)) {
      auto gb = detail::input_grad(self, 1);
      MapM<T>(gb.data(), K, N).noalias() += MapC<T>(self.inputs[0]->data.data(), M, K).transpose() * dC;
    }
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3) fail(ErrorKind::ShapeMismatch, "bmm expects rank-3 operands");
  const auto Bn = a.dim(0), M = a.dim(1), K = a.dim(2);
  const auto N = transpose_b ? b.dim(1) : b.dim(2);
  const auto bK = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != Bn || bK != K)
    fail(ErrorKind::ShapeMismatch, "bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(Bn * M * N));
  for (std::int64_t i = 0; i < Bn; ++i) {
    MapC<T> A(a.data().data() + i * M * K, M, K);
    MapM<T> C(out.data() + i * M * N, M, N);
    if (transpose_b)
      C.noalias() = A * MapC<T>(b.data().data() + i * N * K, N, K).transpose();
    else
      C.noalias() = A * MapC<T>(b.data().data() + i * K * N, K, N);
  }
  return detail::make_result<T>({Bn, M, N}, std::move(out), "bmm", {&a, &b},
                                [Bn, M, K, N, transpose_b](detail::Node<T>& self) {
    const bool need_a = detail::wants_grad(self, 0), need_b = detail::wants_grad(self, 1);
    auto ga = detail::input_grad(self, 0);
    auto gb = detail::input_grad(self, 1);
    const T* Ad = self.inputs[0]->data.data();
    const T* Bd = self.inputs[1]->data.data();
    for (std::int64_t i = 0; i < Bn; ++i) {
      MapC<T> dC(self.grad.data() + i * M * N, M, N);
      if (transpose_b) {
        MapC<T> Bm(Bd + i * N * K, N, K);
        if (need_a) MapM<T>(ga.data() + i * M * K, M, K).noalias() += dC * Bm;
        if (need_b) MapM<T>(gb.data() + i * N * K, N, K).noalias() += dC.transpose() * MapC<T>(Ad + i * M * K, M, K);
      } else {
        MapC<T> Bm(Bd + i * K * N, K, N);
        if (need_a) MapM<T>(ga.data() + i * M * K, M, K).noalias() += dC * Bm.transpose();
        if (need_b) MapM<T>(gb.data() + i * K * N, K, N).noalias() += MapC<T>(Ad + i * M * K, M, K).transpose() * dC;
      }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) fail(ErrorKind::ShapeMismatch, "linear weight must be rank 2");
  const auto Dout = weight.dim(0), Din = weight.dim(1);
  if (x.shape().back() != Din)
    fail(ErrorKind::ShapeMismatch, "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias.defined() && (bias.numel() != Dout)) fail(ErrorKind::ShapeMismatch, "linear: bias size");
  const auto M = x.numel() / Din;
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  std::vector<T> out(static_cast<std::size_t>(M * Dout));
  MapM<T> Y(out.data(), M, Dout);
  Y.noalias() = MapC<T>(x.data().data(), M, Din) * MapC<T>(weight.data().data(), Dout, Din).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), Dout);
    Y.rowwise() += b;
  }
  return detail::make_result<T>(out_shape, std::move(out), "linear", {&x, &weight, &bias},
                                [M, Din, Dout](detail::Node<T>& self) {
    MapC<T> dY(self.grad.data(), M, Dout);
    if (detail::wants_grad(self, 0)) {
      auto gx = detail::input_grad(self, 0);
      MapM<T>(gx.data(), M, Din).noalias() += dY * MapC<T>(self.inputs[1]->data.data(), Dout, Din);
    }
    if (detail::wants_grad(self, 1)) {
      auto gw = detail::input_grad(self, 1);
      MapM<T>(gw.data(), Dout, Din).noalias() += dY.transpose() * MapC<T>(self.inputs[0]->data.data(), M, Din);
    }
    if (detail::wants_grad(self, 2)) {
      auto gb = detail::input_grad(self, 2);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), Dout) += dY.colwise().sum();
    }
  });
}

template <typename T>
Tensor<T> channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() < 2 || bias.numel() != x.dim(1))
    fail(ErrorKind::ShapeMismatch, "channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  const auto N = x.dim(0), C = x.dim(1);
  const auto inner = x.numel() / (N * C);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto B = bias.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      T* p = out.data() + (n * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) p[i] += B[static_cast<std::size_t>(c)];
    }
  return detail::make_result<T>(x.shape(), std::move(out), "channel_bias", {&x, &bias},
                                [N, C, inner](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    auto gb = detail::input_grad(self, 1);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    if (gb.empty()) return;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* g = self.grad.data() + (n * C + c) * inner;
        T acc = 0;
        for (std::int64_t i = 0; i < inner; ++i) acc += g[i];
        gb[static_cast<std::size_t>(c)] += acc;
      }
  });
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::int64_t n) {
  if (n < 1) fail(ErrorKind::InvalidShape, "broadcast_batch: n < 1");
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const auto m = static_cast<std::size_t>(x.numel());
  std::vector<T> out(m * static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * m));
  return detail::make_result<T>(out_shape, std::move(out), "broadcast_batch", {&x}, [n, m](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gx[j] += self.grad[static_cast<std::size_t>(i) * m + j];
  });
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const auto D = x.shape().back();
  const auto rows = x.numel() / D;
  auto X = x.data();
  std::vector<T> out(X.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = X.data() + r * D;
    T* o = out.data() + r * D;
    T mx = *std::max_element(in, in + D);
    T total = 0;
    for (std::int64_t j = 0; j < D; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::int64_t j = 0; j < D; ++j) o[j] /= total;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {&x}, [rows, D](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * D;
      const T* g = self.grad.data() + r * D;
      T dot = 0;
      for (std::int64_t j = 0; j < D; ++j) dot += g[j] * y[j];
      for (std::int64_t j = 0; j < D; ++j) gx[static_cast<std::size_t>(r * D + j)] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const auto D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) fail(ErrorKind::ShapeMismatch, "layer_norm: affine size");
  const auto rows = x.numel() / D;
  auto X = x.data();
  auto G = gamma.data();
  auto B = beta.data();
  std::vector<T> out(X.size());
  std::vector<T> xhat(X.size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = X.data() + r * D;
    T mu = 0;
    for (std::int64_t j = 0; j < D; ++j) mu += in[j];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::int64_t j = 0; j < D; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < D; ++j) {
      const auto k = static_cast<std::size_t>(r * D + j);
      xhat[k] = (in[j] - mu) * is;
      out[k] = xhat[k] * G[static_cast<std::size_t>(j)] + B[static_cast<std::size_t>(j)];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
                                [rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    auto gg = detail::input_grad(self, 1);
    auto gbeta = detail::input_grad(self, 2);
    const auto& Gm = self.inputs[1]->data;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * D;
      const T* xh = xhat.data() + r * D;
      if (!gg.empty())
        for (std::int64_t j = 0; j < D; ++j) gg[static_cast<std::size_t>(j)] += g[j] * xh[j];
      if (!gbeta.empty())
        for (std::int64_t j = 0; j < D; ++j) gbeta[static_cast<std::size_t>(j)] += g[j];
      if (gx.empty()) continue;
      T mean_dxh = 0, mean_dxh_xh = 0;
      for (std::int64_t j = 0; j < D; ++j) {
        const T dxh = g[j] * Gm[static_cast<std::size_t>(j)];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh[j];
      }
      mean_dxh /= static_cast<T>(D);
      mean_dxh_xh /= static_cast<T>(D);
      const T is = inv_std[static_cast<std::size_t>(r)];
      for (std::int64_t j = 0; j < D; ++j) {
        const T dxh = g[j] * Gm[static_cast<std::size_t>(j)];
        gx[static_cast<std::size_t>(r * D + j)] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.rank() != 4) fail(ErrorKind::ShapeMismatch, "cross_entropy expects logits [N,C,H,W]");
  const auto N = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != N * P)
    fail(ErrorKind::ShapeMismatch, "cross_entropy: label count " + std::to_string(labels.size()));
  auto L = logits.data();
  std::vector<T> probs(L.size());
  double total = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t p = 0; p < P; ++p) {
      const std::int32_t y = labels[static_cast<std::size_t>(n * P + p)];
      if (y < 0 || y >= C) fail(ErrorKind::Contract, "cross_entropy: label out of range");
      T mx = L[static_cast<std::size_t>((n * C) * P + p)];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, L[static_cast<std::size_t>((n * C + c) * P + p)]);
      T z = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        const auto k = static_cast<std::size_t>((n * C + c) * P + p);
        probs[k] = std::exp(L[k] - mx);
        z += probs[k];
      }
      for (std::int64_t c = 0; c < C; ++c) probs[static_cast<std::size_t>((n * C + c) * P + p)] /= z;
      total += -(static_cast<double>(L[static_cast<std::size_t>((n * C + y) * P + p)] - mx) - std::log(static_cast<double>(z)));
    }
  const T loss = static_cast<T>(total / static_cast<double>(N * P));
  std::vector<std::int32_t> label_copy(labels.begin(), labels.end());
  return detail::make_result<T>({1}, {loss}, "cross_entropy", {&logits},
                                [N, C, P, probs = std::move(probs), label_copy = std::move(label_copy)](detail::Node<T>& self) {
    auto gl = detail::input_grad(self, 0);
    const T g = self.grad[0] / static_cast<T>(N * P);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t p = 0; p < P; ++p) {
        const auto y = label_copy[static_cast<std::size_t>(n * P + p)];
        for (std::int64_t c = 0; c < C; ++c) {
          const auto k = static_cast<std::size_t>((n * C + c) * P + p);
          gl[k] += g * (probs[k] - (c == y ? T(1) : T(0)));
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                           const Tensor<double>& point, double h, double eps) {
  for (std::size_t i = 0; i < point.data().size(); ++i)
    if (!std::isfinite(point.data()[i]))
      fail(ErrorKind::Numeric, "grad_check: non-finite point at coordinate " + std::to_string(i));
  Tensor<double> leaf = point.detach();
  leaf.set_requires_grad(true);
  Tensor<double> y = fn(leaf);
  if (y.numel() != 1) fail(ErrorKind::Contract, "grad_check: fn must be scalar-valued");
  if (!std::isfinite(y.item())) fail(ErrorKind::Numeric, "grad_check: non-finite value at the base point");
  if (y.requires_grad()) backward(y);
  const std::vector<double> analytic = leaf.grad();

  GradCheckResult result;
  NoGradGuard no_grad;
  std::vector<double> base(point.data().begin(), point.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      std::vector<double> v = base;
      v[i] += delta;
      const double f = fn(Tensor<double>(point.shape(), std::move(v))).item();
      if (!std::isfinite(f))
        fail(ErrorKind::Numeric, "grad_check: non-finite evaluation at coordinate " + std::to_string(i));
      return f;
    };
    const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + eps);
    if (err > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = err;
      result.worst_index = static_cast<std::int64_t>(i);
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Instantiations

#define PFSEG_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                           \
  template class Tape<T>;                                                                             \
  template void backward<T>(const Tensor<T>&);                                                        \
  template Tensor<T> elementwise<T>(Binary, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> elementwise<T>(Unary, const Tensor<T>&);                                         \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                        \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                       \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool);                                \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> channel_bias<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> broadcast_batch<T>(const Tensor<T>&, std::int64_t);                              \
  template Tensor<T> softmax_last<T>(const Tensor<T>&);                                               \
  template Tensor<T> layer_norm_last<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::int32_t>);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

}  // namespace pfseg
