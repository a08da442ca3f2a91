#include "brainmass/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "brainmass/errors.hpp"

namespace brainmass::nn {

std::string Shape::str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }

namespace {

thread_local bool g_checked = true;

template <typename T>
Tape<T>*& tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  if (!g_checked) return;
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + " produced a non-finite value");
}

// Wraps a freshly computed value into a node and records it when a tape is
// active and some parent needs a gradient.
template <typename T, typename Fn>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T>&& value, std::initializer_list<NodePtr<T>> parents,
                      Fn&& backward) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->leaf = false;
  Tape<T>* tape = active_tape<T>();
  if (tape != nullptr) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      node->requires_grad = true;
      node->backward = std::forward<Fn>(backward);
      tape->record(node);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

enum class Broadcast { none, row, scalar };

template <typename T>
Broadcast classify(const char* op, const Tensor<T>& a, const Tensor<T>& b, bool allow_row) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
  if (allow_row && b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  shape_error(op, a.shape(), b.shape());
}

template <typename T>
std::size_t b_index(Broadcast mode, std::size_t flat, std::size_t cols) {
  switch (mode) {
    case Broadcast::none: return flat;
    case Broadcast::row: return flat % cols;
    case Broadcast::scalar: return 0;
  }
  return flat;
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_slope(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace

bool checked_mode() noexcept { return g_checked; }
void set_checked_mode(bool on) noexcept { g_checked = on; }

template <typename T>
Tape<T>* active_tape() noexcept {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(tape_slot<T>()) {
  tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  tape_slot<T>() = previous_;
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  if (values.size() != shape.size())
    throw ShapeError("tensor of shape " + shape.str() + " given " + std::to_string(values.size()) + " values");
  node_->shape = shape;
  node_->value = std::move(values);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape.size(), T{0}), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape.size(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1, 1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<T> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged initializer");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(v), requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_->leaf) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  if (on) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::detach(bool requires_grad) const {
  return Tensor(shape(), node_->value, requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::record(std::shared_ptr<Node<T>> node) {
  if (consumed_) throw ContractError("recording onto a tape that already ran backward");
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw ContractError("backward called twice on the same tape");
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + (loss.defined() ? loss.shape().str() : "[]"));
  consumed_ = true;
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;  // nothing upstream needs a gradient
  root->ensure_grad();
  root->grad[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
  // Drop closures so saved inputs are released.
  for (auto& n : nodes_) n->backward = nullptr;
}

// ---------------------------------------------------------------------------
// Operations

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T{0});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](Node<T>& o) {
    const T* g = o.grad.data();
    if (pa->requires_grad) {
      pa->ensure_grad();
      const T* bv = pb->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          pa->grad[i * k + p] += acc;
        }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      const T* av = pa->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = av[i * k + p];
          T* gb = pb->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += aip * g[i * n + j];
        }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_defined(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto pa = a.node_ptr();
  return make_result<T>("transpose", Shape{n, m}, std::move(out), {pa}, [pa, m, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += o.grad[j * m + i];
  });
}

namespace {

template <typename T>
Tensor<T> add_or_sub(const char* op, const Tensor<T>& a, const Tensor<T>& b, T sign) {
  require_defined(a, op);
  require_defined(b, op);
  const Broadcast mode = classify(op, a, b, true);
  const std::size_t n = a.size(), cols = a.cols();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + sign * bv[b_index<T>(mode, i, cols)];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>(op, a.shape(), std::move(out), {pa, pb}, [pa, pb, mode, n, cols, sign](Node<T>& o) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pb->grad[b_index<T>(mode, i, cols)] += sign * o.grad[i];
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_or_sub("add", a, b, T{1});
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_or_sub("sub", a, b, T{-1});
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  const Broadcast mode = classify("mul", a, b, false);
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[b_index<T>(mode, i, 1)];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb, mode, n](Node<T>& o) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i] * pb->value[b_index<T>(mode, i, 1)];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pb->grad[b_index<T>(mode, i, 1)] += o.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "div");
  require_defined(b, "div");
  const Broadcast mode = classify("div", a, b, false);
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / bv[b_index<T>(mode, i, 1)];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("div", a.shape(), std::move(out), {pa, pb}, [pa, pb, mode, n](Node<T>& o) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i] / pb->value[b_index<T>(mode, i, 1)];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const T bi = pb->value[b_index<T>(mode, i, 1)];
        pb->grad[b_index<T>(mode, i, 1)] -= o.grad[i] * pa->value[i] / (bi * bi);
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_defined(a, "scale");
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * factor;
  auto pa = a.node_ptr();
  return make_result<T>("scale", a.shape(), std::move(out), {pa}, [pa, n, factor](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  require_defined(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = av + i * n;
    T* orow = out.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      total += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= total;
  }
  auto pa = a.node_ptr();
  return make_result<T>("softmax_rows", a.shape(), std::move(out), {pa}, [pa, m, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = o.value.data() + i * n;
      const T* g = o.grad.data() + i * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.shape() != Shape{1, n}) shape_error("layer_norm gain", x.shape(), gain.shape());
  if (bias.shape() != Shape{1, n}) shape_error("layer_norm bias", x.shape(), bias.shape());
  std::vector<T> out(m * n);
  std::vector<T> xhat(m * n);
  std::vector<T> inv_std(m);
  const T* xv = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv + i * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  auto px = x.node_ptr();
  auto pg = gain.node_ptr();
  auto pb = bias.node_ptr();
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
        const T* g = o.grad.data();
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg->grad[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pb->grad[j] += g[i * n + j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const T* gv = pg->value.data();
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t i = 0; i < m; ++i) {
            T sum_d{0}, sum_dx{0};
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gv[j];
              sum_d += d;
              sum_dx += d * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const T d = g[i * n + j] * gv[j];
              px->grad[i * n + j] += inv_std[i] * (d - inv_n * sum_d - xhat[i * n + j] * inv_n * sum_dx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  require_defined(a, "gelu");
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = gelu_value(av[i]);
  auto pa = a.node_ptr();
  return make_result<T>("gelu", a.shape(), std::move(out), {pa}, [pa, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i] * gelu_slope(pa->value[i]);
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  std::size_t rows = 0, cols = 0;
  if (axis == Axis::cols) {
    rows = parts.front().rows();
    for (const auto& p : parts) {
      if (p.rows() != rows) shape_error("concat(cols)", parts.front().shape(), p.shape());
      cols += p.cols();
    }
  } else {
    cols = parts.front().cols();
    for (const auto& p : parts) {
      if (p.cols() != cols) shape_error("concat(rows)", parts.front().shape(), p.shape());
      rows += p.rows();
    }
  }
  std::vector<T> out(rows * cols);
  std::vector<NodePtr<T>> nodes;
  nodes.reserve(parts.size());
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const T* pv = p.values().data();
    if (axis == Axis::cols) {
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(pv + i * p.cols(), pv + (i + 1) * p.cols(), out.data() + i * cols + offset);
      offset += p.cols();
    } else {
      std::copy(pv, pv + p.size(), out.data() + offset * cols);
      offset += p.rows();
    }
    nodes.push_back(p.node_ptr());
  }

  auto node = std::make_shared<Node<T>>();
  check_finite("concat", out);
  node->shape = Shape{rows, cols};
  node->value = std::move(out);
  node->leaf = false;
  Tape<T>* tape = active_tape<T>();
  const bool needs = tape != nullptr && std::any_of(nodes.begin(), nodes.end(), [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->backward = [nodes, axis, cols](Node<T>& o) {
      std::size_t off = 0;
      for (const auto& p : nodes) {
        const std::size_t pr = p->shape.rows, pc = p->shape.cols;
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < pr; ++i)
            for (std::size_t j = 0; j < pc; ++j) {
              const std::size_t src = axis == Axis::cols ? i * cols + off + j : (off + i) * cols + j;
              p->grad[i * pc + j] += o.grad[src];
            }
        }
        off += axis == Axis::cols ? pc : pr;
      }
    };
    tape->record(node);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, Axis axis) {
  require_defined(a, "sum");
  const std::size_t m = a.rows(), n = a.cols();
  const T* av = a.values().data();
  auto pa = a.node_ptr();
  if (axis == Axis::rows) {
    std::vector<T> out(n, T{0});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    return make_result<T>("sum", Shape{1, n}, std::move(out), {pa}, [pa, m, n](Node<T>& o) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += o.grad[j];
    });
  }
  std::vector<T> out(m, T{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += av[i * n + j];
  return make_result<T>("sum", Shape{m, 1}, std::move(out), {pa}, [pa, m, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += o.grad[i];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, Axis axis) {
  const std::size_t count = axis == Axis::rows ? a.rows() : a.cols();
  return scale(sum(a, axis), T{1} / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  require_defined(a, "sum_all");
  T total{0};
  for (T x : a.values()) total += x;
  auto pa = a.node_ptr();
  const std::size_t n = a.size();
  return make_result<T>("sum_all", Shape{1, 1}, std::vector<T>{total}, {pa}, [pa, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& a) {
  require_defined(a, "l2_norm");
  T ss{0};
  for (T x : a.values()) ss += x * x;
  const T norm = std::sqrt(ss);
  auto pa = a.node_ptr();
  const std::size_t n = a.size();
  return make_result<T>("l2_norm", Shape{1, 1}, std::vector<T>{norm}, {pa}, [pa, n, norm](Node<T>& o) {
    pa->ensure_grad();
    if (norm == T{0}) return;
    for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[0] * pa->value[i] / norm;
  });
}

template <typename T>
Tensor<T> squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "squared_error");
  require_defined(b, "squared_error");
  if (a.shape() != b.shape()) shape_error("squared_error", a.shape(), b.shape());
  const std::size_t n = a.size();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T total{0};
  for (std::size_t i = 0; i < n; ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_result<T>("squared_error", Shape{1, 1}, std::vector<T>{total}, {pa, pb}, [pa, pb, n](Node<T>& o) {
    const T g = o.grad[0];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += T{2} * g * (pa->value[i] - pb->value[i]);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) pb->grad[i] -= T{2} * g * (pa->value[i] - pb->value[i]);
    }
  });
}

template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& a) {
  require_defined(a, "logsumexp_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m);
  const T* av = a.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = av + i * n;
    const T mx = *std::max_element(row, row + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    out[i] = mx + std::log(total);
  }
  auto pa = a.node_ptr();
  return make_result<T>("logsumexp_rows", Shape{m, 1}, std::move(out), {pa}, [pa, m, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        pa->grad[i * n + j] += o.grad[i] * std::exp(pa->value[i * n + j] - o.value[i]);
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  require_defined(a, "gather_rows");
  const std::size_t n = a.cols();
  for (auto r : rows)
    if (r >= a.rows()) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + a.shape().str());
  std::vector<T> out(rows.size() * n);
  const T* av = a.values().data();
  for (std::size_t k = 0; k < rows.size(); ++k) std::copy(av + rows[k] * n, av + (rows[k] + 1) * n, out.data() + k * n);
  auto pa = a.node_ptr();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>("gather_rows", Shape{rows.size(), n}, std::move(out), {pa}, [pa, idx = std::move(idx), n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < n; ++j) pa->grad[idx[k] * n + j] += o.grad[k * n + j];
  });
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& a, std::span<const std::size_t> rows, const Tensor<T>& src) {
  require_defined(a, "scatter_rows");
  require_defined(src, "scatter_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (src.cols() != n || src.rows() != rows.size()) shape_error("scatter_rows", a.shape(), src.shape());
  std::vector<bool> replaced(m, false);
  for (auto r : rows) {
    if (r >= m) throw ShapeError("scatter_rows: row " + std::to_string(r) + " out of range for " + a.shape().str());
    if (replaced[r]) throw ShapeError("scatter_rows: duplicate row " + std::to_string(r));
    replaced[r] = true;
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* sv = src.values().data();
  for (std::size_t k = 0; k < rows.size(); ++k) std::copy(sv + k * n, sv + (k + 1) * n, out.data() + rows[k] * n);
  auto pa = a.node_ptr();
  auto ps = src.node_ptr();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>(
      "scatter_rows", a.shape(), std::move(out), {pa, ps},
      [pa, ps, idx = std::move(idx), replaced = std::move(replaced), m, n](Node<T>& o) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            if (replaced[i]) continue;
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += o.grad[i * n + j];
          }
        }
        if (ps->requires_grad) {
          ps->ensure_grad();
          for (std::size_t k = 0; k < idx.size(); ++k)
            for (std::size_t j = 0; j < n; ++j) ps->grad[k * n + j] += o.grad[idx[k] * n + j];
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape.size() != a.size()) shape_error("reshape", a.shape(), shape);
  std::vector<T> out(a.values().begin(), a.values().end());
  auto pa = a.node_ptr();
  const std::size_t n = a.size();
  return make_result<T>("reshape", shape, std::move(out), {pa}, [pa, n](Node<T>& o) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, ParameterList<double>& params, double h) {
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  double taped_value = 0.0;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> loss = f();
    taped_value = loss.item();
    tape.backward(loss);
  }
  auto evaluate = [&f] {
    NoGradScope<double> off;
    return f().item();
  };
  const double again = evaluate();
  const double third = evaluate();
  if (again != taped_value || third != again)
    throw ContractError("grad_check: objective is not deterministic (" + std::to_string(taped_value) + " vs " +
                        std::to_string(again) + ")");

  GradCheckResult result;
  for (auto& p : params) {
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = evaluate();
      values[i] = saved - h;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || result.worst_parameter.empty()) {
        result.max_rel_error = rel;
        result.worst_parameter = p.name;
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define BRAINMASS_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                           \
  template class Tape<T>;                                                                             \
  template class TapeScope<T>;                                                                        \
  template class NoGradScope<T>;                                                                      \
  template Tape<T>* active_tape<T>() noexcept;                                                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, Axis);                                     \
  template Tensor<T> sum(const Tensor<T>&, Axis);                                                     \
  template Tensor<T> mean(const Tensor<T>&, Axis);                                                    \
  template Tensor<T> sum_all(const Tensor<T>&);                                                       \
  template Tensor<T> l2_norm(const Tensor<T>&);                                                       \
  template Tensor<T> squared_error(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> logsumexp_rows(const Tensor<T>&);                                                \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                     \
  template Tensor<T> scatter_rows(const Tensor<T>&, std::span<const std::size_t>, const Tensor<T>&);  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

BRAINMASS_INSTANTIATE(float)
BRAINMASS_INSTANTIATE(double)

#undef BRAINMASS_INSTANTIATE

}  // namespace brainmass::nn
