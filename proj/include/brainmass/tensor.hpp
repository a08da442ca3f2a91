#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation. Only the
// operations the encoder and the pretraining losses need are provided.
//
// Recording is opt-in: operations executed while a Tape is active (see
// TapeScope) and touching at least one tensor that requires a gradient are
// recorded; everything else is plain evaluation. Instantiated for float
// (training) and double (gradient checks).

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace brainmass::nn {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access for initializers and optimizers. Never use on a tensor
  /// that is still referenced by an unconsumed tape.
  std::span<T> mutable_values() { return node_->value; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.cols + c]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  void set_requires_grad(bool on);
  /// Empty unless the tensor requires a gradient.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad();

  /// Deep copy of the values as a fresh leaf.
  Tensor detach(bool requires_grad = false) const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations. One tape per step; backward
/// may run only once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<T>> node);
  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded node in
  /// reverse order. Gradients accumulate into leaves.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>* active_tape() noexcept;

/// Makes `tape` the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (stop-gradient evaluation).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Checked mode raises NumericError when a forward op yields a non-finite
/// value. On by default; per thread.
bool checked_mode() noexcept;
void set_checked_mode(bool on) noexcept;

enum class Axis { rows, cols };

// Operation catalog. Broadcasting is limited to what the model needs:
// `add`/`sub` accept a 1×n row or a 1×1 scalar as the right operand,
// `mul`/`div` accept a 1×1 scalar as the right operand.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& a);
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                                           T eps = T(1e-5));
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, Axis axis);
/// Reduces along `axis`: Axis::rows collapses rows (result 1×n), Axis::cols
/// collapses columns (result m×1).
template <typename T> Tensor<T> sum(const Tensor<T>& a, Axis axis);
template <typename T> Tensor<T> mean(const Tensor<T>& a, Axis axis);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> l2_norm(const Tensor<T>& a);
/// Σ (a - b)² as a 1×1 tensor.
template <typename T> Tensor<T> squared_error(const Tensor<T>& a, const Tensor<T>& b);
/// Row-wise log Σ exp, computed as max + log Σ exp(x - max). Result m×1.
template <typename T> Tensor<T> logsumexp_rows(const Tensor<T>& a);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows);
/// Copy of `a` whose rows `rows[k]` are replaced by row k of `src`.
template <typename T> Tensor<T> scatter_rows(const Tensor<T>& a, std::span<const std::size_t> rows,
                                             const Tensor<T>& src);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool decay_exempt = false;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the tape gradient of `f` with central differences over every
/// entry of `params`. Relative error is |a - n| / max(|a|, |n|, 1e-8).
/// `f` must be deterministic; two evaluations that differ raise
/// ContractError.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, ParameterList<double>& params,
                           double h = 1e-5);

}  // namespace brainmass::nn
