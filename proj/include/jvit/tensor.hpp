// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Graph<T> is a tape: every primitive applied through it appends one node
// (when any input requires a gradient) holding the output and a closure
// that pushes the output gradient into the inputs. backward() replays the
// tape in reverse, so each node is visited exactly once and fan-out
// contributions are summed in the input grad buffers.
//
// T is float for training and double for finite-difference checking.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace jvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnknownOpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind : std::uint8_t {
  kMatmul,
  kAdd,
  kScale,
  kLayerNorm,
  kSoftmax,
  kGelu,
  kRelu,
  kGatherRows,
  kReshape,
  kTranspose,
  kMean,
  kConcat,
  kCrossEntropy,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kMatmul,  OpKind::kAdd,        OpKind::kScale,   OpKind::kLayerNorm,
    OpKind::kSoftmax, OpKind::kGelu,       OpKind::kRelu,    OpKind::kGatherRows,
    OpKind::kReshape, OpKind::kTranspose,  OpKind::kMean,    OpKind::kConcat,
    OpKind::kCrossEntropy,
};

std::string_view op_name(OpKind kind);
/// Throws UnknownOpError for names that are not primitives.
OpKind parse_op_kind(std::string_view name);

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::uint64_t graph_id = 0;  // nonzero for outputs of a recorded node
  std::size_t node = 0;
};

/// Shared handle to a tensor. Copies alias the same storage; use clone()
/// for an independent copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; empty span when nothing has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of shape and data; gradient state is not copied.
  Tensor clone() const;
  /// Deep copy that never requires a gradient.
  Tensor detached() const;

  TensorData<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorData<T>>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorData<T>> impl_;
};

/// Attributes for the generic apply() entry point.
struct OpAttrs {
  double scale = 1.0;
  Shape shape;                        // reshape target
  std::vector<std::size_t> perm;      // transpose permutation
  std::vector<std::size_t> indices;   // gather_rows
  std::vector<std::size_t> targets;   // cross_entropy
  int axis = -1;                      // softmax / concat
};

enum class GradMode { kRecord, kInference };

template <typename T>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::kRecord);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  GradMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  /// Abort with NonFiniteError as soon as an op produces NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  /// a: [..., m, k]; b: [k, n] (shared) or [..., k, n] with a's batch dims.
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
  /// Same shape, or b's shape equal to a trailing suffix of a's shape
  /// (bias-style broadcast).
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T s);
  /// Normalizes the last axis; gamma/beta of shape [last] are optional.
  Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma = {},
                      const Tensor<T>& beta = {});
  Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
  Tensor<T> gelu(const Tensor<T>& x);
  Tensor<T> relu(const Tensor<T>& x);
  /// Rank 2 source [R, F] -> [n, F]. Rank 3 source [B, R, F] with
  /// indices.size() == B*M -> [B, M, F], indices taken per batch entry.
  Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);
  Tensor<T> reshape(const Tensor<T>& x, Shape shape);
  Tensor<T> transpose(const Tensor<T>& x, std::span<const std::size_t> perm);
  /// Mean over every element -> shape {1}.
  Tensor<T> mean(const Tensor<T>& x);
  Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis);
  /// Mean over rows of -log softmax(logits)[target]; logits [rows, K].
  Tensor<T> cross_entropy(const Tensor<T>& logits,
                          std::span<const std::size_t> targets);

  Tensor<T> apply(OpKind kind, std::span<const Tensor<T>> inputs,
                  const OpAttrs& attrs);

  /// Accumulates d(root)/d(leaf) into every leaf that requires a gradient.
  void backward(const Tensor<T>& root);

 private:
  using Backward = std::function<void(const std::vector<T>& grad_out)>;
  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<TensorData<T>>> inputs;
    std::shared_ptr<TensorData<T>> output;
    Backward backward;
  };

  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const;
  Tensor<T> finish(OpKind kind, Tensor<T> out,
                   std::vector<std::shared_ptr<TensorData<T>>> inputs,
                   Backward backward);

  GradMode mode_;
  bool check_finite_ = false;
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// Gradient buffer of t, allocated (zeroed) on first use.
template <typename T>
std::vector<T>& grad_buffer(TensorData<T>& t);

namespace debug {
/// Negative-control hook: perturbs the backward rule of one primitive so
/// that the gradient checker can be shown to catch it.
void inject_backward_fault(OpKind kind);
void clear_backward_fault();
}  // namespace debug

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace jvit
