#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace distillab {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for shape mismatches, domain violations and other misuse of tensor ops.
class TensorError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a cheap handle to an immutable node. Operations on tracked
/// inputs produce tracked outputs that remember how they were computed;
/// `grad()` walks that record backwards. Backward passes are themselves
/// built from ordinary ops, so with `create_graph` the gradients can be
/// differentiated again.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  /// True when this value participates in a gradient computation.
  bool tracked() const;
  bool is_leaf() const;
  /// Name of the producing op ("leaf" for inputs).
  const char* op_name() const;
  /// Opaque identity of the producing node.
  const void* id() const { return node_.get(); }

  /// Untracked copy of the values.
  Tensor detach() const;
  /// Untracked copy that is a new gradient leaf.
  Tensor detach_leaf() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// ---------------------------------------------------------------------------
// Elementwise. Shapes must match exactly, or one side must hold one element.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double s, const Tensor& a);
Tensor operator*(const Tensor& a, double s);

// ---------------------------------------------------------------------------
// Linear algebra, reductions and shape manipulation.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [R x C] -> [R x 1]
Tensor row_sum(const Tensor& a);
/// [R x 1] -> [R x C] by repeating each row value.
Tensor repeat_cols(const Tensor& column, std::size_t cols);
/// [1 x C] -> [R x C] by repeating the row.
Tensor repeat_rows(const Tensor& row, std::size_t rows);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2norm(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten_rows(const Tensor& a);
/// 2-D transpose.
Tensor transpose(const Tensor& a);
/// Concatenate along axis 0; trailing extents must agree.
Tensor concat(const std::vector<Tensor>& parts);
/// Select rows (axis 0 slabs) in the given order.
Tensor index_select(const Tensor& a, std::span<const std::size_t> rows);
/// Contiguous flat range reshaped to `shape`.
Tensor slice(const Tensor& a, std::size_t offset, Shape shape);

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// out[i] = index[i] < 0 ? 0 : a.flat[index[i]]. Every linear re-indexing
/// (transpose, crops, im2col, pooling windows) reduces to this op.
Tensor gather(const Tensor& a, IndexMap index, Shape out_shape);
/// out.flat[index[i]] += a.flat[i] for index[i] >= 0; adjoint of gather.
Tensor scatter_add(const Tensor& a, IndexMap index, Shape out_shape);

// ---------------------------------------------------------------------------
// Losses and similarities.

/// Row-wise softmax of a [B x K] matrix.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);
/// mean_b( -sum_k target_bk * log softmax(logits)_bk ). Target rows must sum to 1.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& soft_targets);
/// One-hot [B x K] matrix.
Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

inline constexpr double kCosineEpsilon = 1e-8;
/// u.v / ((|u| + eps)(|v| + eps)). In strict mode a zero-norm input throws.
Tensor cosine_similarity(const Tensor& u, const Tensor& v, bool strict = false);
/// Divide each row by (its L2 norm + eps).
Tensor normalize_rows(const Tensor& a, double eps = kCosineEpsilon);

// ---------------------------------------------------------------------------
// Differentiation.

/// d loss / d wrt[i]. Inputs that cannot reach `loss` get a zero gradient.
/// With create_graph the results are tracked and can be differentiated again.
std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

struct GraphRecord {
  const char* op;
  std::vector<const void*> inputs;
  const void* output;
};

/// Nodes reachable from `root` in topological order (inputs first).
std::vector<GraphRecord> graph_records(const Tensor& root);

}  // namespace distillab
