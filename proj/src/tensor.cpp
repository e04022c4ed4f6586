#include "distillab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace distillab {

using NodePtr = std::shared_ptr<Node>;

// Receives the upstream gradient, the node's own output, its inputs, and which
// inputs actually need a gradient. Returns one (possibly undefined) gradient
// per input. Implementations must only use differentiable ops so that the
// backward pass is recorded when grad mode is on.
using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad_out, const Tensor& out, const std::vector<Tensor>& inputs,
    const std::vector<bool>& needs)>;

struct Node {
  Shape shape;
  std::vector<double> values;
  bool tracked = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  ~Node() {
    // Release long input chains iteratively; unrolled training graphs are deep.
    std::vector<NodePtr> pending = std::move(inputs);
    while (!pending.empty()) {
      NodePtr n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& in : n->inputs) pending.push_back(std::move(in));
        n->inputs.clear();
      }
    }
  }
};

namespace {

thread_local bool tls_grad_enabled = true;

std::vector<Tensor> wrap(const std::vector<NodePtr>& nodes) {
  std::vector<Tensor> out;
  out.reserve(nodes.size());
  for (const auto& n : nodes) out.emplace_back(n);
  return out;
}

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw TensorError("tensor data length " + std::to_string(values.size()) +
                      " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->tracked = requires_grad;
  return Tensor(std::move(node));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool any_tracked = false;
  for (const Tensor* t : inputs) any_tracked = any_tracked || t->tracked();
  if (any_tracked && tls_grad_enabled) {
    node->tracked = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool any_tracked = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.tracked(); });
  if (any_tracked && tls_grad_enabled) {
    node->tracked = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw TensorError(std::string(op) + ": undefined tensor");
}

// Sum a gradient back down to the shape of a broadcast scalar operand.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  if (g.numel() == numel_of(shape)) return reshape(g, shape);
  return reshape(sum(g), shape);
}

enum class Broadcast { same, left_scalar, right_scalar };

Broadcast check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.numel() == b.numel() && (a.shape() == b.shape() || a.numel() == 1)) {
    return Broadcast::same;
  }
  if (a.numel() == 1) return Broadcast::left_scalar;
  if (b.numel() == 1) return Broadcast::right_scalar;
  throw TensorError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                    to_string(b.shape()));
}

template <typename F>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, BackwardFn backward) {
  const Broadcast mode = check_broadcast(a, b, op);
  const auto da = a.data();
  const auto db = b.data();
  Shape shape = mode == Broadcast::left_scalar ? b.shape() : a.shape();
  // one-element operands of different rank: keep the higher rank
  if (mode == Broadcast::same && b.rank() > a.rank()) shape = b.shape();
  std::vector<double> out(numel_of(shape));
  switch (mode) {
    case Broadcast::same:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
      break;
    case Broadcast::left_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[0], db[i]);
      break;
    case Broadcast::right_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[0]);
      break;
  }
  return make_result(op, std::move(shape), std::move(out), {&a, &b}, std::move(backward));
}

template <typename F>
Tensor unary(const char* op, const Tensor& a, F f, BackwardFn backward) {
  require_defined(a, op);
  const auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i]);
  return make_result(op, a.shape(), std::move(out), {&a}, std::move(backward));
}

enum class Trans { none, left, right };

// C = op(A) * op(B) with op selected by `trans`:
//   none:  A[m,k]  B[k,n]
//   right: A[m,k]  B[n,k]   (A B^T)
//   left:  A[k,m]  B[k,n]   (A^T B)
Tensor matmul_impl(const Tensor& a, const Tensor& b, Trans trans);

std::vector<Tensor> matmul_backward(const Tensor& g, const std::vector<Tensor>& in,
                                    const std::vector<bool>& needs, Trans trans) {
  const Tensor& a = in[0];
  const Tensor& b = in[1];
  std::vector<Tensor> grads(2);
  switch (trans) {
    case Trans::none:
      if (needs[0]) grads[0] = matmul_impl(g, b, Trans::right);
      if (needs[1]) grads[1] = matmul_impl(a, g, Trans::left);
      break;
    case Trans::right:
      if (needs[0]) grads[0] = matmul_impl(g, b, Trans::none);
      if (needs[1]) grads[1] = matmul_impl(g, a, Trans::left);
      break;
    case Trans::left:
      if (needs[0]) grads[0] = matmul_impl(b, g, Trans::right);
      if (needs[1]) grads[1] = matmul_impl(a, g, Trans::none);
      break;
  }
  return grads;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, Trans trans) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) {
    throw TensorError("matmul: expected 2-D operands, got " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  }
  const bool left = trans == Trans::left;
  const bool right = trans == Trans::right;
  const std::size_t m = left ? a.dim(1) : a.dim(0);
  const std::size_t k = left ? a.dim(0) : a.dim(1);
  const std::size_t n = right ? b.dim(0) : b.dim(1);
  if ((right ? b.dim(1) : b.dim(0)) != k) {
    throw TensorError("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  }
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(m * n, 0.0);
  double* pc = out.data();
  switch (trans) {
    case Trans::none:
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          const double* brow = pb + p * n;
          double* crow = pc + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
      break;
    case Trans::right:
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double* brow = pb + j * k;
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
          pc[i * n + j] = acc;
        }
      }
      break;
    case Trans::left:
      for (std::size_t p = 0; p < k; ++p) {
        const double* arow = pa + p * m;
        const double* brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
          const double av = arow[i];
          if (av == 0.0) continue;
          double* crow = pc + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
      break;
  }
  static constexpr const char* names[] = {"matmul", "matmul_tn", "matmul_nt"};
  const char* name = trans == Trans::none ? names[0] : trans == Trans::left ? names[1] : names[2];
  return make_result(name, {m, n}, std::move(out), {&a, &b},
                     [trans](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                             const std::vector<bool>& needs) {
                       return matmul_backward(g, in, needs, trans);
                     });
}

Tensor pad_flat(const Tensor& a, std::size_t offset, Shape shape);

Tensor slice_flat(const Tensor& a, std::size_t offset, Shape shape) {
  require_defined(a, "slice");
  const std::size_t n = numel_of(shape);
  if (offset + n > a.numel()) {
    throw TensorError("slice: range [" + std::to_string(offset) + ", " +
                      std::to_string(offset + n) + ") exceeds " + std::to_string(a.numel()));
  }
  const auto da = a.data();
  std::vector<double> out(da.begin() + static_cast<std::ptrdiff_t>(offset),
                          da.begin() + static_cast<std::ptrdiff_t>(offset + n));
  Shape source = a.shape();
  return make_result("slice", std::move(shape), std::move(out), {&a},
                     [offset, source](const Tensor& g, const Tensor&, const std::vector<Tensor>&,
                                      const std::vector<bool>&) {
                       return std::vector<Tensor>{pad_flat(g, offset, source)};
                     });
}

Tensor pad_flat(const Tensor& a, std::size_t offset, Shape shape) {
  const std::size_t n = numel_of(shape);
  if (offset + a.numel() > n) throw TensorError("pad: range exceeds target");
  std::vector<double> out(n, 0.0);
  const auto da = a.data();
  std::copy(da.begin(), da.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
  Shape source = a.shape();
  return make_result("pad", std::move(shape), std::move(out), {&a},
                     [offset, source](const Tensor& g, const Tensor&, const std::vector<Tensor>&,
                                      const std::vector<bool>&) {
                       return std::vector<Tensor>{slice_flat(g, offset, source)};
                     });
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> data(numel_of(shape), value);
  return make_leaf(std::move(shape), std::move(data), false);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw TensorError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return numel_of(shape()); }

std::span<const double> Tensor::data() const {
  if (!node_) throw TensorError("undefined tensor");
  return node_->values;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item: tensor of shape " + to_string(shape()));
  return node_->values[0];
}

bool Tensor::tracked() const { return node_ && node_->tracked; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }
const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::detach() const { return make_leaf(shape(), to_vector(), false); }
Tensor Tensor::detach_leaf() const { return make_leaf(shape(), to_vector(), true); }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }
bool grad_mode_enabled() { return tls_grad_enabled; }

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                   const std::vector<bool>& needs) {
                  std::vector<Tensor> r(2);
                  if (needs[0]) r[0] = reduce_to(g, in[0].shape());
                  if (needs[1]) r[1] = reduce_to(g, in[1].shape());
                  return r;
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                   const std::vector<bool>& needs) {
                  std::vector<Tensor> r(2);
                  if (needs[0]) r[0] = reduce_to(g, in[0].shape());
                  if (needs[1]) r[1] = reduce_to(neg(g), in[1].shape());
                  return r;
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                   const std::vector<bool>& needs) {
                  std::vector<Tensor> r(2);
                  if (needs[0]) r[0] = reduce_to(mul(g, in[1]), in[0].shape());
                  if (needs[1]) r[1] = reduce_to(mul(g, in[0]), in[1].shape());
                  return r;
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw TensorError("div: zero divisor");
  }
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                   const std::vector<bool>& needs) {
                  std::vector<Tensor> r(2);
                  if (needs[0]) r[0] = reduce_to(div(g, in[1]), in[0].shape());
                  if (needs[1]) {
                    r[1] = reduce_to(neg(div(mul(g, in[0]), square(in[1]))), in[1].shape());
                  }
                  return r;
                });
}

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; },
               [](const Tensor& g, const Tensor&, const std::vector<Tensor>&,
                  const std::vector<bool>&) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](const Tensor& g, const Tensor&, const std::vector<Tensor>&,
                        const std::vector<bool>&) {
                 return std::vector<Tensor>{scale(g, factor)};
               });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               [](const Tensor& g, const Tensor&, const std::vector<Tensor>&,
                  const std::vector<bool>&) { return std::vector<Tensor>{g}; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                  const std::vector<bool>&) {
                 const auto x = in[0].data();
                 std::vector<double> mask(x.size());
                 for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
                 return std::vector<Tensor>{mul(g, Tensor::from(in[0].shape(), std::move(mask)))};
               });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](const Tensor& g, const Tensor& out, const std::vector<Tensor>&,
                  const std::vector<bool>&) { return std::vector<Tensor>{mul(g, out)}; });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0.0)) throw TensorError("log: non-positive input");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                  const std::vector<bool>&) { return std::vector<Tensor>{div(g, in[0])}; });
}

Tensor sqrt(const Tensor& a) {
  require_defined(a, "sqrt");
  for (double v : a.data()) {
    if (v < 0.0) throw TensorError("sqrt: negative input");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](const Tensor& g, const Tensor& out, const std::vector<Tensor>&,
                  const std::vector<bool>&) {
                 return std::vector<Tensor>{scale(div(g, out), 0.5)};
               });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                  const std::vector<bool>&) {
                 return std::vector<Tensor>{mul(g, scale(in[0], 2.0))};
               });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, Trans::none); }

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result("sum", {}, {acc}, {&a},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{mul(g, Tensor::ones(in[0].shape()))};
                     });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw TensorError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor row_sum(const Tensor& a) {
  require_defined(a, "row_sum");
  if (a.rank() != 2) throw TensorError("row_sum: expected 2-D tensor, got " + to_string(a.shape()));
  return matmul(a, Tensor::ones({a.dim(1), 1}));
}

Tensor repeat_cols(const Tensor& column, std::size_t cols) {
  if (column.rank() != 2 || column.dim(1) != 1) {
    throw TensorError("repeat_cols: expected [R x 1], got " + to_string(column.shape()));
  }
  return matmul(column, Tensor::ones({1, cols}));
}

Tensor repeat_rows(const Tensor& row, std::size_t rows) {
  if (row.rank() != 2 || row.dim(0) != 1) {
    throw TensorError("repeat_rows: expected [1 x C], got " + to_string(row.shape()));
  }
  return matmul(Tensor::ones({rows, 1}), row);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw TensorError("dot: shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
  return sum(mul(a, reshape(b, a.shape())));
}

Tensor l2norm(const Tensor& a) { return sqrt(sum(square(a))); }

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel_of(shape) != a.numel()) {
    throw TensorError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  if (shape == a.shape()) return a;
  return make_result("reshape", std::move(shape), a.to_vector(), {&a},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                        const std::vector<bool>&) {
                       return std::vector<Tensor>{reshape(g, in[0].shape())};
                     });
}

Tensor flatten_rows(const Tensor& a) {
  if (a.rank() == 0) throw TensorError("flatten_rows: scalar input");
  return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw TensorError("transpose: expected 2-D tensor, got " + to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto index = std::make_shared<std::vector<std::int64_t>>(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) (*index)[j * r + i] = static_cast<std::int64_t>(i * c + j);
  }
  return gather(a, std::move(index), {c, r});
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw TensorError("concat: incompatible shape " + to_string(p.shape()));
    }
    rows += p.dim(0);
    auto d = p.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result_n("concat", std::move(shape), std::move(out), parts,
                       [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                          const std::vector<bool>& needs) {
                         std::vector<Tensor> r(in.size());
                         std::size_t offset = 0;
                         for (std::size_t i = 0; i < in.size(); ++i) {
                           if (needs[i]) r[i] = slice_flat(g, offset, in[i].shape());
                           offset += in[i].numel();
                         }
                         return r;
                       });
}

Tensor index_select(const Tensor& a, std::span<const std::size_t> rows) {
  require_defined(a, "index_select");
  if (a.rank() == 0) throw TensorError("index_select: scalar input");
  const std::size_t n = a.dim(0);
  const std::size_t stride = a.numel() / n;
  auto index = std::make_shared<std::vector<std::int64_t>>(rows.size() * stride);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw TensorError("index_select: row " + std::to_string(rows[r]) + " out of range " +
                        std::to_string(n));
    }
    for (std::size_t j = 0; j < stride; ++j) {
      (*index)[r * stride + j] = static_cast<std::int64_t>(rows[r] * stride + j);
    }
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return gather(a, std::move(index), std::move(shape));
}

Tensor slice(const Tensor& a, std::size_t offset, Shape shape) {
  return slice_flat(a, offset, std::move(shape));
}

Tensor gather(const Tensor& a, IndexMap index, Shape out_shape) {
  require_defined(a, "gather");
  if (!index || index->size() != numel_of(out_shape)) {
    throw TensorError("gather: index map size does not match " + to_string(out_shape));
  }
  const auto da = a.data();
  const auto n = static_cast<std::int64_t>(da.size());
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int64_t src = (*index)[i];
    if (src >= n) throw TensorError("gather: index out of range");
    out[i] = src < 0 ? 0.0 : da[static_cast<std::size_t>(src)];
  }
  return make_result("gather", std::move(out_shape), std::move(out), {&a},
                     [index](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                             const std::vector<bool>&) {
                       return std::vector<Tensor>{scatter_add(g, index, in[0].shape())};
                     });
}

Tensor scatter_add(const Tensor& a, IndexMap index, Shape out_shape) {
  require_defined(a, "scatter_add");
  if (!index || index->size() != a.numel()) {
    throw TensorError("scatter_add: index map size does not match input");
  }
  const auto da = a.data();
  std::vector<double> out(numel_of(out_shape), 0.0);
  const auto n = static_cast<std::int64_t>(out.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    const std::int64_t dst = (*index)[i];
    if (dst >= n) throw TensorError("scatter_add: index out of range");
    if (dst >= 0) out[static_cast<std::size_t>(dst)] += da[i];
  }
  return make_result("scatter_add", std::move(out_shape), std::move(out), {&a},
                     [index](const Tensor& g, const Tensor&, const std::vector<Tensor>& in,
                             const std::vector<bool>&) {
                       return std::vector<Tensor>{gather(g, index, in[0].shape())};
                     });
}

// ---------------------------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* op) {
  require_defined(t, op);
  if (t.rank() != 2) throw TensorError(std::string(op) + ": expected [B x K], got " + to_string(t.shape()));
}

// logits minus a per-row constant (the row max); the shift carries no gradient.
Tensor shift_by_row_max(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto d = logits.data();
  std::vector<double> shift(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double m = *std::max_element(d.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                       d.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    std::fill_n(shift.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, m);
  }
  return sub(logits, Tensor::from(logits.shape(), std::move(shift)));
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  require_matrix(logits, "softmax_rows");
  Tensor e = exp(shift_by_row_max(logits));
  return div(e, repeat_cols(row_sum(e), logits.dim(1)));
}

Tensor log_softmax_rows(const Tensor& logits) {
  require_matrix(logits, "log_softmax_rows");
  Tensor shifted = shift_by_row_max(logits);
  Tensor lse = log(row_sum(exp(shifted)));
  return sub(shifted, repeat_cols(lse, logits.dim(1)));
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& soft_targets) {
  require_matrix(logits, "softmax_cross_entropy");
  require_matrix(soft_targets, "softmax_cross_entropy");
  if (logits.shape() != soft_targets.shape()) {
    throw TensorError("softmax_cross_entropy: logits " + to_string(logits.shape()) +
                      " vs targets " + to_string(soft_targets.shape()));
  }
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (rows == 0) throw TensorError("softmax_cross_entropy: empty batch");
  const auto t = soft_targets.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = t[r * cols + c];
      if (v < 0.0) throw TensorError("softmax_cross_entropy: negative target");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw TensorError("softmax_cross_entropy: target row " + std::to_string(r) +
                        " sums to " + std::to_string(s));
    }
  }
  return scale(sum(mul(soft_targets, log_softmax_rows(logits))), -1.0 / static_cast<double>(rows));
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  std::vector<double> out(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw TensorError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    }
    out[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::from({labels.size(), num_classes}, std::move(out));
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, bool strict) {
  Tensor nu = l2norm(u);
  Tensor nv = l2norm(v);
  if (strict && (nu.item() == 0.0 || nv.item() == 0.0)) {
    throw TensorError("cosine_similarity: zero-norm input");
  }
  Tensor denom = mul(add_scalar(nu, kCosineEpsilon), add_scalar(nv, kCosineEpsilon));
  return div(dot(u, v), denom);
}

Tensor normalize_rows(const Tensor& a, double eps) {
  require_matrix(a, "normalize_rows");
  Tensor norms = add_scalar(sqrt(row_sum(square(a))), eps);
  return div(a, repeat_cols(norms, a.dim(1)));
}

// ---------------------------------------------------------------------------

namespace {

// Post-order over tracked nodes reachable from root.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->tracked && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

std::vector<Tensor> grad(const Tensor& loss, const std::vector<Tensor>& wrt, bool create_graph) {
  require_defined(loss, "grad");
  if (loss.numel() != 1) throw TensorError("grad: loss must be scalar, got " + to_string(loss.shape()));
  if (!loss.tracked()) throw TensorError("grad: loss is not part of a tracked graph");
  std::unordered_set<Node*> targets;
  for (const Tensor& w : wrt) {
    require_defined(w, "grad");
    if (!w.tracked()) throw TensorError("grad: requested gradient of an untracked tensor");
    targets.insert(w.node().get());
  }

  const std::vector<Node*> order = topo_order(loss.node().get());
  std::unordered_map<Node*, bool> reaches;
  reaches.reserve(order.size());
  for (Node* n : order) {
    bool r = targets.count(n) > 0;
    for (const auto& in : n->inputs) {
      auto it = reaches.find(in.get());
      if (it != reaches.end() && it->second) r = true;
    }
    reaches[n] = r;
  }

  std::optional<NoGradGuard> no_grad;
  if (!create_graph) no_grad.emplace();

  std::unordered_map<Node*, Tensor> grads;
  grads[loss.node().get()] = Tensor::ones(loss.shape());
  // Owning handles so `out` can be passed to backward functions.
  std::unordered_map<Node*, NodePtr> owners;
  owners[loss.node().get()] = loss.node();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!reaches[n] || n->inputs.empty()) continue;
    auto g = grads.find(n);
    if (g == grads.end()) continue;
    std::vector<bool> needs(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      auto r = reaches.find(n->inputs[i].get());
      needs[i] = r != reaches.end() && r->second;
      any = any || needs[i];
    }
    if (!any) continue;
    const Tensor out(owners.at(n));
    const std::vector<Tensor> inputs = wrap(n->inputs);
    std::vector<Tensor> input_grads = n->backward(g->second, out, inputs, needs);
    if (!targets.count(n)) grads.erase(g);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!needs[i] || !input_grads[i].defined()) continue;
      Node* key = n->inputs[i].get();
      owners.emplace(key, n->inputs[i]);
      auto [slot, inserted] = grads.try_emplace(key, input_grads[i]);
      if (!inserted) slot->second = add(slot->second, input_grads[i]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    auto it = grads.find(w.node().get());
    result.push_back(it != grads.end() ? it->second : Tensor::zeros(w.shape()));
  }
  return result;
}

std::vector<GraphRecord> graph_records(const Tensor& root) {
  require_defined(root, "graph_records");
  std::vector<GraphRecord> records;
  if (!root.tracked()) {
    records.push_back({root.op_name(), {}, root.id()});
    return records;
  }
  std::unordered_set<const Node*> constants;
  for (Node* n : topo_order(root.node().get())) {
    GraphRecord rec{n->op, {}, n};
    for (const auto& in : n->inputs) {
      // Untracked operands are not walked by topo_order; record them as leaves.
      if (!in->tracked && constants.insert(in.get()).second) {
        records.push_back({in->op, {}, in.get()});
      }
      rec.inputs.push_back(in.get());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace distillab
