#include "end2reg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace end2reg {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

// Builds an op result. The closure is kept only if some input is differentiable.
Tensor make_op(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of parent i, or nullptr if that parent is constant.
std::vector<double>* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<double> Tensor::mutable_data() {
  if (node_->backward) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  tape.keep_alive_.push_back(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    tape.nodes_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void Tape::run_backward() {
  if (nodes_.empty()) return;
  Node* root = nodes_.back();
  if (root->value.size() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(root->shape));
  root->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (Node* node : nodes_) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
    }
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward() on undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  Tape::record(loss).run_backward();
}

namespace ops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using CRowMap = Eigen::Map<const RowMatrix>;

namespace {

enum class Broadcast { same, a_scalar, b_scalar };

Broadcast check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (a.numel() == 1) return Broadcast::a_scalar;
  if (b.numel() == 1) return Broadcast::b_scalar;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are not broadcast-compatible");
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const Broadcast mode = check_broadcast(a, b, name);
  const Shape shape = mode == Broadcast::a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto av = a.data();
  auto bv = b.data();
  auto ia = [mode](std::size_t i) { return mode == Broadcast::a_scalar ? 0 : i; };
  auto ib = [mode](std::size_t i) { return mode == Broadcast::b_scalar ? 0 : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[ia(i)], bv[ib(i)]);
  return make_op(shape, std::move(out), {a, b}, [mode, n, ia, ib, da, db](Node& self) {
    const auto& pa = self.parents[0]->value;
    const auto& pb = self.parents[1]->value;
    auto* ga = pgrad(self, 0);
    auto* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i];
      if (ga) (*ga)[ia(i)] += g * da(pa[ia(i)], pb[ib(i)]);
      if (gb) (*gb)[ib(i)] += g * db(pa[ia(i)], pb[ib(i)]);
    }
    (void)mode;
  });
}

template <class Fwd, class D>
Tensor unary(const Tensor& a, Fwd fwd, D deriv) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    auto* ga = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * deriv(x[i], self.value[i]);
  });
}

}  // namespace

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case Elementwise::add:
    case Elementwise::sub:
    case Elementwise::mul:
      if (!b.defined()) throw std::invalid_argument("elementwise: binary op needs two operands");
      break;
    default:
      break;
  }
  switch (kind) {
    case Elementwise::add:
      return binary(a, b, "add", [](double x, double y) { return x + y; },
                    [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
    case Elementwise::sub:
      return binary(a, b, "sub", [](double x, double y) { return x - y; },
                    [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
    case Elementwise::mul:
      return binary(a, b, "mul", [](double x, double y) { return x * y; },
                    [](double, double y) { return y; }, [](double x, double) { return x; });
    case Elementwise::exp:
      return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
    case Elementwise::log:
      for (double x : a.data())
        if (!(x > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(x));
      return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
    case Elementwise::relu:
      return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                   [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::mul, a, b); }
Tensor exp(const Tensor& a) { return elementwise(Elementwise::exp, a); }
Tensor log(const Tensor& a) { return elementwise(Elementwise::log, a); }
Tensor relu(const Tensor& a) { return elementwise(Elementwise::relu, a); }

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  RowMap(out.data(), m, n).noalias() = CRowMap(a.data().data(), m, k) * CRowMap(b.data().data(), k, n);
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const CRowMap A(self.parents[0]->value.data(), m, k);
    const CRowMap B(self.parents[1]->value.data(), k, n);
    const CRowMap G(self.grad.data(), m, n);
    if (auto* ga = pgrad(self, 0)) RowMap(ga->data(), m, k).noalias() += G * B.transpose();
    if (auto* gb = pgrad(self, 1)) RowMap(gb->data(), k, n).noalias() += A.transpose() * G;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_op({c, r}, std::move(out), {a}, [r, c](Node& self) {
    auto* ga = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto* ga = pgrad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

namespace {

std::size_t last_dim(const Tensor& x) { return x.rank() == 0 ? 1 : x.shape().back(); }

}  // namespace

Tensor softmax(const Tensor& x) {
  const std::size_t c = last_dim(x);
  const std::size_t rows = x.numel() / c;
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double* o = out.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  return make_op(x.shape(), std::move(out), {x}, [rows, c](Node& self) {
    auto* gx = pgrad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* g = self.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t c = last_dim(x);
  const std::size_t rows = x.numel() / c;
  const std::vector<double> targets(rows, 0.0);
  if (x.rank() == 2) return log_normalize_rows(x, targets);
  return reshape(log_normalize_rows(reshape(x, {rows, c}), targets), x.shape());
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> index) {
  require_rank(src, 2, "gather_rows");
  const std::size_t n = src.dim(0), c = src.dim(1), m = index.size();
  for (std::size_t i = 0; i < m; ++i)
    if (index[i] > n)
      throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) +
                              " exceeds shadow index " + std::to_string(n));
  auto sv = src.data();
  std::vector<double> out(m * c, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    if (index[i] < n) std::copy_n(sv.data() + index[i] * c, c, out.data() + i * c);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op({m, c}, std::move(out), {src}, [idx = std::move(idx), n, c](Node& self) {
    auto* gs = pgrad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] == n) continue;
      double* dst = gs->data() + idx[i] * c;
      const double* g = self.grad.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
    }
  });
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape())
    throw ShapeError("straight_through: " + shape_str(hard.shape()) + " vs " +
                     shape_str(soft.shape()));
  std::vector<double> out(hard.data().begin(), hard.data().end());
  return make_op(hard.shape(), std::move(out), {hard, soft}, [](Node& self) {
    if (auto* gs = pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gs)[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op({}, {s}, {a}, [](Node& self) {
    auto* ga = pgrad(self, 0);
    for (double& g : *ga) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.numel())
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for shape " +
                     shape_str(a.shape()));
  double s = 0.0;
  auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) s += weights[i] * av[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_op({}, {s}, {a}, [w = std::move(w)](Node& self) {
    auto* ga = pgrad(self, 0);
    for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += self.grad[0] * w[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (begin >= end || end > c)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  auto av = a.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
  return make_op({r, w}, std::move(out), {a}, [r, c, w, begin](Node& self) {
    auto* ga = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*ga)[i * c + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t r = a.dim(0), ca = a.dim(1), cb = b.dim(1), c = ca + cb;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * c);
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * c + ca);
  }
  return make_op({r, c}, std::move(out), {a, b}, [r, ca, cb, c](Node& self) {
    auto* ga = pgrad(self, 0);
    auto* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < r; ++i) {
      if (ga)
        for (std::size_t j = 0; j < ca; ++j) (*ga)[i * ca + j] += self.grad[i * c + j];
      if (gb)
        for (std::size_t j = 0; j < cb; ++j) (*gb)[i * cb + j] += self.grad[i * c + ca + j];
    }
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1))
    throw ShapeError("concat_rows: column counts differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<double> out(na + nb);
  std::copy(a.data().begin(), a.data().end(), out.begin());
  std::copy(b.data().begin(), b.data().end(), out.begin() + static_cast<std::ptrdiff_t>(na));
  return make_op({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b}, [na, nb](Node& self) {
    if (auto* ga = pgrad(self, 0))
      for (std::size_t i = 0; i < na; ++i) (*ga)[i] += self.grad[i];
    if (auto* gb = pgrad(self, 1))
      for (std::size_t i = 0; i < nb; ++i) (*gb)[i] += self.grad[na + i];
  });
}

namespace {

void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
  require_rank(x, 2, op);
  if (v.numel() != x.dim(1))
    throw ShapeError(std::string(op) + ": vector of " + std::to_string(v.numel()) +
                     " entries for matrix " + shape_str(x.shape()));
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "add_rowvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v.data()[j];
  return make_op(x.shape(), std::move(out), {x, v}, [r, c](Node& self) {
    auto* gx = pgrad(self, 0);
    auto* gv = pgrad(self, 1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double g = self.grad[i * c + j];
        if (gx) (*gx)[i * c + j] += g;
        if (gv) (*gv)[j] += g;
      }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "mul_rowvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= v.data()[j];
  return make_op(x.shape(), std::move(out), {x, v}, [r, c](Node& self) {
    const auto& X = self.parents[0]->value;
    const auto& V = self.parents[1]->value;
    auto* gx = pgrad(self, 0);
    auto* gv = pgrad(self, 1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double g = self.grad[i * c + j];
        if (gx) (*gx)[i * c + j] += g * V[j];
        if (gv) (*gv)[j] += g * X[i * c + j];
      }
  });
}

Tensor standardize_cols(const Tensor& x, double eps) {
  require_rank(x, 2, "standardize_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  std::vector<double> mu(c, 0.0), inv_std(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
  for (double& m : mu) m /= static_cast<double>(r);
  for (std::size_t j = 0; j < c; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double d = xv[i * c + j] - mu[j];
      var += d * d;
    }
    inv_std[j] = 1.0 / std::sqrt(var / static_cast<double>(r) + eps);
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (xv[i * c + j] - mu[j]) * inv_std[j];
  return make_op(x.shape(), std::move(out), {x}, [r, c, inv_std = std::move(inv_std)](Node& self) {
    auto* gx = pgrad(self, 0);
    const double rn = static_cast<double>(r);
    for (std::size_t j = 0; j < c; ++j) {
      double gsum = 0.0, gy = 0.0;
      for (std::size_t i = 0; i < r; ++i) {
        const double g = self.grad[i * c + j];
        gsum += g;
        gy += g * self.value[i * c + j];
      }
      for (std::size_t i = 0; i < r; ++i) {
        const double g = self.grad[i * c + j];
        const double y = self.value[i * c + j];
        (*gx)[i * c + j] += inv_std[j] * (g - gsum / rn - y * gy / rn);
      }
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  std::vector<double> inv(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    inv[i] = 1.0 / std::sqrt(s + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * inv[i];
  }
  return make_op(x.shape(), std::move(out), {x}, [r, c, inv = std::move(inv)](Node& self) {
    auto* gx = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*gx)[i * c + j] += inv[i] * (self.grad[i * c + j] - self.value[i * c + j] * dot);
    }
  });
}

Tensor pairwise_distance(const Tensor& a, const Tensor& b, double eps) {
  require_rank(a, 2, "pairwise_distance");
  require_rank(b, 2, "pairwise_distance");
  if (a.dim(1) != b.dim(1))
    throw ShapeError("pairwise_distance: feature widths differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), n = b.dim(0), c = a.dim(1);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = av[i * c + k] - bv[j * c + k];
        s += d * d;
      }
      out[i * n + j] = std::sqrt(s + eps);
    }
  return make_op({m, n}, std::move(out), {a, b}, [m, n, c](Node& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    auto* ga = pgrad(self, 0);
    auto* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        const double s = g / self.value[i * n + j];
        for (std::size_t k = 0; k < c; ++k) {
          const double d = (A[i * c + k] - B[j * c + k]) * s;
          if (ga) (*ga)[i * c + k] += d;
          if (gb) (*gb)[j * c + k] -= d;
        }
      }
  });
}

Tensor log_normalize_rows(const Tensor& x, std::span<const double> log_targets) {
  require_rank(x, 2, "log_normalize_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (log_targets.size() != r)
    throw ShapeError("log_normalize_rows: " + std::to_string(log_targets.size()) +
                     " targets for " + shape_str(x.shape()));
  auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* in = xv.data() + i * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(in[j] - mx);
    const double shift = log_targets[i] - (mx + std::log(s));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[j] + shift;
  }
  std::vector<double> targets(log_targets.begin(), log_targets.end());
  return make_op(x.shape(), std::move(out), {x}, [r, c, targets = std::move(targets)](Node& self) {
    auto* gx = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        // softmax of the input row equals exp(out - target)
        const double p = std::exp(self.value[i * c + j] - targets[i]);
        (*gx)[i * c + j] += self.grad[i * c + j] - p * gsum;
      }
    }
  });
}

Tensor kernel_aggregate(const Tensor& feats, std::span<const std::size_t> neighbors,
                        std::size_t max_neighbors, std::span<const double> influence,
                        std::size_t kernel_size) {
  require_rank(feats, 2, "kernel_aggregate");
  const std::size_t ns = feats.dim(0);
  if (max_neighbors == 0 || neighbors.size() % max_neighbors != 0)
    throw ShapeError("kernel_aggregate: neighbor table is not a multiple of its width");
  const std::size_t nq = neighbors.size() / max_neighbors;
  if (influence.size() != nq * max_neighbors * kernel_size)
    throw ShapeError("kernel_aggregate: influence table has " + std::to_string(influence.size()) +
                     " entries, expected " + std::to_string(nq * max_neighbors * kernel_size));
  for (std::size_t idx : neighbors)
    if (idx > ns) throw std::out_of_range("kernel_aggregate: neighbor index beyond shadow");
  std::vector<KernelTerm> terms;
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t h = 0; h < max_neighbors; ++h) {
      const std::size_t s = neighbors[q * max_neighbors + h];
      if (s == ns) continue;
      const double* w = influence.data() + (q * max_neighbors + h) * kernel_size;
      for (std::size_t k = 0; k < kernel_size; ++k)
        if (w[k] != 0.0)
          terms.push_back({static_cast<std::uint32_t>(q), static_cast<std::uint32_t>(s),
                           static_cast<std::uint32_t>(k), w[k]});
    }
  return kernel_aggregate(feats, std::move(terms), nq, kernel_size);
}

Tensor kernel_aggregate(const Tensor& feats, std::vector<KernelTerm> terms, std::size_t queries,
                        std::size_t kernel_size) {
  require_rank(feats, 2, "kernel_aggregate");
  const std::size_t ns = feats.dim(0), cin = feats.dim(1);
  for (const auto& t : terms)
    if (t.q >= queries || t.s >= ns || t.k >= kernel_size)
      throw std::out_of_range("kernel_aggregate: term index out of range");
  const std::size_t width = kernel_size * cin;
  auto fv = feats.data();
  std::vector<double> out(queries * width, 0.0);
  for (const auto& t : terms) {
    double* o = out.data() + t.q * width + t.k * cin;
    const double* f = fv.data() + t.s * cin;
    for (std::size_t c = 0; c < cin; ++c) o[c] += t.w * f[c];
  }
  return make_op({queries, width}, std::move(out), {feats}, [cin, width, terms = std::move(terms)](Node& self) {
    auto* gf = pgrad(self, 0);
    if (!gf) return;
    for (const auto& t : terms) {
      const double* g = self.grad.data() + t.q * width + t.k * cin;
      double* d = gf->data() + t.s * cin;
      for (std::size_t c = 0; c < cin; ++c) d[c] += t.w * g[c];
    }
  });
}

}  // namespace ops
}  // namespace end2reg
