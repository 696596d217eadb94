#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable node. Every differentiable op
// records its parents and a backward closure; backward() orders the reachable
// graph topologically (the Tape) and visits each node once.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace end2reg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape[1] + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // In-place access for optimizers and test fixtures. Only valid on leaves.
  std::span<double> mutable_data();

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the graph reachable from one root.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

  // Seeds d(root)/d(root) = 1 and propagates in reverse order, then releases
  // closures and parent links so the graph can be freed.
  void run_backward();

 private:
  std::vector<detail::Node*> nodes_;
  std::vector<std::shared_ptr<detail::Node>> keep_alive_;
};

// Populates grads of every requires_grad leaf reachable from `loss`.
void backward(const Tensor& loss);

namespace ops {

enum class Elementwise { add, sub, mul, exp, log, relu };

// Binary kinds broadcast only scalar-vs-tensor or equal shapes.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& x);      // over the last axis
Tensor log_softmax(const Tensor& x);  // over the last axis

// Rows of src[N x C] selected by index; index == N yields a zero row.
Tensor gather_rows(const Tensor& src, std::span<const std::size_t> index);

Tensor stop_gradient(const Tensor& x);

// Forward value of `hard`, gradient routed to `soft` unchanged.
// Numerically identical to hard - stop_gradient(soft) + soft without the
// rounding of the two subtractions.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// sum_i w_i * a_i with constant weights w (same numel as a).
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// x[N x C] combined row-wise with a length-C vector.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);

// Per-column standardization over rows: (x - mean) / sqrt(var + eps).
Tensor standardize_cols(const Tensor& x, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// D[i,j] = sqrt(|a_i - b_j|^2 + eps).
Tensor pairwise_distance(const Tensor& a, const Tensor& b, double eps = 1e-12);

// Rows shifted so that logsumexp(row i) == log_targets[i].
Tensor log_normalize_rows(const Tensor& x, std::span<const double> log_targets);

// Kernel-point aggregation: out[q, k*Cin + c] = sum_h influence[q,h,k] * feats[nbr[q,h], c].
// Neighbor index == Ns (shadow) contributes nothing. Influence is geometric and constant.
Tensor kernel_aggregate(const Tensor& feats, std::span<const std::size_t> neighbors,
                        std::size_t max_neighbors, std::span<const double> influence,
                        std::size_t kernel_size);

// Same, from the nonzero (query, support, kernel, weight) terms only.
struct KernelTerm {
  std::uint32_t q, s, k;
  double w;
};
Tensor kernel_aggregate(const Tensor& feats, std::vector<KernelTerm> terms, std::size_t queries,
                        std::size_t kernel_size);

}  // namespace ops
}  // namespace end2reg
