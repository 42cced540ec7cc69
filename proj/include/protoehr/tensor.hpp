#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "protoehr/errors.hpp"
#include "protoehr/rng.hpp"

namespace protoehr {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorNode;

/// Backward rule of one graph node: given the gradient w.r.t. this node's
/// output (`gout`, flat, same layout as `self.data`), accumulate gradients
/// into the per-input sinks `gin` (nullptr for inputs that need no gradient).
using BackwardFn =
    std::function<void(const TensorNode& self, const double* gout, const std::vector<double*>& gin)>;

/// One node of the compute graph: cached forward value, input references,
/// and the backward rule. Acyclic by construction (inputs precede outputs).
struct TensorNode {
  Shape shape;
  std::vector<double> data;  // flat, row-major
  bool requires_grad = false;
  std::vector<double> grad;  // leaves only; allocated lazily, accumulated across backward calls
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn backward_fn;  // empty for leaves

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool is_leaf() const { return !backward_fn; }
};

/// Dense n-dimensional double tensor participating in a reverse-mode
/// differentiation graph. Value-semantics handle over a shared node;
/// immutable after creation except the gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Entries drawn i.i.d. from N(0, stddev^2).
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
  /// Xavier/Glorot uniform init for a rows x cols weight matrix.
  static Tensor xavier_uniform(std::int64_t rows, std::int64_t cols, Rng& rng,
                               bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t rows() const;
  std::int64_t cols() const;

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  double item() const;
  double at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i, std::int64_t j) const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient buffer of a requires_grad tensor (zeros until backward reaches it).
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

  /// Same data, detached from the graph (fresh constant leaf).
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// While alive, ops record no graph (forward values only). Thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise & scalar ----
// Binary elementwise ops accept equal shapes, or a 1-element tensor on
// either side (scalar-vs-tensor); no other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);        // -> shape {1}
Tensor mean(const Tensor& a);       // -> shape {1}
Tensor mean_rows(const Tensor& a);  // n x d -> {d}, mean over axis 0

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // m x k by k x n
Tensor transpose(const Tensor& a);                // 2-D
Tensor dot(const Tensor& a, const Tensor& b);     // 1-D, equal length -> {1}

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 1-D axis 0; 2-D axis 0/1
Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count);
Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count);
Tensor select(const Tensor& a, std::int64_t i);  // 1-D -> {1}
/// Stacks equal-length 1-D tensors as rows of an n x d matrix.
Tensor stack_rows(const std::vector<Tensor>& rows);

// ---- gather / scatter ----
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& idx);
Tensor scatter_add_rows(const Tensor& rows, const std::vector<std::int64_t>& idx,
                        std::int64_t out_rows);

// ---- nonlinear blocks ----
/// Max-subtracted softmax along `axis` (0 for 1-D; 0 or 1 for 2-D).
Tensor softmax(const Tensor& a, int axis);
/// out[k] = sum_i a[i] * b[(i+k) mod d], both 1-D of length d.
Tensor circular_correlation(const Tensor& a, const Tensor& b);
/// Row-wise batch of circular correlations; a and b are n x d.
Tensor circular_correlation_rows(const Tensor& a, const Tensor& b);
/// Pairwise cosine similarity of rows: x (n x d), h (m x d) -> n x m.
/// A pair with an exactly zero-norm row on either side yields 0 (and a
/// zero subgradient).
Tensor cosine_rows(const Tensor& x, const Tensor& h);
/// Row-wise layer normalization with learnable gain/bias of length d.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
/// Train mode: inverted-dropout mask drawn from `seed`, identical in
/// forward and backward; eval mode: identity.
Tensor dropout(const Tensor& a, double p, std::uint64_t seed, bool training);

// ---- losses ----
/// Mean over all elements of softplus(z) - y*z with logits clamped to
/// [-clamp, clamp]; equals binary cross-entropy at p = sigmoid(clamped z).
/// Targets are treated as constants.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double clamp = 30.0);
/// Categorical cross-entropy of a 1-D logit vector against a class index.
Tensor ce_with_logits(const Tensor& logits, std::int64_t label);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable requires_grad leaf; calling twice without zero_grad doubles
/// them. Intermediate nodes hold no persistent gradient.
void backward(const Tensor& loss);

}  // namespace protoehr
