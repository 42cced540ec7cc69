#include "protoehr/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace protoehr {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

/// Creates the result node. When grad is off or no input needs it, the
/// result is a plain constant leaf and the graph is not extended.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto n = make_leaf(std::move(shape), std::move(data), false);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    n->requires_grad = true;
    n->op = op;
    n->inputs.reserve(inputs.size());
    for (const auto& t : inputs) n->inputs.push_back(t.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(n);
}

void check_defined(const Tensor& t, const char* where) {
  if (!t.defined()) throw ContractError(std::string(where) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void check_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(a.shape()));
}

void check_1d(const Tensor& a, const char* op) {
  if (a.ndim() != 1)
    throw DimensionError(std::string(op) + ": expected 1-D tensor, got " + shape_str(a.shape()));
}

void axpy(double* dst, const double* src, std::int64_t n, double scale = 1.0) {
  MapV(dst, n) += scale * CMapV(src, n);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape),
                          std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw DimensionError("from_data: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::xavier_uniform(std::int64_t rows, std::int64_t cols, Rng& rng, bool requires_grad) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> data(static_cast<std::size_t>(rows * cols));
  for (auto& v : data) v = rng.uniform(-limit, limit);
  return Tensor(make_leaf({rows, cols}, std::move(data), requires_grad));
}

std::int64_t Tensor::rows() const {
  if (ndim() != 2) throw DimensionError("rows(): tensor is " + shape_str(shape()));
  return shape()[0];
}

std::int64_t Tensor::cols() const {
  if (ndim() != 2) throw DimensionError("cols(): tensor is " + shape_str(shape()));
  return shape()[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
  return node_->data[static_cast<std::size_t>(i * cols() + j)];
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("grad(): tensor does not require grad");
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
  grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ----

namespace {

enum class BinKind { kSame, kScalarLeft, kScalarRight };

BinKind binary_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BinKind::kSame;
  if (a.numel() == 1) return BinKind::kScalarLeft;
  if (b.numel() == 1) return BinKind::kScalarRight;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()) + " (only scalar-vs-tensor broadcast is supported)");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  const BinKind kind = binary_kind(a, b, "add");
  const Tensor& big = kind == BinKind::kScalarLeft ? b : a;
  std::vector<double> out(big.data());
  if (kind == BinKind::kSame) {
    axpy(out.data(), b.data().data(), big.numel());
  } else {
    const double s = (kind == BinKind::kScalarLeft ? a : b).item();
    for (auto& v : out) v += s;
  }
  return make_op("add", big.shape(), std::move(out), {a, b},
                 [kind](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   const std::int64_t n = self.numel();
                   for (int i = 0; i < 2; ++i) {
                     if (!gin[i]) continue;
                     const bool scalar_side = (kind == BinKind::kScalarLeft && i == 0) ||
                                              (kind == BinKind::kScalarRight && i == 1);
                     if (scalar_side) {
                       double s = 0.0;
                       for (std::int64_t k = 0; k < n; ++k) s += gout[k];
                       gin[i][0] += s;
                     } else {
                       axpy(gin[i], gout, n);
                     }
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  const BinKind kind = binary_kind(a, b, "sub");
  const Tensor& big = kind == BinKind::kScalarLeft ? b : a;
  std::vector<double> out(static_cast<std::size_t>(big.numel()));
  const std::int64_t n = big.numel();
  if (kind == BinKind::kSame) {
    for (std::int64_t k = 0; k < n; ++k) out[k] = a.at(k) - b.at(k);
  } else if (kind == BinKind::kScalarLeft) {
    const double s = a.item();
    for (std::int64_t k = 0; k < n; ++k) out[k] = s - b.at(k);
  } else {
    const double s = b.item();
    for (std::int64_t k = 0; k < n; ++k) out[k] = a.at(k) - s;
  }
  return make_op("sub", big.shape(), std::move(out), {a, b},
                 [kind](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   const std::int64_t n = self.numel();
                   if (gin[0]) {
                     if (kind == BinKind::kScalarLeft) {
                       double s = 0.0;
                       for (std::int64_t k = 0; k < n; ++k) s += gout[k];
                       gin[0][0] += s;
                     } else {
                       axpy(gin[0], gout, n);
                     }
                   }
                   if (gin[1]) {
                     if (kind == BinKind::kScalarRight) {
                       double s = 0.0;
                       for (std::int64_t k = 0; k < n; ++k) s += gout[k];
                       gin[1][0] -= s;
                     } else {
                       axpy(gin[1], gout, n, -1.0);
                     }
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  const BinKind kind = binary_kind(a, b, "mul");
  const Tensor& big = kind == BinKind::kScalarLeft ? b : a;
  const std::int64_t n = big.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  if (kind == BinKind::kSame) {
    for (std::int64_t k = 0; k < n; ++k) out[k] = a.at(k) * b.at(k);
  } else {
    const double s = (kind == BinKind::kScalarLeft ? a : b).item();
    const Tensor& t = kind == BinKind::kScalarLeft ? b : a;
    for (std::int64_t k = 0; k < n; ++k) out[k] = s * t.at(k);
  }
  return make_op("mul", big.shape(), std::move(out), {a, b},
                 [kind](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   const std::int64_t n = self.numel();
                   const auto& av = self.inputs[0]->data;
                   const auto& bv = self.inputs[1]->data;
                   auto side = [&](int me, int other, const std::vector<double>& ov) {
                     if (!gin[me]) return;
                     const bool me_scalar = (kind == BinKind::kScalarLeft && me == 0) ||
                                            (kind == BinKind::kScalarRight && me == 1);
                     const bool other_scalar = (kind == BinKind::kScalarLeft && other == 0) ||
                                               (kind == BinKind::kScalarRight && other == 1);
                     if (me_scalar) {
                       double s = 0.0;
                       for (std::int64_t k = 0; k < n; ++k) s += gout[k] * ov[static_cast<std::size_t>(k)];
                       gin[me][0] += s;
                     } else if (other_scalar) {
                       axpy(gin[me], gout, n, ov[0]);
                     } else {
                       for (std::int64_t k = 0; k < n; ++k)
                         gin[me][k] += gout[k] * ov[static_cast<std::size_t>(k)];
                     }
                   };
                   side(0, 1, bv);
                   side(1, 0, av);
                 });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
  check_defined(a, "add_scalar");
  std::vector<double> out(a.data());
  for (auto& v : out) v += c;
  return make_op("add_scalar", a.shape(), std::move(out), {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (gin[0]) axpy(gin[0], gout, self.numel());
                 });
}

Tensor mul_scalar(const Tensor& a, double c) {
  check_defined(a, "mul_scalar");
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return make_op("mul_scalar", a.shape(), std::move(out), {a},
                 [c](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (gin[0]) axpy(gin[0], gout, self.numel(), c);
                 });
}

Tensor tanh(const Tensor& a) {
  check_defined(a, "tanh");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t k = 0; k < a.numel(); ++k) out[static_cast<std::size_t>(k)] = std::tanh(a.at(k));
  return make_op("tanh", a.shape(), std::move(out), {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const std::int64_t n = self.numel();
                   for (std::int64_t k = 0; k < n; ++k) {
                     const double y = self.data[static_cast<std::size_t>(k)];
                     gin[0][k] += gout[k] * (1.0 - y * y);
                   }
                 });
}

Tensor relu(const Tensor& a) {
  check_defined(a, "relu");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (std::int64_t k = 0; k < a.numel(); ++k) out[static_cast<std::size_t>(k)] = std::max(0.0, a.at(k));
  return make_op("relu", a.shape(), std::move(out), {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const auto& x = self.inputs[0]->data;
                   const std::int64_t n = self.numel();
                   for (std::int64_t k = 0; k < n; ++k)
                     if (x[static_cast<std::size_t>(k)] > 0.0) gin[0][k] += gout[k];
                 });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {1}, {s}, {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const std::int64_t n = self.inputs[0]->numel();
                   for (std::int64_t k = 0; k < n; ++k) gin[0][k] += gout[0];
                 });
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  s /= static_cast<double>(a.numel());
  return make_op("mean", {1}, {s}, {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const std::int64_t n = self.inputs[0]->numel();
                   const double g = gout[0] / static_cast<double>(n);
                   for (std::int64_t k = 0; k < n; ++k) gin[0][k] += g;
                 });
}

Tensor mean_rows(const Tensor& a) {
  check_defined(a, "mean_rows");
  check_2d(a, "mean_rows");
  const std::int64_t n = a.rows(), d = a.cols();
  if (n == 0) throw ContractError("mean_rows: zero rows");
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  CMapM A(a.data().data(), n, d);
  MapV(out.data(), d) = A.colwise().mean();
  return make_op("mean_rows", {d}, std::move(out), {a},
                 [n, d](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const double inv = 1.0 / static_cast<double>(n);
                   for (std::int64_t i = 0; i < n; ++i)
                     for (std::int64_t j = 0; j < d; ++j) gin[0][i * d + j] += gout[j] * inv;
                 });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m * n));
  CMapM A(a.data().data(), m, k);
  CMapM B(b.data().data(), k, n);
  MapM(out.data(), m, n).noalias() = A * B;
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [m, k, n](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   CMapM G(gout, m, n);
                   CMapM A(self.inputs[0]->data.data(), m, k);
                   CMapM B(self.inputs[1]->data.data(), k, n);
                   if (gin[0]) MapM(gin[0], m, k).noalias() += G * B.transpose();
                   if (gin[1]) MapM(gin[1], k, n).noalias() += A.transpose() * G;
                 });
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  check_2d(a, "transpose");
  const std::int64_t m = a.rows(), n = a.cols();
  std::vector<double> out(static_cast<std::size_t>(m * n));
  CMapM A(a.data().data(), m, n);
  MapM(out.data(), n, m) = A.transpose();
  return make_op("transpose", {n, m}, std::move(out), {a},
                 [m, n](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   CMapM G(gout, n, m);
                   MapM(gin[0], m, n) += G.transpose();
                 });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check_defined(a, "dot");
  check_defined(b, "dot");
  check_1d(a, "dot");
  check_1d(b, "dot");
  check_same_shape(a, b, "dot");
  const std::int64_t n = a.numel();
  double s = CMapV(a.data().data(), n).dot(CMapV(b.data().data(), n));
  return make_op("dot", {1}, {s}, {a, b},
                 [n](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   const double g = gout[0];
                   if (gin[0]) axpy(gin[0], self.inputs[1]->data.data(), n, g);
                   if (gin[1]) axpy(gin[1], self.inputs[0]->data.data(), n, g);
                 });
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_op("reshape", std::move(shape), a.data(), {a},
                 [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (gin[0]) axpy(gin[0], gout, self.numel());
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const std::int64_t nd = parts[0].ndim();
  if (nd == 1) {
    if (axis != 0) throw DimensionError("concat: 1-D tensors support axis 0 only");
    std::int64_t total = 0;
    for (const auto& p : parts) {
      check_1d(p, "concat");
      total += p.numel();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op("concat", {total}, std::move(out), parts,
                   [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                     std::int64_t off = 0;
                     for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                       const std::int64_t n = self.inputs[i]->numel();
                       if (gin[i]) axpy(gin[i], gout + off, n);
                       off += n;
                     }
                   });
  }
  if (nd != 2 || (axis != 0 && axis != 1))
    throw DimensionError("concat: supported on 1-D (axis 0) and 2-D (axis 0/1) tensors");
  if (axis == 0) {
    const std::int64_t d = parts[0].cols();
    std::int64_t total = 0;
    for (const auto& p : parts) {
      check_2d(p, "concat");
      if (p.cols() != d)
        throw DimensionError("concat axis 0: column counts differ, " + shape_str(p.shape()));
      total += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total * d));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op("concat", {total, d}, std::move(out), parts,
                   [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                     std::int64_t off = 0;
                     for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                       const std::int64_t n = self.inputs[i]->numel();
                       if (gin[i]) axpy(gin[i], gout + off, n);
                       off += n;
                     }
                   });
  }
  // axis == 1
  const std::int64_t r = parts[0].rows();
  std::int64_t total_cols = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat");
    if (p.rows() != r) throw DimensionError("concat axis 1: row counts differ, " + shape_str(p.shape()));
    total_cols += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(r * total_cols));
  std::int64_t coff = 0;
  for (const auto& p : parts) {
    const std::int64_t c = p.cols();
    for (std::int64_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total_cols + coff);
    coff += c;
  }
  return make_op("concat", {r, total_cols}, std::move(out), parts,
                 [r, total_cols](const TensorNode& self, const double* gout,
                                 const std::vector<double*>& gin) {
                   std::int64_t coff = 0;
                   for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                     const std::int64_t c = self.inputs[p]->shape[1];
                     if (gin[p]) {
                       for (std::int64_t i = 0; i < r; ++i)
                         axpy(gin[p] + i * c, gout + i * total_cols + coff, c);
                     }
                     coff += c;
                   }
                 });
}

Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count) {
  check_defined(a, "slice_rows");
  check_2d(a, "slice_rows");
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  const std::int64_t d = a.cols();
  std::vector<double> out(a.data().begin() + start * d, a.data().begin() + (start + count) * d);
  return make_op("slice_rows", {count, d}, std::move(out), {a},
                 [start, count, d](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (gin[0]) axpy(gin[0] + start * d, gout, count * d);
                 });
}

Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count) {
  check_defined(a, "slice_cols");
  check_2d(a, "slice_cols");
  if (start < 0 || count < 0 || start + count > a.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  const std::int64_t r = a.rows(), c = a.cols();
  std::vector<double> out(static_cast<std::size_t>(r * count));
  for (std::int64_t i = 0; i < r; ++i)
    std::copy_n(a.data().data() + i * c + start, count, out.data() + i * count);
  return make_op("slice_cols", {r, count}, std::move(out), {a},
                 [start, count, r, c](const TensorNode&, const double* gout,
                                      const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (std::int64_t i = 0; i < r; ++i)
                     axpy(gin[0] + i * c + start, gout + i * count, count);
                 });
}

Tensor select(const Tensor& a, std::int64_t i) {
  check_defined(a, "select");
  check_1d(a, "select");
  if (i < 0 || i >= a.numel())
    throw DimensionError("select: index " + std::to_string(i) + " out of " + shape_str(a.shape()));
  return make_op("select", {1}, {a.at(i)}, {a},
                 [i](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (gin[0]) gin[0][i] += gout[0];
                 });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  std::vector<Tensor> as_rows;
  as_rows.reserve(rows.size());
  for (const auto& r : rows) {
    check_1d(r, "stack_rows");
    as_rows.push_back(reshape(r, {1, r.numel()}));
  }
  return concat(as_rows, 0);
}

// ---- gather / scatter ----

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& idx) {
  check_defined(table, "gather_rows");
  check_2d(table, "gather_rows");
  const std::int64_t n = table.rows(), d = table.cols();
  std::vector<double> out(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n)
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of " +
                           std::to_string(n) + " rows");
    std::copy_n(table.data().data() + idx[i] * d, d, out.data() + static_cast<std::int64_t>(i) * d);
  }
  return make_op("gather_rows", {static_cast<std::int64_t>(idx.size()), d}, std::move(out), {table},
                 [idx, d](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     axpy(gin[0] + idx[i] * d, gout + static_cast<std::int64_t>(i) * d, d);
                 });
}

Tensor scatter_add_rows(const Tensor& rows, const std::vector<std::int64_t>& idx,
                        std::int64_t out_rows) {
  check_defined(rows, "scatter_add_rows");
  check_2d(rows, "scatter_add_rows");
  if (static_cast<std::int64_t>(idx.size()) != rows.rows())
    throw DimensionError("scatter_add_rows: " + std::to_string(idx.size()) + " indices for " +
                         shape_str(rows.shape()));
  const std::int64_t d = rows.cols();
  std::vector<double> out(static_cast<std::size_t>(out_rows * d), 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= out_rows)
      throw DimensionError("scatter_add_rows: index " + std::to_string(idx[i]) + " out of " +
                           std::to_string(out_rows) + " rows");
    axpy(out.data() + idx[i] * d, rows.data().data() + static_cast<std::int64_t>(i) * d, d);
  }
  return make_op("scatter_add_rows", {out_rows, d}, std::move(out), {rows},
                 [idx, d](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     axpy(gin[0] + static_cast<std::int64_t>(i) * d, gout + idx[i] * d, d);
                 });
}

// ---- nonlinear blocks ----

namespace {

void softmax_slice(const double* x, double* y, std::int64_t n, std::int64_t stride) {
  double mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
  double z = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double e = std::exp(x[i * stride] - mx);
    y[i * stride] = e;
    z += e;
  }
  for (std::int64_t i = 0; i < n; ++i) y[i * stride] /= z;
}

/// dx = y .* (g - sum(g .* y)) along a strided slice.
void softmax_backward_slice(const double* y, const double* g, double* dx, std::int64_t n,
                            std::int64_t stride) {
  double dotgy = 0.0;
  for (std::int64_t i = 0; i < n; ++i) dotgy += g[i * stride] * y[i * stride];
  for (std::int64_t i = 0; i < n; ++i) dx[i * stride] += y[i * stride] * (g[i * stride] - dotgy);
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_defined(a, "softmax");
  if (a.ndim() == 1) {
    if (axis != 0) throw DimensionError("softmax: 1-D tensor supports axis 0 only");
  } else if (a.ndim() == 2) {
    if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1 for 2-D");
  } else {
    throw DimensionError("softmax: expected 1-D or 2-D tensor, got " + shape_str(a.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const bool vec = a.ndim() == 1;
  const std::int64_t r = vec ? 1 : a.rows(), c = vec ? a.numel() : a.cols();
  if (vec || axis == 1) {
    for (std::int64_t i = 0; i < r; ++i)
      softmax_slice(a.data().data() + i * c, out.data() + i * c, c, 1);
  } else {
    for (std::int64_t j = 0; j < c; ++j)
      softmax_slice(a.data().data() + j, out.data() + j, r, c);
  }
  return make_op("softmax", a.shape(), std::move(out), {a},
                 [vec, axis, r, c](const TensorNode& self, const double* gout,
                                   const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const double* y = self.data.data();
                   if (vec || axis == 1) {
                     for (std::int64_t i = 0; i < r; ++i)
                       softmax_backward_slice(y + i * c, gout + i * c, gin[0] + i * c, c, 1);
                   } else {
                     for (std::int64_t j = 0; j < c; ++j)
                       softmax_backward_slice(y + j, gout + j, gin[0] + j, r, c);
                   }
                 });
}

namespace {

/// out[row, k] = sum_i a[row, i] * b[row, (i+k) mod d]
void circ_corr_forward(const double* a, const double* b, double* out, std::int64_t rows,
                       std::int64_t d) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* ar = a + r * d;
    const double* br = b + r * d;
    double* or_ = out + r * d;
    for (std::int64_t k = 0; k < d; ++k) {
      double s = 0.0;
      for (std::int64_t i = 0; i < d; ++i) s += ar[i] * br[(i + k) % d];
      or_[k] = s;
    }
  }
}

void circ_corr_backward(const double* a, const double* b, const double* g, double* da, double* db,
                        std::int64_t rows, std::int64_t d) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* ar = a + r * d;
    const double* br = b + r * d;
    const double* gr = g + r * d;
    if (da) {
      double* dar = da + r * d;
      for (std::int64_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::int64_t k = 0; k < d; ++k) s += gr[k] * br[(i + k) % d];
        dar[i] += s;
      }
    }
    if (db) {
      double* dbr = db + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::int64_t k = 0; k < d; ++k) s += gr[k] * ar[(j - k % d + d + d) % d];
        dbr[j] += s;
      }
    }
  }
}

}  // namespace

Tensor circular_correlation(const Tensor& a, const Tensor& b) {
  check_defined(a, "circular_correlation");
  check_defined(b, "circular_correlation");
  check_1d(a, "circular_correlation");
  check_1d(b, "circular_correlation");
  if (a.numel() != b.numel())
    throw DimensionError("circular_correlation: length mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::int64_t d = a.numel();
  std::vector<double> out(static_cast<std::size_t>(d));
  circ_corr_forward(a.data().data(), b.data().data(), out.data(), 1, d);
  return make_op("circular_correlation", {d}, std::move(out), {a, b},
                 [d](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   circ_corr_backward(self.inputs[0]->data.data(), self.inputs[1]->data.data(), gout,
                                      gin[0], gin[1], 1, d);
                 });
}

Tensor circular_correlation_rows(const Tensor& a, const Tensor& b) {
  check_defined(a, "circular_correlation_rows");
  check_defined(b, "circular_correlation_rows");
  check_2d(a, "circular_correlation_rows");
  check_2d(b, "circular_correlation_rows");
  check_same_shape(a, b, "circular_correlation_rows");
  const std::int64_t n = a.rows(), d = a.cols();
  std::vector<double> out(static_cast<std::size_t>(n * d));
  circ_corr_forward(a.data().data(), b.data().data(), out.data(), n, d);
  return make_op("circular_correlation_rows", {n, d}, std::move(out), {a, b},
                 [n, d](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   circ_corr_backward(self.inputs[0]->data.data(), self.inputs[1]->data.data(), gout,
                                      gin[0], gin[1], n, d);
                 });
}

Tensor cosine_rows(const Tensor& x, const Tensor& h) {
  check_defined(x, "cosine_rows");
  check_defined(h, "cosine_rows");
  check_2d(x, "cosine_rows");
  check_2d(h, "cosine_rows");
  if (x.cols() != h.cols())
    throw DimensionError("cosine_rows: dimension mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(h.shape()));
  const std::int64_t n = x.rows(), m = h.rows(), d = x.cols();
  std::vector<double> out(static_cast<std::size_t>(n * m));
  CMapM X(x.data().data(), n, d), H(h.data().data(), m, d);
  Eigen::VectorXd xn = X.rowwise().norm(), hn = H.rowwise().norm();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) {
      const double denom = xn[i] * hn[j];
      out[static_cast<std::size_t>(i * m + j)] = denom == 0.0 ? 0.0 : X.row(i).dot(H.row(j)) / denom;
    }
  return make_op(
      "cosine_rows", {n, m}, std::move(out), {x, h},
      [n, m, d](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
        CMapM X(self.inputs[0]->data.data(), n, d), H(self.inputs[1]->data.data(), m, d);
        Eigen::VectorXd xn = X.rowwise().norm(), hn = H.rowwise().norm();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < m; ++j) {
            const double g = gout[i * m + j];
            if (g == 0.0 || xn[i] == 0.0 || hn[j] == 0.0) continue;
            const double c = self.data[static_cast<std::size_t>(i * m + j)];
            if (gin[0])
              MapV(gin[0] + i * d, d) +=
                  g * (H.row(j).transpose() / (xn[i] * hn[j]) - c * X.row(i).transpose() / (xn[i] * xn[i]));
            if (gin[1])
              MapV(gin[1] + j * d, d) +=
                  g * (X.row(i).transpose() / (xn[i] * hn[j]) - c * H.row(j).transpose() / (hn[j] * hn[j]));
          }
      });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_defined(x, "layer_norm_rows");
  check_2d(x, "layer_norm_rows");
  check_1d(gamma, "layer_norm_rows");
  check_1d(beta, "layer_norm_rows");
  const std::int64_t n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm_rows: gain/bias length must equal " + std::to_string(d));
  std::vector<double> out(static_cast<std::size_t>(n * d));
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* xi = x.data().data() + i * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i * d + j)] = gamma.at(j) * (xi[j] - mu) * is + beta.at(j);
  }
  return make_op(
      "layer_norm_rows", {n, d}, std::move(out), {x, gamma, beta},
      [n, d, inv_std](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
        const auto& xv = self.inputs[0]->data;
        const auto& gm = self.inputs[1]->data;
        const auto& bt = self.inputs[2]->data;
        for (std::int64_t i = 0; i < n; ++i) {
          const double* xi = xv.data() + i * d;
          const double* gi = gout + i * d;
          const double is = inv_std[static_cast<std::size_t>(i)];
          double mu = 0.0;
          for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
          mu /= static_cast<double>(d);
          // xhat_j recomputed from cached statistics
          double mean_gg = 0.0, mean_ggx = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * is;
            const double gg = gi[j] * gm[static_cast<std::size_t>(j)];
            mean_gg += gg;
            mean_ggx += gg * xhat;
          }
          mean_gg /= static_cast<double>(d);
          mean_ggx /= static_cast<double>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const double xhat = (xi[j] - mu) * is;
            const double gg = gi[j] * gm[static_cast<std::size_t>(j)];
            if (gin[0]) gin[0][i * d + j] += (gg - mean_gg - xhat * mean_ggx) * is;
            if (gin[1]) gin[1][j] += gi[j] * xhat;
            if (gin[2]) gin[2][j] += gi[j];
          }
        }
        (void)bt;
      });
}

Tensor dropout(const Tensor& a, double p, std::uint64_t seed, bool training) {
  check_defined(a, "dropout");
  if (p < 0.0 || p >= 1.0)
    throw ContractError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) {
    // Eval mode is the identity.
    return make_op("dropout", a.shape(), a.data(), {a},
                   [](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                     if (gin[0]) axpy(gin[0], gout, self.numel());
                   });
  }
  const std::int64_t n = a.numel();
  Rng rng(seed);
  const double inv_keep = 1.0 / (1.0 - p);
  std::vector<double> mask(static_cast<std::size_t>(n));
  for (auto& mv : mask) mv = rng.uniform() < p ? 0.0 : inv_keep;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) out[static_cast<std::size_t>(k)] = a.at(k) * mask[static_cast<std::size_t>(k)];
  return make_op("dropout", a.shape(), std::move(out), {a},
                 [mask](const TensorNode&, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   for (std::size_t k = 0; k < mask.size(); ++k) gin[0][k] += gout[k] * mask[k];
                 });
}

// ---- losses ----

namespace {
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, double clamp) {
  check_defined(logits, "bce_with_logits");
  check_defined(targets, "bce_with_logits");
  check_same_shape(logits, targets, "bce_with_logits");
  const std::int64_t n = logits.numel();
  double loss = 0.0;
  for (std::int64_t k = 0; k < n; ++k) {
    const double z = std::clamp(logits.at(k), -clamp, clamp);
    loss += softplus(z) - targets.at(k) * z;
  }
  loss /= static_cast<double>(n);
  return make_op("bce_with_logits", {1}, {loss}, {logits, targets},
                 [clamp](const TensorNode& self, const double* gout, const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const auto& z = self.inputs[0]->data;
                   const auto& y = self.inputs[1]->data;
                   const double g = gout[0] / static_cast<double>(z.size());
                   for (std::size_t k = 0; k < z.size(); ++k) {
                     const double zc = std::clamp(z[k], -clamp, clamp);
                     gin[0][k] += g * (sigmoid(zc) - y[k]);
                   }
                 });
}

Tensor ce_with_logits(const Tensor& logits, std::int64_t label) {
  check_defined(logits, "ce_with_logits");
  check_1d(logits, "ce_with_logits");
  const std::int64_t k = logits.numel();
  if (label < 0 || label >= k)
    throw ContractError("ce_with_logits: label " + std::to_string(label) + " out of " +
                        std::to_string(k) + " classes");
  double mx = logits.at(0);
  for (std::int64_t i = 1; i < k; ++i) mx = std::max(mx, logits.at(i));
  double z = 0.0;
  for (std::int64_t i = 0; i < k; ++i) z += std::exp(logits.at(i) - mx);
  const double loss = std::log(z) + mx - logits.at(label);
  return make_op("ce_with_logits", {1}, {loss}, {logits},
                 [label, mx, z](const TensorNode& self, const double* gout,
                                const std::vector<double*>& gin) {
                   if (!gin[0]) return;
                   const auto& x = self.inputs[0]->data;
                   for (std::size_t i = 0; i < x.size(); ++i) {
                     const double p = std::exp(x[i] - mx) / z;
                     gin[0][i] += gout[0] * (p - (static_cast<std::int64_t>(i) == label ? 1.0 : 0.0));
                   }
                 });
}

// ---- backward orchestration ----

void backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.node()->requires_grad)
    throw ContractError("backward: loss has no compute graph (requires_grad is false)");

  // Reverse topological order over the requires_grad subgraph.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* in = node->inputs[next++].get();
      if (in->requires_grad && !seen.count(in)) {
        seen.insert(in);
        stack.emplace_back(in, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Leaves accumulate into their persistent grad buffer; interior nodes get
  // transient buffers so repeated backward calls scale gradients exactly.
  std::unordered_map<TensorNode*, std::vector<double>> transient;
  auto sink = [&](TensorNode* n) -> double* {
    if (!n->requires_grad) return nullptr;
    if (n->is_leaf()) {
      if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
      return n->grad.data();
    }
    auto it = transient.find(n);
    if (it == transient.end())
      it = transient.emplace(n, std::vector<double>(n->data.size(), 0.0)).first;
    return it->second.data();
  };

  sink(loss.node().get())[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = *it;
    if (node->is_leaf()) continue;
    const double* gout = sink(node);
    std::vector<double*> gin(node->inputs.size());
    for (std::size_t i = 0; i < node->inputs.size(); ++i) gin[i] = sink(node->inputs[i].get());
    node->backward_fn(*node, gout, gin);
  }
}

}  // namespace protoehr
