#include "gradstats/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace gradstats {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<std::size_t> complement(std::size_t rank, const std::vector<std::size_t>& used) {
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < rank; ++i) {
    if (std::find(used.begin(), used.end(), i) == used.end()) rest.push_back(i);
  }
  return rest;
}

void check_axes_unique(const std::vector<std::size_t>& axes, std::size_t rank, const char* what) {
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= rank) {
      throw ShapeError(std::string(what) + ": axis " + std::to_string(axes[i]) +
                       " out of range for rank " + std::to_string(rank));
    }
    for (std::size_t j = i + 1; j < axes.size(); ++j) {
      if (axes[i] == axes[j]) {
        throw ShapeError(std::string(what) + ": duplicate axis " + std::to_string(axes[i]));
      }
    }
  }
}

}  // namespace

std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(num_elements(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (num_elements(shape_) != data_.size()) {
    throw ShapeError("tensor of shape " + shape_to_string(shape_) + " given " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = num_elements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

double Tensor::at(const std::vector<std::size_t>& index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  const auto strides = strides_of(shape_);
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) throw ShapeError("index out of range");
    flat += index[i] * strides[i];
  }
  return data_[flat];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  return data_[0];
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  // Bitwise comparison so that NaN payloads and signed zeros are distinguished.
  return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](double x, double y) {
    return std::memcmp(&x, &y, sizeof(double)) == 0;
  });
}

// ---------------------------------------------------------------------------
// Elementwise

std::size_t ElementwiseOp::arity() const {
  switch (kind) {
    case ElementwiseKind::add:
    case ElementwiseKind::sub:
    case ElementwiseKind::mul:
    case ElementwiseKind::div:
      return 2;
    default:
      return 1;
  }
}

std::string ElementwiseOp::name() const {
  auto with_param = [this](const char* base) {
    std::ostringstream os;
    os << base << '[' << param << ']';
    return os.str();
  };
  switch (kind) {
    case ElementwiseKind::add: return "add";
    case ElementwiseKind::sub: return "sub";
    case ElementwiseKind::mul: return "mul";
    case ElementwiseKind::div: return "div";
    case ElementwiseKind::neg: return "neg";
    case ElementwiseKind::square: return "square";
    case ElementwiseKind::sqrt: return "sqrt";
    case ElementwiseKind::sign: return "sign";
    case ElementwiseKind::relu: return "relu";
    case ElementwiseKind::abs_pow: return with_param("abs_pow");
    case ElementwiseKind::tanh: return "tanh";
    case ElementwiseKind::gelu: return "gelu";
    case ElementwiseKind::max_with: return with_param("max_with");
    case ElementwiseKind::exp: return "exp";
    case ElementwiseKind::log: return "log";
    case ElementwiseKind::greater: return with_param("greater");
    case ElementwiseKind::abs_pow_grad: return with_param("abs_pow_grad");
    case ElementwiseKind::gelu_grad: return "gelu_grad";
    case ElementwiseKind::custom: return "custom[" + (custom ? custom->name : std::string("?")) + "]";
  }
  return "?";
}

bool ElementwiseOp::operator==(const ElementwiseOp& other) const {
  return kind == other.kind && param == other.param && custom == other.custom;
}

ElementwiseOp ops::custom(std::string name, std::function<double(double)> fn) {
  ElementwiseOp op{ElementwiseKind::custom, 0.0, nullptr};
  op.custom = std::make_shared<const ScalarFunction>(ScalarFunction{std::move(name), std::move(fn)});
  return op;
}

double apply_unary(const ElementwiseOp& op, double x) {
  switch (op.kind) {
    case ElementwiseKind::neg: return -x;
    case ElementwiseKind::square: return x * x;
    case ElementwiseKind::sqrt:
      if (x < 0.0) throw std::domain_error("sqrt of negative entry " + std::to_string(x));
      return std::sqrt(x);
    case ElementwiseKind::sign: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : (x == 0.0 ? 0.0 : x));
    case ElementwiseKind::relu: return x > 0.0 ? x : 0.0;
    case ElementwiseKind::abs_pow:
      if (op.param == 2.0) return x * x;
      return std::pow(std::abs(x), op.param);
    case ElementwiseKind::tanh: return std::tanh(x);
    case ElementwiseKind::gelu: return 0.5 * x * std::erfc(-x * kInvSqrt2);
    case ElementwiseKind::max_with: return x > op.param ? x : op.param;
    case ElementwiseKind::exp: return std::exp(x);
    case ElementwiseKind::log:
      if (x < 0.0) throw std::domain_error("log of negative entry " + std::to_string(x));
      return std::log(x);
    case ElementwiseKind::greater: return x > op.param ? 1.0 : 0.0;
    case ElementwiseKind::abs_pow_grad: {
      if (x == 0.0) return 0.0;
      const double s = x > 0.0 ? 1.0 : -1.0;
      return op.param * std::pow(std::abs(x), op.param - 1.0) * s;
    }
    case ElementwiseKind::gelu_grad:
      return 0.5 * std::erfc(-x * kInvSqrt2) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    case ElementwiseKind::custom: return op.custom->fn(x);
    default: break;
  }
  throw std::invalid_argument("op " + op.name() + " is not unary");
}

namespace {

double apply_binary(ElementwiseKind kind, double x, double y) {
  switch (kind) {
    case ElementwiseKind::add: return x + y;
    case ElementwiseKind::sub: return x - y;
    case ElementwiseKind::mul: return x * y;
    case ElementwiseKind::div: return x / y;
    default: break;
  }
  throw std::invalid_argument("op is not binary");
}

}  // namespace

Shape elementwise_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (a.empty()) return b;
  if (b.empty()) return a;
  throw ShapeError("elementwise shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
}

Tensor elementwise(const ElementwiseOp& op, const Tensor& a) {
  if (op.arity() != 1) throw std::invalid_argument(op.name() + " needs two operands");
  std::vector<double> out(a.size());
  std::transform(a.data().begin(), a.data().end(), out.begin(), [&](double x) { return apply_unary(op, x); });
  return Tensor(a.shape(), std::move(out));
}

Tensor elementwise(const ElementwiseOp& op, const Tensor& a, const Tensor& b) {
  if (op.arity() != 2) throw std::invalid_argument(op.name() + " needs one operand");
  Shape shape = elementwise_shape(a.shape(), b.shape());
  std::vector<double> out(num_elements(shape));
  const bool a_scalar = a.rank() == 0 && b.rank() != 0;
  const bool b_scalar = b.rank() == 0 && a.rank() != 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = apply_binary(op.kind, a[a_scalar ? 0 : i], b[b_scalar ? 0 : i]);
  }
  return Tensor(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Contraction

namespace {

struct ContractPlan {
  std::vector<std::size_t> a_batch, b_batch, a_con, b_con, a_free, b_free;
};

ContractPlan plan_contract(const Shape& a, const Shape& b, std::span<const AxisPair> contracted,
                           std::span<const AxisPair> batched) {
  ContractPlan p;
  for (const auto& [x, y] : batched) {
    p.a_batch.push_back(x);
    p.b_batch.push_back(y);
  }
  for (const auto& [x, y] : contracted) {
    p.a_con.push_back(x);
    p.b_con.push_back(y);
  }
  std::vector<std::size_t> a_used = p.a_batch, b_used = p.b_batch;
  a_used.insert(a_used.end(), p.a_con.begin(), p.a_con.end());
  b_used.insert(b_used.end(), p.b_con.begin(), p.b_con.end());
  check_axes_unique(a_used, a.size(), "contract (left operand)");
  check_axes_unique(b_used, b.size(), "contract (right operand)");
  for (std::size_t k = 0; k < p.a_batch.size(); ++k) {
    if (a[p.a_batch[k]] != b[p.b_batch[k]]) {
      throw ShapeError("contract: batched extent mismatch " + std::to_string(a[p.a_batch[k]]) + " vs " +
                       std::to_string(b[p.b_batch[k]]));
    }
  }
  for (std::size_t k = 0; k < p.a_con.size(); ++k) {
    if (a[p.a_con[k]] != b[p.b_con[k]]) {
      throw ShapeError("contract: contracted extent mismatch on pair (" + std::to_string(p.a_con[k]) + "," +
                       std::to_string(p.b_con[k]) + "): " + std::to_string(a[p.a_con[k]]) + " vs " +
                       std::to_string(b[p.b_con[k]]));
    }
  }
  p.a_free = complement(a.size(), a_used);
  p.b_free = complement(b.size(), b_used);
  return p;
}

std::size_t extent_product(const Shape& s, const std::vector<std::size_t>& axes) {
  std::size_t n = 1;
  for (auto ax : axes) n *= s[ax];
  return n;
}

}  // namespace

Shape contract_shape(const Shape& a, const Shape& b, std::span<const AxisPair> contracted,
                     std::span<const AxisPair> batched) {
  const auto p = plan_contract(a, b, contracted, batched);
  Shape out;
  for (auto ax : p.a_batch) out.push_back(a[ax]);
  for (auto ax : p.a_free) out.push_back(a[ax]);
  for (auto ax : p.b_free) out.push_back(b[ax]);
  return out;
}

Tensor contract(const Tensor& a, const Tensor& b, std::span<const AxisPair> contracted,
                std::span<const AxisPair> batched) {
  const auto p = plan_contract(a.shape(), b.shape(), contracted, batched);

  // Lay a out as [batch, free, contracted] and b as [batch, contracted, free],
  // then run one GEMM per batch index.
  std::vector<std::size_t> a_perm = p.a_batch;
  a_perm.insert(a_perm.end(), p.a_free.begin(), p.a_free.end());
  a_perm.insert(a_perm.end(), p.a_con.begin(), p.a_con.end());
  std::vector<std::size_t> b_perm = p.b_batch;
  b_perm.insert(b_perm.end(), p.b_con.begin(), p.b_con.end());
  b_perm.insert(b_perm.end(), p.b_free.begin(), p.b_free.end());
  const Tensor at = transpose(a, a_perm);
  const Tensor bt = transpose(b, b_perm);

  const auto nb = static_cast<Eigen::Index>(extent_product(a.shape(), p.a_batch));
  const auto m = static_cast<Eigen::Index>(extent_product(a.shape(), p.a_free));
  const auto k = static_cast<Eigen::Index>(extent_product(a.shape(), p.a_con));
  const auto n = static_cast<Eigen::Index>(extent_product(b.shape(), p.b_free));

  Shape out_shape;
  for (auto ax : p.a_batch) out_shape.push_back(a.shape()[ax]);
  for (auto ax : p.a_free) out_shape.push_back(a.shape()[ax]);
  for (auto ax : p.b_free) out_shape.push_back(b.shape()[ax]);
  Tensor out(out_shape);
  if (k == 0 || m == 0 || n == 0) return out;

  for (Eigen::Index i = 0; i < nb; ++i) {
    Eigen::Map<const RowMatrix> am(at.data().data() + i * m * k, m, k);
    Eigen::Map<const RowMatrix> bm(bt.data().data() + i * k * n, k, n);
    Eigen::Map<RowMatrix> om(out.data().data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural

Shape reduce_sum_shape(const Shape& a, std::span<const std::size_t> axes) {
  std::vector<std::size_t> ax(axes.begin(), axes.end());
  check_axes_unique(ax, a.size(), "reduce_sum");
  Shape out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::find(ax.begin(), ax.end(), i) == ax.end()) out.push_back(a[i]);
  }
  return out;
}

Tensor reduce_sum(const Tensor& a, std::span<const std::size_t> axes) {
  Shape out_shape = reduce_sum_shape(a.shape(), axes);
  Tensor out(out_shape);
  // Stride of each input axis in the output (0 for reduced axes).
  std::vector<std::size_t> out_stride(a.rank(), 0);
  {
    const auto os = strides_of(out_shape);
    std::size_t j = 0;
    for (std::size_t i = 0; i < a.rank(); ++i) {
      if (std::find(axes.begin(), axes.end(), i) == axes.end()) out_stride[i] = os[j++];
    }
  }
  // Walking the input in row-major order visits the reduced indices of each
  // output slot in increasing order, which fixes the accumulation order.
  std::vector<std::size_t> idx(a.rank(), 0);
  std::size_t o = 0;
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    out[o] += a[flat];
    for (std::size_t d = a.rank(); d-- > 0;) {
      ++idx[d];
      o += out_stride[d];
      if (idx[d] < a.shape()[d]) break;
      o -= out_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

void check_broadcast(const Shape& from, const Shape& to, std::span<const std::size_t> mapping) {
  if (mapping.size() != from.size()) {
    throw ShapeError("broadcast: mapping has " + std::to_string(mapping.size()) + " entries for rank " +
                     std::to_string(from.size()));
  }
  std::vector<std::size_t> m(mapping.begin(), mapping.end());
  check_axes_unique(m, to.size(), "broadcast");
  for (std::size_t j = 0; j < from.size(); ++j) {
    if (from[j] != to[m[j]]) {
      throw ShapeError("broadcast: extent mismatch on source axis " + std::to_string(j) + ": " +
                       std::to_string(from[j]) + " vs target " + std::to_string(to[m[j]]));
    }
  }
}

Tensor broadcast(const Tensor& a, const Shape& to, std::span<const std::size_t> mapping) {
  check_broadcast(a.shape(), to, mapping);
  Tensor out(to);
  const auto src_strides = strides_of(a.shape());
  std::vector<std::size_t> stride(to.size(), 0);
  for (std::size_t j = 0; j < mapping.size(); ++j) stride[mapping[j]] = src_strides[j];
  std::vector<std::size_t> idx(to.size(), 0);
  std::size_t s = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = a[s];
    for (std::size_t d = to.size(); d-- > 0;) {
      ++idx[d];
      s += stride[d];
      if (idx[d] < to[d]) break;
      s -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

Shape transpose_shape(const Shape& a, std::span<const std::size_t> perm) {
  if (perm.size() != a.size()) throw ShapeError("transpose: permutation rank mismatch");
  std::vector<std::size_t> p(perm.begin(), perm.end());
  check_axes_unique(p, a.size(), "transpose");
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[perm[i]];
  return out;
}

Tensor transpose(const Tensor& a, std::span<const std::size_t> perm) {
  Shape out_shape = transpose_shape(a.shape(), perm);
  bool identity = true;
  for (std::size_t i = 0; i < perm.size(); ++i) identity = identity && perm[i] == i;
  if (identity) return a;
  Tensor out(out_shape);
  const auto in_strides = strides_of(a.shape());
  std::vector<std::size_t> stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) stride[i] = in_strides[perm[i]];
  std::vector<std::size_t> idx(perm.size(), 0);
  std::size_t s = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = a[s];
    for (std::size_t d = perm.size(); d-- > 0;) {
      ++idx[d];
      s += stride[d];
      if (idx[d] < out_shape[d]) break;
      s -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

Tensor take(const Tensor& a, std::size_t axis, std::size_t index) {
  if (axis >= a.rank()) throw ShapeError("take: axis out of range");
  if (index >= a.shape()[axis]) throw ShapeError("take: index out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  const auto strides = strides_of(a.shape());
  const std::size_t outer = num_elements(Shape(a.shape().begin(), a.shape().begin() + axis));
  const std::size_t inner = strides[axis];
  std::vector<double> out;
  out.reserve(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * a.shape()[axis] * inner + index * inner;
    out.insert(out.end(), a.data().begin() + base, a.data().begin() + base + inner);
  }
  return Tensor(std::move(out_shape), std::move(out));
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack: no parts");
  Shape shape = parts.front().shape();
  std::vector<double> data;
  data.reserve(parts.size() * parts.front().size());
  for (const auto& p : parts) {
    if (p.shape() != shape) throw ShapeError("stack: shape mismatch");
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  shape.insert(shape.begin(), parts.size());
  return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Convenience

Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(ops::add(), a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(ops::sub(), a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(ops::mul(), a, b); }
Tensor operator*(double s, const Tensor& a) { return elementwise(ops::mul(), Tensor::scalar(s), a); }
Tensor operator/(const Tensor& a, double s) { return elementwise(ops::div(), a, Tensor::scalar(s)); }

Tensor square(const Tensor& a) { return elementwise(ops::square(), a); }
Tensor sign(const Tensor& a) { return elementwise(ops::sign(), a); }
Tensor abs_pow(const Tensor& a, double alpha) { return elementwise(ops::abs_pow(alpha), a); }

double inner(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("inner: shape mismatch");
  return (a.array() * b.array()).sum();
}

double max_abs(const Tensor& a) { return a.size() == 0 ? 0.0 : a.array().abs().maxCoeff(); }

bool all_finite(const Tensor& a) { return a.array().isFinite().all(); }

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("relative_error: shape mismatch");
  if (a.size() == 0) return 0.0;
  const double diff = (a.array() - b.array()).abs().maxCoeff();
  const double scale = std::max(max_abs(a), max_abs(b));
  if (diff == 0.0) return 0.0;
  return diff / scale;
}

double relative_error(std::span<const Tensor> a, std::span<const Tensor> b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: list length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i]));
  return worst;
}

double global_norm(std::span<const Tensor> parts) {
  double sq = 0.0;
  for (const auto& p : parts) sq += p.array().square().sum();
  return std::sqrt(sq);
}

}  // namespace gradstats
