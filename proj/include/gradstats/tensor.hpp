#ifndef GRADSTATS_TENSOR_HPP
#define GRADSTATS_TENSOR_HPP

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gradstats {

using Shape = std::vector<std::size_t>;

/// Pairs an axis of the left operand with an axis of the right operand.
using AxisPair = std::pair<std::size_t, std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t num_elements(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }
  double at(const std::vector<std::size_t>& index) const;
  double item() const;

  Eigen::Map<const Eigen::ArrayXd> array() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<Eigen::ArrayXd> array() {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }

  /// Bitwise equality of shape and contents.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Row-major strides for a shape.
std::vector<std::size_t> strides_of(const Shape& shape);

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseKind {
  add,
  sub,
  mul,
  div,
  neg,
  square,
  sqrt,
  sign,
  relu,
  abs_pow,
  tanh,
  gelu,
  max_with,
  exp,
  log,
  // x > param ? 1 : 0; the derivative of relu and max_with.
  greater,
  // d/dx |x|^param = param * |x|^(param-1) * sign(x)
  abs_pow_grad,
  gelu_grad,
  custom,
};

/// A scalar transform usable as a custom elementwise op. Carries a name for
/// printing.
struct ScalarFunction {
  std::string name;
  std::function<double(double)> fn;
};

struct ElementwiseOp {
  ElementwiseKind kind = ElementwiseKind::add;
  double param = 0.0;
  std::shared_ptr<const ScalarFunction> custom;

  std::size_t arity() const;
  std::string name() const;
  bool operator==(const ElementwiseOp& other) const;
};

namespace ops {
inline ElementwiseOp add() { return {ElementwiseKind::add, 0.0, nullptr}; }
inline ElementwiseOp sub() { return {ElementwiseKind::sub, 0.0, nullptr}; }
inline ElementwiseOp mul() { return {ElementwiseKind::mul, 0.0, nullptr}; }
inline ElementwiseOp div() { return {ElementwiseKind::div, 0.0, nullptr}; }
inline ElementwiseOp neg() { return {ElementwiseKind::neg, 0.0, nullptr}; }
inline ElementwiseOp square() { return {ElementwiseKind::square, 0.0, nullptr}; }
inline ElementwiseOp sqrt() { return {ElementwiseKind::sqrt, 0.0, nullptr}; }
inline ElementwiseOp sign() { return {ElementwiseKind::sign, 0.0, nullptr}; }
inline ElementwiseOp relu() { return {ElementwiseKind::relu, 0.0, nullptr}; }
inline ElementwiseOp abs_pow(double alpha) { return {ElementwiseKind::abs_pow, alpha, nullptr}; }
inline ElementwiseOp tanh() { return {ElementwiseKind::tanh, 0.0, nullptr}; }
inline ElementwiseOp gelu() { return {ElementwiseKind::gelu, 0.0, nullptr}; }
inline ElementwiseOp max_with(double c) { return {ElementwiseKind::max_with, c, nullptr}; }
inline ElementwiseOp exp() { return {ElementwiseKind::exp, 0.0, nullptr}; }
inline ElementwiseOp log() { return {ElementwiseKind::log, 0.0, nullptr}; }
inline ElementwiseOp greater(double c) { return {ElementwiseKind::greater, c, nullptr}; }
inline ElementwiseOp abs_pow_grad(double alpha) { return {ElementwiseKind::abs_pow_grad, alpha, nullptr}; }
inline ElementwiseOp gelu_grad() { return {ElementwiseKind::gelu_grad, 0.0, nullptr}; }
ElementwiseOp custom(std::string name, std::function<double(double)> fn);
}  // namespace ops

/// Applies a unary op entrywise.
double apply_unary(const ElementwiseOp& op, double x);

/// Shape of a binary elementwise result: equal shapes, or one operand rank 0.
Shape elementwise_shape(const Shape& a, const Shape& b);

Tensor elementwise(const ElementwiseOp& op, const Tensor& a);
Tensor elementwise(const ElementwiseOp& op, const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Contraction

/// Output shape of contract(): paired batch axes first, then the free axes of
/// `a`, then the free axes of `b`, each in ascending axis order.
Shape contract_shape(const Shape& a, const Shape& b,
                     std::span<const AxisPair> contracted,
                     std::span<const AxisPair> batched = {});

/// Generalized tensor contraction. Axes in `contracted` are summed over; axes
/// in `batched` are matched elementwise and kept as leading output axes.
Tensor contract(const Tensor& a, const Tensor& b,
                std::span<const AxisPair> contracted,
                std::span<const AxisPair> batched = {});

inline Tensor contract(const Tensor& a, const Tensor& b,
                       std::initializer_list<AxisPair> contracted) {
  return contract(a, b, std::span<const AxisPair>(contracted.begin(), contracted.size()));
}

// ---------------------------------------------------------------------------
// Structural

Shape reduce_sum_shape(const Shape& a, std::span<const std::size_t> axes);

/// Sums over `axes`. Contributions are accumulated in increasing index order
/// of the reduced axes.
Tensor reduce_sum(const Tensor& a, std::span<const std::size_t> axes);
inline Tensor reduce_sum(const Tensor& a, std::initializer_list<std::size_t> axes) {
  return reduce_sum(a, std::span<const std::size_t>(axes.begin(), axes.size()));
}

/// Validates a broadcast: `mapping[j]` is the target axis of source axis j.
void check_broadcast(const Shape& from, const Shape& to, std::span<const std::size_t> mapping);

/// Replicates `a` along the target axes not hit by `mapping`.
Tensor broadcast(const Tensor& a, const Shape& to, std::span<const std::size_t> mapping);
inline Tensor broadcast(const Tensor& a, const Shape& to, std::initializer_list<std::size_t> mapping) {
  return broadcast(a, to, std::span<const std::size_t>(mapping.begin(), mapping.size()));
}

Shape transpose_shape(const Shape& a, std::span<const std::size_t> perm);

/// out.shape[i] == a.shape[perm[i]].
Tensor transpose(const Tensor& a, std::span<const std::size_t> perm);
inline Tensor transpose(const Tensor& a, std::initializer_list<std::size_t> perm) {
  return transpose(a, std::span<const std::size_t>(perm.begin(), perm.size()));
}

/// Selects `index` along `axis`, keeping the axis with extent 1.
Tensor take(const Tensor& a, std::size_t axis, std::size_t index);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);

// ---------------------------------------------------------------------------
// Convenience

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor operator/(const Tensor& a, double s);

Tensor square(const Tensor& a);
Tensor sign(const Tensor& a);
Tensor abs_pow(const Tensor& a, double alpha);

/// Sum of a(i)*b(i) over all entries.
double inner(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

/// max|a-b| / max(max|a|, max|b|); zero when both are zero.
double relative_error(const Tensor& a, const Tensor& b);
double relative_error(std::span<const Tensor> a, std::span<const Tensor> b);

/// Euclidean norm over all entries of all tensors.
double global_norm(std::span<const Tensor> parts);

}  // namespace gradstats

#endif  // GRADSTATS_TENSOR_HPP
