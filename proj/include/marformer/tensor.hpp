#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace marformer {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for contract violations on tensor operations (shape, dtype, domain).
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor;

namespace detail {

struct TensorImpl;

/// One recorded operation. `backward` maps the gradient of the node's output to
/// gradients of each input (an undefined Tensor means "no contribution").
struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out)> backward;
};

}  // namespace detail

/// Dense row-major tensor with shared-handle semantics. Copying a Tensor copies
/// the handle; `clone()` copies the data.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  static Tensor zeros(const Shape& shape, DType dtype = DType::f64);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f64);
  static Tensor from_vector(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f64);
  static Tensor from_vector(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  /// Element access through double, regardless of dtype.
  double get(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  double item() const;
  std::vector<double> to_vector() const;

  Tensor clone() const;
  Tensor to(DType dtype) const;
  /// Same data, no autograd history.
  Tensor detach() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  const Tensor& grad() const;
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  void fill(double value);
  void copy_from(const Tensor& src);
  bool all_finite() const;

  // autograd plumbing
  const std::shared_ptr<detail::Node>& grad_fn() const;
  void set_grad_fn(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl& checked() const;
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f64;
  std::variant<std::vector<float>, std::vector<double>> storage;
  bool requires_grad = false;
  bool consumed = false;
  Tensor grad;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

template <typename T>
std::span<T> Tensor::data() {
  auto* vec = std::get_if<std::vector<T>>(&checked().storage);
  if (vec == nullptr) {
    throw TensorError("tensor dtype mismatch on data access");
  }
  return {vec->data(), vec->size()};
}

template <typename T>
std::span<const T> Tensor::data() const {
  const auto* vec = std::get_if<std::vector<T>>(&checked().storage);
  if (vec == nullptr) {
    throw TensorError("tensor dtype mismatch on data access");
  }
  return {vec->data(), vec->size()};
}

/// Calls `fn(T{})` with T = float or double according to `dtype`.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) {
    return fn(float{});
  }
  return fn(double{});
}

/// True when `a` and `b` share shape, dtype and every value bit for bit.
bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace marformer
