#include "marformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace marformer {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) {
      throw TensorError("tensor extents must be positive, got " + shape_str(shape));
    }
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : impl_(std::make_shared<detail::TensorImpl>()) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl_->shape = std::move(shape);
  impl_->dtype = dtype;
  if (dtype == DType::f32) {
    impl_->storage = std::vector<float>(n, 0.0f);
  } else {
    impl_->storage = std::vector<double>(n, 0.0);
  }
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(shape, dtype); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t(shape, dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values, DType dtype) {
  Tensor t(shape, dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw TensorError("from_vector: " + std::to_string(values.size()) +
                      " values do not fill shape " + shape_str(shape));
  }
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::transform(values.begin(), values.end(), d.begin(),
                   [](double v) { return static_cast<T>(v); });
  });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::initializer_list<double> values,
                           DType dtype) {
  return from_vector(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

detail::TensorImpl& Tensor::checked() const {
  if (!impl_) {
    throw TensorError("use of undefined tensor");
  }
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::int64_t Tensor::numel() const {
  return std::visit([](const auto& v) { return static_cast<std::int64_t>(v.size()); },
                    checked().storage);
}

DType Tensor::dtype() const { return checked().dtype; }

double Tensor::get(std::int64_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); },
                    checked().storage);
}

void Tensor::set(std::int64_t i, double value) {
  std::visit([&](auto& v) { v.at(i) = static_cast<std::decay_t<decltype(v[0])>>(value); },
             checked().storage);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw TensorError("item() on tensor of shape " + shape_str(shape()));
  }
  return get(0);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    checked().storage);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = shape();
  t.impl_->dtype = dtype();
  t.impl_->storage = checked().storage;
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) {
    return clone();
  }
  return from_vector(shape(), to_vector(), target);
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = shape();
  t.impl_->dtype = dtype();
  // Shares nothing with the graph; data is copied so later in-place updates of
  // parameters do not leak into detached snapshots.
  t.impl_->storage = checked().storage;
  return t;
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked().requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked().grad_fn == nullptr; }

const Tensor& Tensor::grad() const { return checked().grad; }

void Tensor::zero_grad() {
  if (checked().grad.defined()) {
    checked().grad.fill(0.0);
  }
}

void Tensor::accumulate_grad(const Tensor& g) {
  auto& impl = checked();
  if (g.shape() != impl.shape) {
    throw TensorError("gradient shape " + shape_str(g.shape()) + " does not match tensor " +
                      shape_str(impl.shape));
  }
  if (!impl.grad.defined()) {
    impl.grad = Tensor(impl.shape, impl.dtype);
  }
  dispatch(impl.dtype, [&](auto tag) {
    using T = decltype(tag);
    auto dst = impl.grad.data<T>();
    if (g.dtype() == impl.dtype) {
      auto src = g.data<T>();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<T>(g.get(i));
    }
  });
}

void Tensor::fill(double value) {
  std::visit(
      [value](auto& v) {
        std::fill(v.begin(), v.end(), static_cast<std::decay_t<decltype(v[0])>>(value));
      },
      checked().storage);
}

void Tensor::copy_from(const Tensor& src) {
  if (src.shape() != shape() || src.dtype() != dtype()) {
    throw TensorError("copy_from: shape/dtype mismatch " + shape_str(src.shape()) + " vs " +
                      shape_str(shape()));
  }
  checked().storage = src.checked().storage;
}

bool Tensor::all_finite() const {
  return std::visit(
      [](const auto& v) {
        return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); });
      },
      checked().storage);
}

const std::shared_ptr<detail::Node>& Tensor::grad_fn() const { return checked().grad_fn; }

void Tensor::set_grad_fn(std::shared_ptr<detail::Node> node) {
  checked().grad_fn = std::move(node);
  checked().requires_grad = checked().grad_fn != nullptr || checked().requires_grad;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
    return false;
  }
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError("max_abs_diff: shape mismatch");
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.get(i) - b.get(i)));
  }
  return m;
}

}  // namespace marformer
