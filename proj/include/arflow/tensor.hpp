#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "arflow/errors.hpp"

namespace arflow {

using Shape = std::vector<std::size_t>;

// Tensor storage starts on a 64-byte boundary. Vectorized kernels peel a
// scalar head up to the first aligned element, so a malloc-dependent start
// address would make results vary from run to run in the last bits.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlign}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  Buffer<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array. Copies share storage; use clone() for a deep copy.
///
/// Operations in ops.hpp never modify the data of their inputs. The only
/// in-place writers are optimizers (through mutable_data()) and backward
/// passes (through the gradient buffer).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), Buffer<T>(data)) {}

  Tensor(Shape shape, Buffer<T> data) : impl_(std::make_shared<Impl>()) {
    detail::require(shape_numel(shape) == data.size(),
                    "Tensor: shape " + shape_str(shape) + " does not match " +
                        std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    Buffer<T> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, Buffer<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  // Copy for comparisons and tests; kernels use data().
  std::vector<T> values() const { return {impl_->data.begin(), impl_->data.end()}; }

  T item() const {
    detail::require(numel() == 1, "Tensor::item on tensor with shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  // Same storage, new shape view is not supported; reshape copies (see ops).
  const std::shared_ptr<Impl>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  std::transform(t.data().begin(), t.data().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace arflow
