#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "msy/common.hpp"

namespace msy {

// Rank-4 NCHW shape. Lower-rank data embeds with size-1 axes.
struct Shape {
  int64_t n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape& o) const = default;
  std::string str() const;
};

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;       // empty until backward touches it
  bool requires_grad = false;  // leaf flag, set by the owner
  bool tracked = false;        // true if this value participates in some tape

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Shared-storage tensor handle. Copies alias the same buffer; forward ops
// always allocate fresh outputs, so aliasing never surprises callers.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s) { return filled(s, T(0)); }

  static Tensor filled(Shape s, T value) {
    check_shape(s);
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<T>>();
    t.s_->shape = s;
    t.s_->data.assign(static_cast<size_t>(s.numel()), value);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values) {
    check_shape(s);
    if (static_cast<int64_t>(values.size()) != s.numel())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + s.str());
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<T>>();
    t.s_->shape = s;
    t.s_->data = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int64_t numel() const { return s_->shape.numel(); }

  std::span<T> data() { return {s_->data.data(), s_->data.size()}; }
  std::span<const T> data() const { return {s_->data.data(), s_->data.size()}; }

  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return s_->data[static_cast<size_t>(index(n, c, h, w))];
  }
  T at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return s_->data[static_cast<size_t>(index(n, c, h, w))];
  }

  int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
    const Shape& s = s_->shape;
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) {
    s_->requires_grad = v;
    if (v) s_->tracked = true;
  }

  // Grad of a leaf after backward. Unused-but-watched leaves read as zeros.
  std::span<const T> grad() const {
    s_->ensure_grad();
    return {s_->grad.data(), s_->grad.size()};
  }
  std::span<T> grad_mut() {
    s_->ensure_grad();
    return {s_->grad.data(), s_->grad.size()};
  }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  bool tracked() const { return s_->tracked; }
  void mark_tracked() { s_->tracked = true; }

  // Identity of the underlying buffer; used as a map key by tapes.
  const void* id() const { return s_.get(); }

  std::shared_ptr<detail::Storage<T>> storage() const { return s_; }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<detail::Storage<T>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  // Detached view into the same shape with converted element type.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(s_->data[i]);
    return Tensor<U>::from(s_->shape, std::move(out));
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
      throw DimensionError("non-positive tensor shape " + s.str());
  }

  std::shared_ptr<detail::Storage<T>> s_;
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* op_name);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace msy
