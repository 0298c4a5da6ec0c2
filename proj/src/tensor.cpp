#include "msy/tensor.hpp"

#include <cmath>

namespace msy {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op_name) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op_name) + ": non-finite output element");
  }
}

template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

template class Tensor<float>;
template class Tensor<double>;

}  // namespace msy
