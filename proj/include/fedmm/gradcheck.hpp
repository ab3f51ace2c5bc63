#pragma once

#include <cmath>
#include <functional>

#include "fedmm/tensor.hpp"

namespace fedmm {

// Central finite differences, the gradient test oracle. Evaluates f only in
// the forward direction, so it is independent of the reverse-mode sweep it is
// used to check.
template <typename T>
Tensor<T> finite_difference_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                                 T h = T(1e-4)) {
  std::vector<T> g(x.data().size());
  std::vector<T> v = x.data();
  for (size_t k = 0; k < v.size(); ++k) {
    T orig = v[k];
    v[k] = orig + h;
    T fp = f(Tensor<T>(x.shape(), v));
    v[k] = orig - h;
    T fm = f(Tensor<T>(x.shape(), v));
    v[k] = orig;
    g[k] = (fp - fm) / (T(2) * h);
  }
  return Tensor<T>(x.shape(), std::move(g));
}

// Relative error with the agreed denominator floor.
template <typename T>
double rel_err(T a, T b) {
  double da = static_cast<double>(a), db = static_cast<double>(b);
  double denom = std::max({std::fabs(da), std::fabs(db), 1e-8});
  return std::fabs(da - db) / denom;
}

template <typename T>
double max_rel_err(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

}  // namespace fedmm
