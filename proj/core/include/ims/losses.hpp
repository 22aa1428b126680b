#pragma once

#include <cmath>
#include <string>

#include "ims/errors.hpp"
#include "ims/ops.hpp"
#include "ims/tensor.hpp"

// Agreement / disagreement losses over softmax outputs. Both reduce to
// -log of a clamped inner product: agreement penalizes rows drifting apart,
// disagreement penalizes rows lining up. Batched inputs reduce by mean so the
// sparsity weight keeps a batch-size-independent scale.

namespace ims {

/// Clamp applied to the inner product before the log; the raw losses are
/// unbounded at <q,q'> in {0, 1}.
inline constexpr double kLossClampEps = 1e-7;

namespace detail {

template <typename T>
Tensor<T> as_rows(const Tensor<T>& q, const char* name) {
  if (q.rank() == 1) return ops::reshape(q, {1, q.dim(0)});
  if (q.rank() == 2) return q;
  throw ShapeError(std::string(name) + ": expected probability rows, got " +
                   shape_str(q.shape()));
}

template <typename T>
void check_probability_rows(const Tensor<T>& q, const char* name) {
  const std::int64_t classes = q.dim(1);
  const std::int64_t rows = q.dim(0);
  const T* v = q.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T sum = T(0);
    for (std::int64_t c = 0; c < classes; ++c) {
      const T e = v[r * classes + c];
      if (!(e >= T(0))) {
        throw ArgumentError(std::string(name) + ": negative entry in row " +
                            std::to_string(r));
      }
      sum += e;
    }
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-5) {
      throw ArgumentError(std::string(name) + ": row " + std::to_string(r) +
                          " sums to " + std::to_string(static_cast<double>(sum)) +
                          ", not 1");
    }
  }
}

/// Row-wise inner products of two (N, C) probability tensors, clamped away
/// from {0, 1}; differentiable through both arguments.
template <typename T>
Tensor<T> clamped_row_dots(const Tensor<T>& q_hat, const Tensor<T>& q,
                           const char* name) {
  Tensor<T> a = as_rows(q_hat, name);
  Tensor<T> b = as_rows(q, name);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": mismatched shapes " +
                     shape_str(q_hat.shape()) + " and " + shape_str(q.shape()));
  }
  check_probability_rows(a, name);
  check_probability_rows(b, name);
  Tensor<T> dots = ops::sum(ops::mul(a, b), -1);
  return ops::clamp(dots, static_cast<T>(kLossClampEps),
                    static_cast<T>(1.0 - kLossClampEps));
}

}  // namespace detail

/// -log <q_hat, q>, mean over rows. Minimizing pulls the distributions
/// together.
template <typename T>
Tensor<T> loss_agree(const Tensor<T>& q_hat, const Tensor<T>& q) {
  Tensor<T> dots = detail::clamped_row_dots(q_hat, q, "loss_agree");
  return ops::mul(ops::mean(ops::log(dots)), T(-1));
}

/// -log(1 - <q_hat, q>), mean over rows. Minimizing pushes the distributions
/// apart.
template <typename T>
Tensor<T> loss_disagree(const Tensor<T>& q_hat, const Tensor<T>& q) {
  // dots land in [eps, 1-eps], so the complement needs no second clamp.
  Tensor<T> dots = detail::clamped_row_dots(q_hat, q, "loss_disagree");
  Tensor<T> complement = ops::add(ops::mul(dots, T(-1)), T(1));
  return ops::mul(ops::mean(ops::log(complement)), T(-1));
}

}  // namespace ims
