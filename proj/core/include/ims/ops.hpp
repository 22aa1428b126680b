#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ims/errors.hpp"
#include "ims/tape.hpp"
#include "ims/tensor.hpp"

// Differentiable primitives. Every op validates its shape rule, computes the
// output eagerly, and, when a tape is active and an input tracks gradients,
// records a backward step that accumulates into the inputs' grad buffers.
//
// Broadcasting is deliberately narrow: scalar against anything, and a rank-1
// vector against axis 1 of a rank-2 or rank-4 tensor (bias addition and
// channel-wise scaling). Everything else is a shape error.

namespace ims::ops {

enum class Padding { same, valid };

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<ims::detail::TensorNode<T>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void record_step(Tensor<T>& out, std::function<void()> step) {
  out.set_requires_grad(true);
  Tape<T>* tape = Tape<T>::current();
  tape->attach(out, tape->record(std::move(step)));
}

// Axis-1 blocking: shape (d0, d1, rest...) seen as d0 blocks of d1 rows of
// `inner` contiguous elements.
struct Axis1Blocks {
  std::int64_t outer;
  std::int64_t channels;
  std::int64_t inner;
};

inline Axis1Blocks axis1_blocks(const Shape& s) {
  Axis1Blocks b{s[0], s[1], 1};
  for (std::size_t i = 2; i < s.size(); ++i) b.inner *= s[i];
  return b;
}

template <typename T>
bool is_scalar(const Tensor<T>& t) {
  return t.rank() == 0;
}

// vector `v` broadcasts along axis 1 of `x`?
template <typename T>
bool is_axis1_vector(const Tensor<T>& x, const Tensor<T>& v) {
  return v.rank() == 1 && (x.rank() == 2 || x.rank() == 4) &&
         v.dim(0) == x.dim(1);
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// add / mul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::NodePtr;
  const bool same = a.shape() == b.shape();
  const bool scalar_a = !same && detail::is_scalar(a);
  const bool scalar_b = !same && !scalar_a && detail::is_scalar(b);
  const bool vec_b = !same && !scalar_a && !scalar_b && detail::is_axis1_vector(a, b);
  const bool vec_a = !same && !scalar_a && !scalar_b && !vec_b && detail::is_axis1_vector(b, a);
  if (!same && !scalar_a && !scalar_b && !vec_a && !vec_b) {
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Tensor<T>& big = (scalar_a || vec_a) ? b : a;
  const Tensor<T>& small = (scalar_a || vec_a) ? a : b;

  Tensor<T> out = Tensor<T>::zeros(big.shape());
  T* o = out.values().data();
  const T* bg = big.values().data();
  const std::int64_t n = big.size();

  if (same) {
    const T* sm = small.values().data();
    for (std::int64_t i = 0; i < n; ++i) o[i] = bg[i] + sm[i];
  } else if (scalar_a || scalar_b) {
    const T sv = small.values()[0];
    for (std::int64_t i = 0; i < n; ++i) o[i] = bg[i] + sv;
  } else {
    const auto blk = detail::axis1_blocks(big.shape());
    const T* vv = small.values().data();
    for (std::int64_t b0 = 0; b0 < blk.outer; ++b0) {
      for (std::int64_t c = 0; c < blk.channels; ++c) {
        const T vc = vv[c];
        T* dst = o + (b0 * blk.channels + c) * blk.inner;
        const T* src = bg + (b0 * blk.channels + c) * blk.inner;
        for (std::int64_t i = 0; i < blk.inner; ++i) dst[i] = src[i] + vc;
      }
    }
  }

  if (detail::recording<T>({&a, &b})) {
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    const bool a_is_small = scalar_a || vec_a;
    detail::record_step(out, [an, bn, on, same, a_is_small]() {
      const T* g = on->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      auto& big_n = a_is_small ? bn : an;
      auto& small_n = a_is_small ? an : bn;
      if (big_n->requires_grad) {
        T* gb = big_n->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
      if (!same && small_n->requires_grad) {
        T* gs = small_n->grad.data();
        if (small_n->shape.empty()) {
          T acc = T(0);
          for (std::int64_t i = 0; i < n; ++i) acc += g[i];
          gs[0] += acc;
        } else {
          const auto blk = detail::axis1_blocks(big_n->shape);
          for (std::int64_t b0 = 0; b0 < blk.outer; ++b0) {
            for (std::int64_t c = 0; c < blk.channels; ++c) {
              const T* gp = g + (b0 * blk.channels + c) * blk.inner;
              T acc = T(0);
              for (std::int64_t i = 0; i < blk.inner; ++i) acc += gp[i];
              gs[c] += acc;
            }
          }
        }
      } else if (same && small_n->requires_grad) {
        T* gs = small_n->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gs[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T b) {
  return add(a, Tensor<T>::scalar(b));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::NodePtr;
  const bool same = a.shape() == b.shape();
  const bool scalar_a = !same && detail::is_scalar(a);
  const bool scalar_b = !same && !scalar_a && detail::is_scalar(b);
  if (!same && !scalar_a && !scalar_b) {
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " (channel scaling goes through channel_scale)");
  }
  const Tensor<T>& big = scalar_a ? b : a;
  const Tensor<T>& small = scalar_a ? a : b;

  Tensor<T> out = Tensor<T>::zeros(big.shape());
  T* o = out.values().data();
  const T* bg = big.values().data();
  const std::int64_t n = big.size();
  if (same) {
    const T* sm = small.values().data();
    for (std::int64_t i = 0; i < n; ++i) o[i] = bg[i] * sm[i];
  } else {
    const T sv = small.values()[0];
    for (std::int64_t i = 0; i < n; ++i) o[i] = bg[i] * sv;
  }

  if (detail::recording<T>({&a, &b})) {
    NodePtr<T> an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    detail::record_step(out, [an, bn, on, same, scalar_a]() {
      const T* g = on->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      auto& big_n = scalar_a ? bn : an;
      auto& small_n = scalar_a ? an : bn;
      if (same) {
        if (an->requires_grad) {
          T* ga = an->grad.data();
          const T* bv = bn->values.data();
          for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (bn->requires_grad) {
          T* gb = bn->grad.data();
          const T* av = an->values.data();
          for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        }
      } else {
        if (big_n->requires_grad) {
          T* gb = big_n->grad.data();
          const T sv = small_n->values[0];
          for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * sv;
        }
        if (small_n->requires_grad) {
          const T* bv = big_n->values.data();
          T acc = T(0);
          for (std::int64_t i = 0; i < n; ++i) acc += g[i] * bv[i];
          small_n->grad[0] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T b) {
  return mul(a, Tensor<T>::scalar(b));
}

// ---------------------------------------------------------------------------
// element-wise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.values().data();
  T* o = out.values().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      const T* xv = xn->values.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.values().data();
  T* o = out.values().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) o[i] = detail::stable_sigmoid(xv[i]);

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      const T* y = on->values.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

/// Natural log; inputs must be strictly positive.
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  const T* xv = x.values().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!(xv[i] > T(0))) {
      throw ArgumentError("log: input entry " + std::to_string(i) +
                          " is outside the positive domain");
    }
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  T* o = out.values().data();
  for (std::int64_t i = 0; i < n; ++i) o[i] = std::log(xv[i]);

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      const T* xv = xn->values.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
    });
  }
  return out;
}

/// Element-wise projection onto [lo, hi]. Gradient passes where the input
/// lies inside the bounds (inclusive).
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) {
    throw ArgumentError("clamp: lo " + std::to_string(lo) + " exceeds hi " +
                        std::to_string(hi));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.values().data();
  T* o = out.values().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) o[i] = std::min(std::max(xv[i], lo), hi);

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on, lo, hi]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      const T* xv = xn->values.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax over the class axis (the trailing axis), max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) {
    throw ShapeError("softmax: rank-0 input");
  }
  const std::int64_t classes = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / classes;

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.values().data();
  T* o = out.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * classes;
    T* orow = o + r * classes;
    T m = xr[0];
    for (std::int64_t c = 1; c < classes; ++c) m = std::max(m, xr[c]);
    T sum = T(0);
    for (std::int64_t c = 0; c < classes; ++c) {
      orow[c] = std::exp(xr[c] - m);
      sum += orow[c];
    }
    const T inv = T(1) / sum;
    for (std::int64_t c = 0; c < classes; ++c) orow[c] *= inv;
  }

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on, rows, classes]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      const T* y = on->values.data();
      T* gx = xn->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gr = g + r * classes;
        const T* yr = y + r * classes;
        T* gxr = gx + r * classes;
        T dot = T(0);
        for (std::int64_t c = 0; c < classes; ++c) dot += gr[c] * yr[c];
        for (std::int64_t c = 0; c < classes; ++c) gxr[c] += yr[c] * (gr[c] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Full reduction to a rank-0 scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const T g = on->grad[0];
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(xn->values.size());
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

/// Reduction over the trailing axis only; output drops that axis.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  if (x.rank() < 1) {
    throw ShapeError("sum(axis): rank-0 input");
  }
  if (axis != -1 && axis != x.rank() - 1) {
    throw ArgumentError("sum: only the trailing axis is supported, got axis " +
                        std::to_string(axis));
  }
  const std::int64_t classes = x.dim(x.rank() - 1);
  const std::int64_t rows = x.size() / classes;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);

  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* xv = x.values().data();
  T* o = out.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* xr = xv + r * classes;
    for (std::int64_t c = 0; c < classes; ++c) acc += xr[c];
    o[r] = acc;
  }

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on, rows, classes]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T gr = g[r];
        T* gxr = gx + r * classes;
        for (std::int64_t c = 0; c < classes; ++c) gxr[c] += gr;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) {
    throw ArgumentError("mean: empty tensor");
  }
  T acc = T(0);
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(x.size()));

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const std::int64_t n = static_cast<std::int64_t>(xn->values.size());
      const T g = on->grad[0] / static_cast<T>(n);
      T* gx = xn->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reshape (layout-preserving view copy)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_size(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor<T> out = Tensor<T>::from_values(std::move(new_shape),
                                         {x.values().begin(), x.values().end()});
  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(xn->values.size());
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// (N, F) x (F, O) -> (N, O)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::int64_t N = a.dim(0), F = a.dim(1), O = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({N, O});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* o = out.values().data();
  for (std::int64_t n = 0; n < N; ++n) {
    T* orow = o + n * O;
    const T* arow = av + n * F;
    for (std::int64_t f = 0; f < F; ++f) {
      const T afv = arow[f];
      const T* brow = bv + f * O;
      for (std::int64_t k = 0; k < O; ++k) orow[k] += afv * brow[k];
    }
  }

  if (detail::recording<T>({&a, &b})) {
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    detail::record_step(out, [an, bn, on, N, F, O]() {
      const T* g = on->grad.data();
      if (an->requires_grad) {
        T* ga = an->grad.data();
        const T* bv = bn->values.data();
        for (std::int64_t n = 0; n < N; ++n) {
          const T* grow = g + n * O;
          T* garow = ga + n * F;
          for (std::int64_t f = 0; f < F; ++f) {
            const T* brow = bv + f * O;
            T acc = T(0);
            for (std::int64_t k = 0; k < O; ++k) acc += grow[k] * brow[k];
            garow[f] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        T* gb = bn->grad.data();
        const T* av = an->values.data();
        for (std::int64_t n = 0; n < N; ++n) {
          const T* grow = g + n * O;
          const T* arow = av + n * F;
          for (std::int64_t f = 0; f < F; ++f) {
            const T afv = arow[f];
            T* gbrow = gb + f * O;
            for (std::int64_t k = 0; k < O; ++k) gbrow[k] += afv * grow[k];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2-D cross-correlation, stride 1. x: (N, Cin, H, W), w: (Cout, Cin, KH, KW).
/// Padding::same keeps spatial dims (odd kernels only); Padding::valid shrinks
/// them to (H-KH+1, W-KW+1). Bias is a separate axis-1 add.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Padding padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and kernel, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " do not match kernel channels " + std::to_string(w.dim(1)));
  }
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);

  std::int64_t ph = 0, pw = 0, OH = 0, OW = 0;
  if (padding == Padding::same) {
    if (KH % 2 == 0 || KW % 2 == 0) {
      throw ArgumentError("conv2d: same padding requires odd kernel sizes");
    }
    ph = KH / 2;
    pw = KW / 2;
    OH = H;
    OW = W;
  } else {
    if (H < KH || W < KW) {
      throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                       " smaller than kernel for valid padding");
    }
    OH = H - KH + 1;
    OW = W - KW + 1;
  }

  Tensor<T> out = Tensor<T>::zeros({N, Co, OH, OW});
  {
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    T* o = out.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t co = 0; co < Co; ++co) {
        T* oplane = o + (n * Co + co) * OH * OW;
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
          const T* xplane = xv + (n * Ci + ci) * H * W;
          const T* wk = wv + (co * Ci + ci) * KH * KW;
          for (std::int64_t kh = 0; kh < KH; ++kh) {
            const std::int64_t dh = kh - ph;
            const std::int64_t h0 = std::max<std::int64_t>(0, -dh);
            const std::int64_t h1 = std::min(OH, H - dh);
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const T wval = wk[kh * KW + kw];
              const std::int64_t dw = kw - pw;
              const std::int64_t w0 = std::max<std::int64_t>(0, -dw);
              const std::int64_t w1 = std::min(OW, W - dw);
              if (w1 <= w0) continue;
              for (std::int64_t h = h0; h < h1; ++h) {
                const T* src = xplane + (h + dh) * W + (w0 + dw);
                T* dst = oplane + h * OW + w0;
                const std::int64_t len = w1 - w0;
                for (std::int64_t i = 0; i < len; ++i) dst[i] += wval * src[i];
              }
            }
          }
        }
      }
    }
  }

  if (detail::recording<T>({&x, &w})) {
    auto xn = x.node_ptr(), wn = w.node_ptr(), on = out.node_ptr();
    detail::record_step(out, [xn, wn, on, N, Ci, Co, H, W, KH, KW, ph, pw, OH, OW]() {
      const T* g = on->grad.data();
      const bool need_gx = xn->requires_grad;
      const bool need_gw = wn->requires_grad;
      const T* xv = xn->values.data();
      const T* wv = wn->values.data();
      T* gx = need_gx ? xn->grad.data() : nullptr;
      T* gw = need_gw ? wn->grad.data() : nullptr;
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t co = 0; co < Co; ++co) {
          const T* gplane = g + (n * Co + co) * OH * OW;
          for (std::int64_t ci = 0; ci < Ci; ++ci) {
            const std::int64_t xoff = (n * Ci + ci) * H * W;
            const std::int64_t woff = (co * Ci + ci) * KH * KW;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
              const std::int64_t dh = kh - ph;
              const std::int64_t h0 = std::max<std::int64_t>(0, -dh);
              const std::int64_t h1 = std::min(OH, H - dh);
              for (std::int64_t kw = 0; kw < KW; ++kw) {
                const std::int64_t dw = kw - pw;
                const std::int64_t w0 = std::max<std::int64_t>(0, -dw);
                const std::int64_t w1 = std::min(OW, W - dw);
                const std::int64_t len = w1 - w0;
                if (len <= 0) continue;
                if (need_gx) {
                  const T wval = wv[woff + kh * KW + kw];
                  for (std::int64_t h = h0; h < h1; ++h) {
                    T* dst = gx + xoff + (h + dh) * W + (w0 + dw);
                    const T* src = gplane + h * OW + w0;
                    for (std::int64_t i = 0; i < len; ++i) dst[i] += wval * src[i];
                  }
                }
                if (need_gw) {
                  T acc = T(0);
                  for (std::int64_t h = h0; h < h1; ++h) {
                    const T* xs = xv + xoff + (h + dh) * W + (w0 + dw);
                    const T* gs = gplane + h * OW + w0;
                    for (std::int64_t i = 0; i < len; ++i) acc += xs[i] * gs[i];
                  }
                  gw[woff + kh * KW + kw] += acc;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel_scale
// ---------------------------------------------------------------------------

/// Multiplies each channel plane of x (N, C, H, W) by scale[c]; this is the
/// channel-wise mask application point.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& scale) {
  if (x.rank() != 4 || scale.rank() != 1 || scale.dim(0) != x.dim(1)) {
    throw ShapeError("channel_scale: expected (N, C, H, W) and (C,), got " +
                     shape_str(x.shape()) + " and " + shape_str(scale.shape()));
  }
  const auto blk = detail::axis1_blocks(x.shape());
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* xv = x.values().data();
    const T* sv = scale.values().data();
    T* o = out.values().data();
    for (std::int64_t n = 0; n < blk.outer; ++n) {
      for (std::int64_t c = 0; c < blk.channels; ++c) {
        const T s = sv[c];
        const T* src = xv + (n * blk.channels + c) * blk.inner;
        T* dst = o + (n * blk.channels + c) * blk.inner;
        for (std::int64_t i = 0; i < blk.inner; ++i) dst[i] = src[i] * s;
      }
    }
  }

  if (detail::recording<T>({&x, &scale})) {
    auto xn = x.node_ptr(), sn = scale.node_ptr(), on = out.node_ptr();
    detail::record_step(out, [xn, sn, on, blk]() {
      const T* g = on->grad.data();
      if (xn->requires_grad) {
        T* gx = xn->grad.data();
        const T* sv = sn->values.data();
        for (std::int64_t n = 0; n < blk.outer; ++n) {
          for (std::int64_t c = 0; c < blk.channels; ++c) {
            const T s = sv[c];
            const T* gp = g + (n * blk.channels + c) * blk.inner;
            T* dst = gx + (n * blk.channels + c) * blk.inner;
            for (std::int64_t i = 0; i < blk.inner; ++i) dst[i] += gp[i] * s;
          }
        }
      }
      if (sn->requires_grad) {
        T* gs = sn->grad.data();
        const T* xv = xn->values.data();
        for (std::int64_t n = 0; n < blk.outer; ++n) {
          for (std::int64_t c = 0; c < blk.channels; ++c) {
            const T* gp = g + (n * blk.channels + c) * blk.inner;
            const T* xp = xv + (n * blk.channels + c) * blk.inner;
            T acc = T(0);
            for (std::int64_t i = 0; i < blk.inner; ++i) acc += gp[i] * xp[i];
            gs[c] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// max_pool
// ---------------------------------------------------------------------------

/// k x k max pooling with stride k; trailing rows/columns that do not fill a
/// window are dropped.
template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int k = 2) {
  if (x.rank() != 4) {
    throw ShapeError("max_pool: expected rank-4 input, got " + shape_str(x.shape()));
  }
  if (k < 1) {
    throw ArgumentError("max_pool: window must be positive");
  }
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = H / k, OW = W / k;
  if (OH == 0 || OW == 0) {
    throw ShapeError("max_pool: input " + shape_str(x.shape()) +
                     " smaller than the pooling window");
  }

  Tensor<T> out = Tensor<T>::zeros({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(N * C * OH * OW));
  {
    const T* xv = x.values().data();
    T* o = out.values().data();
    std::int64_t* am = argmax->data();
    for (std::int64_t p = 0; p < N * C; ++p) {
      const T* plane = xv + p * H * W;
      T* oplane = o + p * OH * OW;
      std::int64_t* aplane = am + p * OH * OW;
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          T best = plane[(oh * k) * W + ow * k];
          std::int64_t best_idx = (oh * k) * W + ow * k;
          for (std::int64_t dh = 0; dh < k; ++dh) {
            for (std::int64_t dw = 0; dw < k; ++dw) {
              const std::int64_t idx = (oh * k + dh) * W + ow * k + dw;
              if (plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          oplane[oh * OW + ow] = best;
          aplane[oh * OW + ow] = p * H * W + best_idx;
        }
      }
    }
  }

  if (detail::recording<T>({&x})) {
    auto xn = x.node_ptr();
    auto on = out.node_ptr();
    detail::record_step(out, [xn, on, argmax]() {
      if (!xn->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      const std::int64_t n = static_cast<std::int64_t>(on->values.size());
      const std::int64_t* am = argmax->data();
      for (std::int64_t i = 0; i < n; ++i) gx[am[i]] += g[i];
    });
  }
  return out;
}

}  // namespace ims::ops
