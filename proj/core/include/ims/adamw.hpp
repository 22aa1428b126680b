#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ims/errors.hpp"
#include "ims/tensor.hpp"

namespace ims {

/// Decoupled-weight-decay Adam over a fixed group of named parameters.
/// step() reads each parameter's grad buffer and updates values in place;
/// callers zero grads between steps. One state per parameter group per run.
template <typename T>
class AdamW {
 public:
  struct Options {
    T lr = T(0.01);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
  };

  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, Options opts)
      : params_(std::move(params)), opts_(opts) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].second.requires_grad()) {
        throw ArgumentError("AdamW: parameter '" + params_[i].first +
                            "' does not track gradients");
      }
      slots_[i].m.assign(static_cast<std::size_t>(params_[i].second.size()), T(0));
      slots_[i].v.assign(static_cast<std::size_t>(params_[i].second.size()), T(0));
    }
  }

  std::int64_t step_count() const { return step_; }
  const Options& options() const { return opts_; }

  void step() {
    ++step_;
    const T bc1 = T(1) - std::pow(opts_.beta1, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(opts_.beta2, static_cast<T>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i].second;
      const T* g = p.grad().data();
      const std::int64_t n = p.size();
      for (std::int64_t j = 0; j < n; ++j) {
        if (!std::isfinite(static_cast<double>(g[j]))) {
          throw GradientError("non-finite gradient in parameter '" +
                              params_[i].first + "' at entry " + std::to_string(j));
        }
      }
      T* m = slots_[i].m.data();
      T* v = slots_[i].v.data();
      T* w = p.values().data();
      for (std::int64_t j = 0; j < n; ++j) {
        m[j] = opts_.beta1 * m[j] + (T(1) - opts_.beta1) * g[j];
        v[j] = opts_.beta2 * v[j] + (T(1) - opts_.beta2) * g[j] * g[j];
        const T m_hat = m[j] / bc1;
        const T v_hat = v[j] / bc2;
        w[j] -= opts_.lr * (m_hat / (std::sqrt(v_hat) + opts_.eps) +
                            opts_.weight_decay * w[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<Slot> slots_;
  Options opts_;
  std::int64_t step_ = 0;
};

/// Element-wise projection of raw parameter values into [lo, hi], applied
/// outside any tape.
template <typename T>
void clip_params(Tensor<T>& t, T lo, T hi) {
  if (!(lo <= hi)) {
    throw ArgumentError("clip_params: lo " + std::to_string(lo) + " exceeds hi " +
                        std::to_string(hi));
  }
  for (T& v : t.values()) v = std::min(std::max(v, lo), hi);
}

}  // namespace ims
