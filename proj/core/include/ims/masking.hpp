#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ims/adamw.hpp"
#include "ims/errors.hpp"
#include "ims/ops.hpp"
#include "ims/tensor.hpp"

// Selective invertible masking. Each conv layer carries a raw mask vector `a`
// and a selection vector `s`, both in [0, 1]. The effective mask pair is
//
//   mask    = sigmoid(k (a - 0.5)) + s * sigmoid(k (0.5 - a))
//   inverse = sigmoid(k (0.5 - a)) + s * sigmoid(k (a - 0.5))
//
// Channels with s near 1 are shared by both pruned views; channels with s
// near 0 are split between them, and in the limit s -> 0, k -> inf the pair
// becomes a hard threshold at a = 0.5 and its exact binary complement.

namespace ims {

template <typename T>
struct SelectionMaskSet {
  std::vector<Tensor<T>> raw;        // a_l, one rank-1 tensor per conv layer
  std::vector<Tensor<T>> selection;  // s_l, matching lengths
  T scale;                           // k

  static constexpr T kDefaultScale = T(20);
  static constexpr T kInitRaw = T(0.7);
  static constexpr T kInitSelection = T(1.0);

  /// Fresh mask parameters for the given per-layer channel counts: raw masks
  /// start near-identity but inside the sigmoid's responsive band, selection
  /// starts at 1 so nothing is selected until optimization selects it.
  static SelectionMaskSet initial(const std::vector<std::int64_t>& channels,
                                  T scale = kDefaultScale) {
    if (!(scale > T(0))) {
      throw ArgumentError("mask scale k must be positive");
    }
    SelectionMaskSet set;
    set.scale = scale;
    for (std::int64_t c : channels) {
      if (c < 1) {
        throw ArgumentError("mask layer must have at least one channel");
      }
      set.raw.push_back(Tensor<T>::full({c}, kInitRaw, /*requires_grad=*/true));
      set.selection.push_back(
          Tensor<T>::full({c}, kInitSelection, /*requires_grad=*/true));
    }
    return set;
  }

  std::size_t layer_count() const { return raw.size(); }

  std::int64_t total_entries() const {
    std::int64_t n = 0;
    for (const auto& s : selection) n += s.size();
    return n;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t l = 0; l < raw.size(); ++l) {
      out.emplace_back("mask" + std::to_string(l) + ".a", raw[l]);
      out.emplace_back("mask" + std::to_string(l) + ".s", selection[l]);
    }
    return out;
  }

  /// Projects every entry of a and s back into [0, 1]; run after each
  /// optimizer step, outside the tape.
  void clip_to_unit() {
    for (auto& a : raw) clip_params(a, T(0), T(1));
    for (auto& s : selection) clip_params(s, T(0), T(1));
  }

  void zero_grad() {
    for (auto& a : raw) a.zero_grad();
    for (auto& s : selection) s.zero_grad();
  }
};

template <typename T>
struct EffectiveMaskPair {
  std::vector<Tensor<T>> mask;     // a'_l
  std::vector<Tensor<T>> inverse;  // abar'_l
};

/// Builds the effective mask pair from the raw parameters; differentiable
/// w.r.t. both a and s when a tape is active.
template <typename T>
EffectiveMaskPair<T> build_masks(const SelectionMaskSet<T>& params) {
  if (!(params.scale > T(0))) {
    throw ArgumentError("build_masks: scale k must be positive, got " +
                        std::to_string(static_cast<double>(params.scale)));
  }
  if (params.raw.size() != params.selection.size()) {
    throw ShapeError("build_masks: raw/selection layer counts differ");
  }
  EffectiveMaskPair<T> pair;
  const T k = params.scale;
  for (std::size_t l = 0; l < params.raw.size(); ++l) {
    const Tensor<T>& a = params.raw[l];
    const Tensor<T>& s = params.selection[l];
    if (a.shape() != s.shape()) {
      throw ShapeError("build_masks: layer " + std::to_string(l) +
                       " raw/selection length mismatch");
    }
    Tensor<T> keep = ops::sigmoid(ops::mul(ops::add(a, T(-0.5)), k));
    Tensor<T> drop = ops::sigmoid(ops::mul(ops::add(ops::mul(a, T(-1)), T(0.5)), k));
    pair.mask.push_back(ops::add(keep, ops::mul(s, drop)));
    pair.inverse.push_back(ops::add(drop, ops::mul(s, keep)));
  }
  return pair;
}

template <typename T>
struct MaskBoundCheck {
  std::vector<std::vector<T>> residual;  // |a' + abar' - 1| per entry
  std::vector<std::vector<T>> margin;    // 2s - residual per entry
  T min_margin;
};

/// Per-entry residual of the complementarity bound |a' + abar' - 1| <= 2s.
/// Margins should never drop below -1e-7.
template <typename T>
MaskBoundCheck<T> lemma1_residual(const EffectiveMaskPair<T>& pair,
                                  const SelectionMaskSet<T>& params) {
  if (pair.mask.size() != params.selection.size()) {
    throw ShapeError("lemma1_residual: pair/params layer counts differ");
  }
  MaskBoundCheck<T> check;
  check.min_margin = std::numeric_limits<T>::max();
  for (std::size_t l = 0; l < pair.mask.size(); ++l) {
    const auto mv = pair.mask[l].values();
    const auto iv = pair.inverse[l].values();
    const auto sv = params.selection[l].values();
    std::vector<T> res(mv.size()), mar(mv.size());
    for (std::size_t i = 0; i < mv.size(); ++i) {
      res[i] = std::abs(mv[i] + iv[i] - T(1));
      mar[i] = T(2) * sv[i] - res[i];
      check.min_margin = std::min(check.min_margin, mar[i]);
    }
    check.residual.push_back(std::move(res));
    check.margin.push_back(std::move(mar));
  }
  return check;
}

/// Fraction of selection entries below 0.5: how much of the model the
/// optimization made eligible for pruning.
template <typename T>
double effective_sparsity(const SelectionMaskSet<T>& params) {
  std::int64_t total = 0, below = 0;
  for (const auto& s : params.selection) {
    for (T v : s.values()) {
      ++total;
      if (v < T(0.5)) ++below;
    }
  }
  if (total == 0) {
    throw ArgumentError("effective_sparsity: empty selection set");
  }
  return static_cast<double>(below) / static_cast<double>(total);
}

/// lambda / |S| * ||S||_1, on the tape. |s| is composed as relu(s)+relu(-s)
/// so the penalty stays a primitive expression.
template <typename T>
Tensor<T> l1_penalty(const SelectionMaskSet<T>& params, T lambda) {
  if (lambda < T(0)) {
    throw ArgumentError("l1_penalty: negative lambda");
  }
  const std::int64_t total = params.total_entries();
  if (total == 0) {
    throw ArgumentError("l1_penalty: empty selection set");
  }
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  for (const auto& s : params.selection) {
    Tensor<T> abs_s = ops::add(ops::relu(s), ops::relu(ops::mul(s, T(-1))));
    acc = ops::add(acc, ops::sum(abs_s));
  }
  return ops::mul(acc, lambda / static_cast<T>(total));
}

}  // namespace ims
