#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ims/errors.hpp"
#include "ims/ops.hpp"
#include "ims/rng.hpp"
#include "ims/tensor.hpp"

namespace ims {

/// Architecture description of a maskable convolutional classifier:
/// a stack of conv(+relu, optional 2x2 pool) layers followed by an optional
/// hidden linear layer and the class head. Every conv layer's post-activation
/// map is a masking point.
struct ModelSpec {
  struct ConvLayer {
    std::int64_t out_channels = 16;
    std::int64_t kernel = 3;
    ops::Padding padding = ops::Padding::same;
    bool pool_after = true;

    bool operator==(const ConvLayer&) const = default;
  };

  std::int64_t in_channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::vector<ConvLayer> convs;
  std::int64_t hidden_width = 64;  // 0 disables the hidden layer
  std::int64_t num_classes = 8;

  /// The two-conv reference architecture used throughout the experiments.
  static ModelSpec tiny_cnn(std::int64_t in_channels = 1, std::int64_t side = 16,
                            std::int64_t classes = 8) {
    ModelSpec spec;
    spec.in_channels = in_channels;
    spec.height = side;
    spec.width = side;
    spec.convs = {{16, 3, ops::Padding::same, true}, {32, 3, ops::Padding::same, true}};
    spec.hidden_width = 64;
    spec.num_classes = classes;
    return spec;
  }

  void validate() const {
    if (num_classes < 2) {
      throw ArgumentError("model spec: need at least 2 classes");
    }
    if (in_channels < 1 || height < 1 || width < 1) {
      throw ArgumentError("model spec: invalid input shape");
    }
    for (const auto& c : convs) {
      if (c.out_channels < 2) {
        throw ArgumentError("model spec: conv layers need out_channels >= 2 "
                            "(a maskable channel axis must exist)");
      }
      if (c.kernel < 1 || (c.padding == ops::Padding::same && c.kernel % 2 == 0)) {
        throw ArgumentError("model spec: same-padded conv needs an odd kernel");
      }
    }
    if (hidden_width < 0) {
      throw ArgumentError("model spec: negative hidden width");
    }
    if (flattened_size() < 1) {
      throw ArgumentError("model spec: feature map collapses to nothing");
    }
  }

  /// Spatial dims and channel count entering the linear stage.
  std::int64_t flattened_size() const {
    std::int64_t h = height, w = width, ch = in_channels;
    for (const auto& c : convs) {
      if (c.padding == ops::Padding::valid) {
        h += 1 - c.kernel;
        w += 1 - c.kernel;
      }
      ch = c.out_channels;
      if (c.pool_after) {
        h /= 2;
        w /= 2;
      }
    }
    return ch * h * w;
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Convolutional classifier whose per-layer activation maps accept
/// channel-wise masks. Parameter tensors never change shape after
/// construction; training mutates values in place under exclusive access.
template <typename T>
class MaskableModel {
 public:
  MaskableModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    auto rng = make_rng(seed, "model-init");
    std::int64_t ch = spec_.in_channels;
    for (std::size_t l = 0; l < spec_.convs.size(); ++l) {
      const auto& c = spec_.convs[l];
      conv_w_.push_back(kaiming_uniform({c.out_channels, ch, c.kernel, c.kernel},
                                        ch * c.kernel * c.kernel, rng));
      conv_b_.push_back(Tensor<T>::zeros({c.out_channels}, /*requires_grad=*/true));
      ch = c.out_channels;
    }
    const std::int64_t flat = spec_.flattened_size();
    if (spec_.hidden_width > 0) {
      hidden_w_ = kaiming_uniform({flat, spec_.hidden_width}, flat, rng);
      hidden_b_ = Tensor<T>::zeros({spec_.hidden_width}, /*requires_grad=*/true);
      head_w_ = kaiming_uniform({spec_.hidden_width, spec_.num_classes},
                                spec_.hidden_width, rng);
    } else {
      head_w_ = kaiming_uniform({flat, spec_.num_classes}, flat, rng);
    }
    head_b_ = Tensor<T>::zeros({spec_.num_classes}, /*requires_grad=*/true);
  }

  const ModelSpec& spec() const { return spec_; }

  std::int64_t conv_layer_count() const {
    return static_cast<std::int64_t>(conv_w_.size());
  }

  std::int64_t out_channels(std::int64_t layer) const {
    return spec_.convs[static_cast<std::size_t>(layer)].out_channels;
  }

  std::vector<std::int64_t> conv_channel_counts() const {
    std::vector<std::int64_t> out;
    for (const auto& c : spec_.convs) out.push_back(c.out_channels);
    return out;
  }

  /// Parameters in checkpoint manifest order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t l = 0; l < conv_w_.size(); ++l) {
      out.emplace_back("conv" + std::to_string(l) + ".weight", conv_w_[l]);
      out.emplace_back("conv" + std::to_string(l) + ".bias", conv_b_[l]);
    }
    if (spec_.hidden_width > 0) {
      out.emplace_back("hidden.weight", hidden_w_);
      out.emplace_back("hidden.bias", hidden_b_);
    }
    out.emplace_back("head.weight", head_w_);
    out.emplace_back("head.bias", head_b_);
    return out;
  }

  void set_parameters_require_grad(bool on) {
    for (auto& [name, p] : named_parameters()) p.set_requires_grad(on);
  }

  /// Softmax class probabilities for a batch. When layer masks are given,
  /// each conv layer's post-relu activation map is channel-scaled by its
  /// mask before pooling, so a zero mask entry nulls that channel exactly.
  Tensor<T> forward(const Tensor<T>& x,
                    const std::vector<Tensor<T>>* layer_masks = nullptr) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels ||
        x.dim(2) != spec_.height || x.dim(3) != spec_.width) {
      throw ShapeError("forward: input " + shape_str(x.shape()) +
                       " does not match model input (N, " +
                       std::to_string(spec_.in_channels) + ", " +
                       std::to_string(spec_.height) + ", " +
                       std::to_string(spec_.width) + ")");
    }
    if (layer_masks != nullptr) validate_masks(*layer_masks);

    Tensor<T> h = x;
    for (std::size_t l = 0; l < conv_w_.size(); ++l) {
      h = ops::conv2d(h, conv_w_[l], spec_.convs[l].padding);
      h = ops::add(h, conv_b_[l]);
      h = ops::relu(h);
      if (layer_masks != nullptr) {
        h = ops::channel_scale(h, (*layer_masks)[l]);
      }
      if (spec_.convs[l].pool_after) h = ops::max_pool(h, 2);
    }
    h = ops::reshape(h, {h.dim(0), spec_.flattened_size()});
    if (spec_.hidden_width > 0) {
      h = ops::relu(ops::add(ops::matmul(h, hidden_w_), hidden_b_));
    }
    h = ops::add(ops::matmul(h, head_w_), head_b_);
    return ops::softmax(h);
  }

 private:
  static Tensor<T> kaiming_uniform(Shape shape, std::int64_t fan_in,
                                   std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> values(static_cast<std::size_t>(shape_size(shape)));
    for (T& v : values) v = static_cast<T>(dist(rng));
    return Tensor<T>::from_values(std::move(shape), std::move(values),
                                  /*requires_grad=*/true);
  }

  void validate_masks(const std::vector<Tensor<T>>& masks) const {
    if (masks.size() != conv_w_.size()) {
      throw ShapeError("forward: got " + std::to_string(masks.size()) +
                       " layer masks for " + std::to_string(conv_w_.size()) +
                       " conv layers");
    }
    constexpr T tol = static_cast<T>(1e-6);
    for (std::size_t l = 0; l < masks.size(); ++l) {
      const auto& m = masks[l];
      if (m.rank() != 1 || m.dim(0) != spec_.convs[l].out_channels) {
        throw ShapeError("forward: mask " + std::to_string(l) + " has shape " +
                         shape_str(m.shape()) + ", expected (" +
                         std::to_string(spec_.convs[l].out_channels) + ")");
      }
      for (T v : m.values()) {
        if (v < -tol || v > T(1) + tol) {
          throw ArgumentError("forward: mask " + std::to_string(l) +
                              " entry outside [0, 1]");
        }
      }
    }
  }

  ModelSpec spec_;
  std::vector<Tensor<T>> conv_w_, conv_b_;
  Tensor<T> hidden_w_, hidden_b_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace ims
