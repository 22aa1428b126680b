#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ims/tensor.hpp"

namespace ims {

enum class Provenance { clean, poisoned };

/// Immutable-after-construction image classification dataset. Images live in
/// one (N, C, H, W) tensor with values in [0, 1]; per-sample poison flags
/// mark triggered samples.
struct LabeledDataset {
  Tensor<float> images;
  std::vector<std::int64_t> labels;
  std::vector<std::uint8_t> poison_flags;
  std::int64_t num_classes = 0;
  Provenance provenance = Provenance::clean;

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }

  std::int64_t poisoned_count() const {
    std::int64_t n = 0;
    for (auto f : poison_flags) n += f;
    return n;
  }
};

/// Gathers the given sample indices into a fresh (n, C, H, W) batch tensor.
Tensor<float> gather_images(const Tensor<float>& images,
                            std::span<const std::int64_t> indices);

/// Subset view materialized as a new dataset.
LabeledDataset gather_dataset(const LabeledDataset& ds,
                              std::span<const std::int64_t> indices);

/// Backdoor trigger description: either a solid square patch written over a
/// corner region, or an alpha-blend with a full-size pattern image.
struct TriggerSpec {
  enum class Kind { patch, blend };
  enum class Corner { top_left, top_right, bottom_left, bottom_right };

  Kind kind = Kind::patch;
  std::int64_t target_class = 0;

  // patch
  std::int64_t patch_size = 3;
  Corner patch_corner = Corner::bottom_right;
  float patch_fill = 1.0f;

  // blend
  Tensor<float> blend_pattern;  // (C, H, W), values in [0, 1]
  float blend_alpha = 0.2f;

  void validate(std::int64_t channels, std::int64_t height, std::int64_t width) const;
};

/// Procedurally generated classification set: per-class oriented bars,
/// blobs, and checkerboards with additive noise. Deterministic under seed;
/// labels balanced exactly; samples shuffled.
LabeledDataset generate_synthetic(std::int64_t classes, std::int64_t per_class,
                                  std::int64_t size, std::uint64_t seed,
                                  std::int64_t channels = 1, float noise = 0.15f);

/// Loads an MNIST-convention IDX image/label file pair (big-endian headers,
/// magics 0x00000803 / 0x00000801); pixel bytes scaled to [0, 1].
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Stamps the trigger onto every sample of the batch; labels untouched.
/// Patch overwrites its corner block, blend computes (1-a) x + a pattern.
/// Output pixels stay in [0, 1].
Tensor<float> apply_trigger(const Tensor<float>& images, const TriggerSpec& trigger);

/// Poisons floor(ratio * N) samples chosen uniformly without replacement
/// among samples that are not already flagged and whose label is not the
/// target class; chosen samples get the trigger and the target label.
LabeledDataset poison(const LabeledDataset& dataset, const TriggerSpec& trigger,
                      double ratio, std::uint64_t seed);

/// The defender's view: a small clean mitigation set (exactly
/// samples_per_class correctly labeled samples per class), a clean test set
/// disjoint from it, and that test set with the trigger stamped on.
struct DefenderSplit {
  LabeledDataset mitigation;      // D_m
  LabeledDataset clean_test;
  LabeledDataset triggered_test;  // clean_test + trigger, true labels kept
};

DefenderSplit make_defender_split(const LabeledDataset& holdout,
                                  std::int64_t samples_per_class,
                                  const TriggerSpec& trigger);

/// Dataset cache: `<base>.manifest.json` + `<base>.bin` with the f32 image
/// payload, mirroring the checkpoint layout.
void save_dataset(const LabeledDataset& ds, const std::string& base);
LabeledDataset load_dataset(const std::string& base);

}  // namespace ims
