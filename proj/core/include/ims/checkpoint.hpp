#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ims/model.hpp"

namespace ims {

inline constexpr const char* kCheckpointFormat = "ims-ckpt-1";

/// A loaded model plus, for defended checkpoints, the baked per-layer
/// activation scale vectors (the effective mask applied at each masking
/// point).
struct LoadedCheckpoint {
  MaskableModel<float> model;
  std::vector<std::vector<float>> activation_scales;  // empty for plain models

  bool defended() const { return !activation_scales.empty(); }
};

/// Writes `<base>.manifest.json` (spec, named parameter shapes, format
/// version, endianness tag) and `<base>.bin` (little-endian f32 payload,
/// parameters concatenated in manifest order).
void save_checkpoint(const MaskableModel<float>& model, const std::string& base,
                     const std::vector<std::vector<float>>* activation_scales = nullptr);

/// Round-trips save_checkpoint bit-exactly. Throws LoadError with a kind of
/// version / manifest / truncated / shape_mismatch / io on malformed input.
LoadedCheckpoint load_checkpoint(const std::string& base);

}  // namespace ims
