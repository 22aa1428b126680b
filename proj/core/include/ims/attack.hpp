#pragma once

#include <cstdint>
#include <vector>

#include "ims/data.hpp"
#include "ims/model.hpp"

namespace ims {

struct AttackTrainConfig {
  std::int64_t epochs = 15;
  std::int64_t batch_size = 64;
  float lr = 2e-3f;
  std::uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // on the training set
};

/// Class probabilities for a whole dataset, evaluated without gradients in
/// batches.
Tensor<float> predict_probs(const MaskableModel<float>& model,
                            const Tensor<float>& images,
                            const std::vector<Tensor<float>>* layer_masks = nullptr,
                            std::int64_t batch_size = 256);

std::vector<std::int64_t> argmax_rows(const Tensor<float>& probs);

double accuracy(const MaskableModel<float>& model, const LabeledDataset& ds,
                const std::vector<Tensor<float>>* layer_masks = nullptr);

/// Trains a classifier on the given (typically poisoned) dataset with
/// cross-entropy and AdamW; this is how the attacker's parameters come to
/// carry the backdoor. Deterministic under the config seed.
MaskableModel<float> train_backdoored(const ModelSpec& spec,
                                      const LabeledDataset& data,
                                      const AttackTrainConfig& cfg,
                                      TrainLog* log = nullptr);

}  // namespace ims
