#include "ims/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ims/adamw.hpp"
#include "ims/errors.hpp"
#include "ims/losses.hpp"
#include "ims/rng.hpp"
#include "ims/tape.hpp"

namespace ims {

Tensor<float> predict_probs(const MaskableModel<float>& model,
                            const Tensor<float>& images,
                            const std::vector<Tensor<float>>* layer_masks,
                            std::int64_t batch_size) {
  const std::int64_t n = images.dim(0);
  Tensor<float> probs = Tensor<float>::zeros({n, model.spec().num_classes});
  float* dst = probs.values().data();
  const std::int64_t classes = model.spec().num_classes;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t len = std::min(batch_size, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    Tensor<float> batch = gather_images(images, idx);
    Tensor<float> p = model.forward(batch, layer_masks);
    std::copy(p.values().begin(), p.values().end(), dst + start * classes);
  }
  return probs;
}

std::vector<std::int64_t> argmax_rows(const Tensor<float>& probs) {
  const std::int64_t classes = probs.dim(probs.rank() - 1);
  const std::int64_t rows = probs.size() / classes;
  std::vector<std::int64_t> out(static_cast<std::size_t>(rows));
  const float* v = probs.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = v + r * classes;
    out[static_cast<std::size_t>(r)] =
        std::max_element(row, row + classes) - row;
  }
  return out;
}

double accuracy(const MaskableModel<float>& model, const LabeledDataset& ds,
                const std::vector<Tensor<float>>* layer_masks) {
  if (ds.size() == 0) {
    throw ArgumentError("accuracy: empty dataset");
  }
  const auto preds = argmax_rows(predict_probs(model, ds.images, layer_masks));
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    hits += preds[i] == ds.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

MaskableModel<float> train_backdoored(const ModelSpec& spec,
                                      const LabeledDataset& data,
                                      const AttackTrainConfig& cfg,
                                      TrainLog* log) {
  if (data.size() == 0) {
    throw ArgumentError("train_backdoored: empty dataset");
  }
  MaskableModel<float> model(spec, derive_seed(cfg.seed, "attack-weights"));

  AdamW<float>::Options opts;
  opts.lr = cfg.lr;
  AdamW<float> optimizer(model.named_parameters(), opts);

  const std::int64_t n = data.size();
  const std::int64_t classes = spec.num_classes;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(cfg.seed, "attack-batches");

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t hits = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t len = std::min(cfg.batch_size, n - start);
      std::span<const std::int64_t> idx(order.data() + start,
                                        static_cast<std::size_t>(len));
      Tensor<float> batch = gather_images(data.images, idx);
      Tensor<float> onehot = Tensor<float>::zeros({len, classes});
      for (std::int64_t i = 0; i < len; ++i) {
        onehot.values()[i * classes + data.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]] =
            1.0f;
      }

      Tape<float> tape;
      Tape<float>::Scope scope(tape);
      Tensor<float> probs = model.forward(batch);
      Tensor<float> loss = loss_agree(probs, onehot);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch));
      }
      optimizer.zero_grad();
      backward(loss);
      optimizer.step();

      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(len);
      const auto preds = argmax_rows(probs);
      for (std::int64_t i = 0; i < len; ++i) {
        hits += preds[static_cast<std::size_t>(i)] ==
                data.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      }
    }
    if (log != nullptr) {
      log->epoch_loss.push_back(loss_sum / static_cast<double>(n));
      log->epoch_accuracy.push_back(static_cast<double>(hits) /
                                    static_cast<double>(n));
    }
  }
  return model;
}

}  // namespace ims
