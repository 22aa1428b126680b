#include "ims/metrics.hpp"

#include <string>

#include "ims/errors.hpp"

namespace ims {

double compute_asr(std::span<const std::int64_t> predictions,
                   std::span<const std::int64_t> true_labels,
                   std::int64_t target_class) {
  if (predictions.size() != true_labels.size()) {
    throw ArgumentError("compute_asr: prediction/label count mismatch");
  }
  std::int64_t considered = 0, hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (true_labels[i] == target_class) continue;
    ++considered;
    hits += predictions[i] == target_class;
  }
  if (considered == 0) {
    throw ArgumentError("compute_asr: every sample belongs to the target class");
  }
  return static_cast<double>(hits) / static_cast<double>(considered);
}

double compute_arr(double alpha_p, double alpha_s) {
  if (!(alpha_p > 0.0)) {
    throw ArgumentError("compute_arr: pre-mitigation accuracy must be positive");
  }
  return 1.0 - alpha_s / alpha_p;
}

double compute_rdr(double alpha_p, double eta_s) {
  if (!(alpha_p > 0.0)) {
    throw ArgumentError("compute_rdr: pre-mitigation accuracy must be positive");
  }
  return 1.0 - eta_s / alpha_p;
}

}  // namespace ims
