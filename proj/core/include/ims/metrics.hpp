#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ims {

/// Accuracies feeding the mitigation report. alpha_p/alpha_s are clean
/// accuracies before/after mitigation, eta_s is the post-mitigation accuracy
/// on triggered inputs scored against true labels.
struct EvalInputs {
  double alpha_p = 0.0;
  double alpha_s = 0.0;
  double eta_s = 0.0;
  double triggered_target_rate = 0.0;  // feeds ASR
  std::int64_t target_class = 0;
};

/// Fraction of triggered samples, excluding those whose true label is the
/// target class, that the model classifies as the target class.
double compute_asr(std::span<const std::int64_t> predictions,
                   std::span<const std::int64_t> true_labels,
                   std::int64_t target_class);

/// 1 - alpha_s / alpha_p. Negative when mitigation improves clean accuracy;
/// reported as-is.
double compute_arr(double alpha_p, double alpha_s);

/// 1 - eta_s / alpha_p.
double compute_rdr(double alpha_p, double eta_s);

}  // namespace ims
