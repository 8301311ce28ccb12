#pragma once

#include <torch/torch.h>

#include <array>

#include "aepl/model.hpp"

namespace aepl {

struct LossWeights {
  double alpha = 0.1;
  /// Full resolution first.
  std::vector<double> ds_weights{1.0, 0.5, 0.25, 0.125, 0.0625};
  double dice_smooth = 1e-5;

  double ds_weight_sum() const;
  void validate(std::size_t n_scales) const;
};

inline constexpr double kBceEpsilon = 1e-7;

/// 1 − mean_c (2Σp·t + smooth) / (Σp + Σt + smooth), sums over everything but
/// the channel axis (axis 1 for 5D input, axis 0 for 4D).
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& targets, double smooth = 1e-5);

/// Mean binary cross-entropy with probabilities clamped to [ε, 1−ε].
torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& targets);

/// Region targets (ET, WT, TC) as float [B, 3, X, Y, Z] from uint8 BraTS labels [B, X, Y, Z].
torch::Tensor region_targets(const torch::Tensor& labels);

/// Nearest-neighbour downsampling of full-resolution targets by 2^scale.
torch::Tensor downsample_targets(const torch::Tensor& targets, int scale);

/// Σ_s w_s (dice_s + bce_s) / Σ_s w_s over the deep-supervision scales.
/// `targets` are full-resolution region targets.
torch::Tensor seg_loss(const SegOutput& outputs, const torch::Tensor& targets, const LossWeights& weights);

/// Softmax cross-entropy, averaged over the batch. `grades` holds class indices.
torch::Tensor cls_loss(const torch::Tensor& logits, const torch::Tensor& grades);

template <typename T>
T total_loss(const T& seg, const T& cls, double alpha) {
  return seg + alpha * cls;
}

}  // namespace aepl
