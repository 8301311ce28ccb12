#pragma once

#include <torch/torch.h>

#include <optional>
#include <vector>

#include "aepl/geometry.hpp"
#include "aepl/grade.hpp"
#include "aepl/metrics.hpp"
#include "aepl/model.hpp"

namespace aepl {

/// Patch origins covering a (padded) volume with the requested overlap.
struct WindowPlan {
  Shape3 volume_shape{0, 0, 0};
  Shape3 padded_shape{0, 0, 0};
  Shape3 pad_offset{0, 0, 0};
  Shape3 patch_size{0, 0, 0};
  std::vector<Shape3> origins;
};

WindowPlan plan_windows(const Shape3& volume_shape, const Shape3& patch_size, double overlap = 0.5);

/// Encoder outputs for every window of one case, plus the case-level grade
/// prediction (mean of the per-window softmax).
struct CaseEncoding {
  WindowPlan plan;
  std::vector<EncoderOutput> windows;
  GradePrompt predicted;
};

/// Runs the encoder and classifier over all windows. Model must be in eval mode.
CaseEncoding encode_case(const AeplNet& model, const torch::Tensor& voxels);

/// Prompt-conditioned decoding of cached windows; returns region
/// probabilities [3, X, Y, Z] averaged over overlapping windows.
torch::Tensor decode_case(const AeplNet& model, const CaseEncoding& encoding, const GradePrompt& prompt);

/// The prompt the decoder sees when nothing is overridden: one-hot argmax.
GradePrompt inference_prompt(const GradePrompt& predicted);

RegionMasks threshold_regions(const torch::Tensor& probs, double threshold = 0.5);

struct CaseInference {
  GradePrompt predicted;  // classifier distribution
  GradePrompt used;       // prompt given to the decoder
  torch::Tensor probs;    // [3, X, Y, Z], channels ET, WT, TC
  RegionMasks regions;
};

CaseInference infer_case(const AeplNet& model, const torch::Tensor& voxels,
                         const std::optional<GradePrompt>& prompt_override = std::nullopt);

}  // namespace aepl
