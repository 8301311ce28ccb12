#include "aepl/objectives.hpp"

#include <numeric>

#include "aepl/errors.hpp"

namespace aepl {

double LossWeights::ds_weight_sum() const { return std::accumulate(ds_weights.begin(), ds_weights.end(), 0.0); }

void LossWeights::validate(std::size_t n_scales) const {
  if (ds_weights.size() != n_scales)
    throw ShapeMismatchError("expected " + std::to_string(n_scales) + " deep-supervision weights, got " +
                             std::to_string(ds_weights.size()));
  for (double w : ds_weights)
    if (!(w > 0.0)) throw ConfigError("deep-supervision weights must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(dice_smooth > 0.0)) throw ConfigError("dice smooth term must be positive");
}

namespace {

void require_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeMismatchError(std::string(what) + ": prediction/target shapes differ");
}

std::vector<std::int64_t> non_channel_dims(const torch::Tensor& t) {
  const std::int64_t channel_axis = t.dim() == 5 ? 1 : 0;
  std::vector<std::int64_t> dims;
  for (std::int64_t d = 0; d < t.dim(); ++d)
    if (d != channel_axis) dims.push_back(d);
  return dims;
}

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& targets, double smooth) {
  require_same(probs, targets, "dice_loss");
  if (probs.dim() != 4 && probs.dim() != 5) throw ShapeMismatchError("dice_loss: expected [C,...] or [B,C,...]");
  const auto dims = non_channel_dims(probs);
  auto intersection = (probs * targets).sum(dims);
  auto denom = probs.sum(dims) + targets.sum(dims);
  auto dice = (2.0 * intersection + smooth) / (denom + smooth);
  return 1.0 - dice.mean();
}

torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& targets) {
  require_same(probs, targets, "bce_loss");
  auto p = probs.clamp(kBceEpsilon, 1.0 - kBceEpsilon);
  return -(targets * torch::log(p) + (1.0 - targets) * torch::log(1.0 - p)).mean();
}

torch::Tensor region_targets(const torch::Tensor& labels) {
  auto l = labels.to(torch::kUInt8);
  auto et = l.eq(4);
  auto wt = l.eq(1) | l.eq(2) | l.eq(4);
  auto tc = l.eq(1) | l.eq(4);
  const std::int64_t axis = labels.dim() == 4 ? 1 : 0;
  return torch::stack({et, wt, tc}, axis).to(torch::kFloat);
}

torch::Tensor downsample_targets(const torch::Tensor& targets, int scale) {
  if (scale == 0) return targets;
  const std::int64_t step = std::int64_t{1} << scale;
  using torch::indexing::Slice;
  using torch::indexing::None;
  return targets.index({"...", Slice(None, None, step), Slice(None, None, step), Slice(None, None, step)})
      .contiguous();
}

torch::Tensor seg_loss(const SegOutput& outputs, const torch::Tensor& targets, const LossWeights& weights) {
  weights.validate(outputs.logits_per_scale.size());
  torch::Tensor acc;
  for (std::size_t s = 0; s < outputs.logits_per_scale.size(); ++s) {
    const auto& logits = outputs.logits_per_scale[s];
    auto t = downsample_targets(targets, static_cast<int>(s));
    require_same(logits, t, "seg_loss");
    auto probs = torch::sigmoid(logits);
    auto term = weights.ds_weights[s] * (dice_loss(probs, t, weights.dice_smooth) + bce_loss(probs, t));
    acc = acc.defined() ? acc + term : term;
  }
  return acc / weights.ds_weight_sum();
}

torch::Tensor cls_loss(const torch::Tensor& logits, const torch::Tensor& grades) {
  if (logits.dim() != 2 || logits.size(1) != 2) throw ShapeMismatchError("cls_loss: expected [B, 2] logits");
  return torch::nn::functional::cross_entropy(logits, grades.to(torch::kLong));
}

}  // namespace aepl
