#include "aepl/inference.hpp"

#include <cmath>

#include "aepl/data.hpp"
#include "aepl/errors.hpp"

namespace aepl {

using torch::indexing::Slice;

WindowPlan plan_windows(const Shape3& volume_shape, const Shape3& patch_size, double overlap) {
  if (overlap < 0.0 || overlap >= 1.0) throw ConfigError("window overlap must lie in [0, 1)");
  WindowPlan plan;
  plan.volume_shape = volume_shape;
  plan.patch_size = patch_size;
  std::array<std::vector<std::int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) {
    const auto need = std::max<std::int64_t>(0, patch_size[a] - volume_shape[a]);
    plan.pad_offset[a] = need / 2;
    plan.padded_shape[a] = volume_shape[a] + need;
    const auto n = plan.padded_shape[a];
    const auto p = patch_size[a];
    const auto step = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(static_cast<double>(p) * (1.0 - overlap))));
    const auto count = n == p ? 1 : (n - p + step - 1) / step + 1;
    for (std::int64_t s = 0; s < count; ++s) {
      // Evenly spread starts so the first and last windows touch the borders.
      const auto start = count == 1 ? 0 : static_cast<std::int64_t>(std::llround(static_cast<double>(s) * static_cast<double>(n - p) / static_cast<double>(count - 1)));
      starts[a].push_back(start);
    }
  }
  for (auto x : starts[0])
    for (auto y : starts[1])
      for (auto z : starts[2]) plan.origins.push_back({x, y, z});
  return plan;
}

namespace {

torch::Tensor padded_voxels(const torch::Tensor& voxels, const WindowPlan& plan) {
  auto image = voxels;
  auto dummy = torch::zeros({voxels.size(1), voxels.size(2), voxels.size(3)}, torch::kUInt8);
  pad_to_at_least(image, dummy, plan.patch_size);
  return image;
}

}  // namespace

CaseEncoding encode_case(const AeplNet& model, const torch::Tensor& voxels) {
  if (voxels.dim() != 4 || voxels.size(0) != 4) throw ShapeMismatchError("encode_case: expected [4, X, Y, Z]");
  torch::NoGradGuard no_grad;
  CaseEncoding enc;
  const auto& patch = model->config().patch_size;
  enc.plan = plan_windows({voxels.size(1), voxels.size(2), voxels.size(3)}, {patch[0], patch[1], patch[2]});
  const auto image = padded_voxels(voxels, enc.plan);
  torch::Tensor prob_sum = torch::zeros({2}, torch::kDouble);
  for (const auto& o : enc.plan.origins) {
    auto window = image.index({Slice(), Slice(o[0], o[0] + patch[0]), Slice(o[1], o[1] + patch[1]),
                               Slice(o[2], o[2] + patch[2])})
                      .unsqueeze(0)
                      .contiguous();
    auto out = model->encode(window);
    prob_sum += model->classify(out.bottleneck).probs[0].to(torch::kDouble);
    enc.windows.push_back(std::move(out));
  }
  auto mean = prob_sum / static_cast<double>(enc.windows.size());
  const double p_lgg = mean[0].item<double>(), p_hgg = mean[1].item<double>();
  enc.predicted = GradePrompt::from_probs({p_lgg / (p_lgg + p_hgg), p_hgg / (p_lgg + p_hgg)}, PromptSource::Predicted);
  return enc;
}

torch::Tensor decode_case(const AeplNet& model, const CaseEncoding& encoding, const GradePrompt& prompt) {
  torch::NoGradGuard no_grad;
  const auto& plan = encoding.plan;
  const auto& patch = plan.patch_size;
  const auto params = model->encode_prompt(AeplNet::Impl::prompt_tensor({prompt}));
  auto acc = torch::zeros({3, plan.padded_shape[0], plan.padded_shape[1], plan.padded_shape[2]}, torch::kFloat);
  auto hits = torch::zeros({1, plan.padded_shape[0], plan.padded_shape[1], plan.padded_shape[2]}, torch::kFloat);
  for (std::size_t w = 0; w < plan.origins.size(); ++w) {
    const auto& o = plan.origins[w];
    const auto& e = encoding.windows[w];
    auto logits = model->decode(e.bottleneck, e.skips, &params).logits_per_scale.front()[0];
    const auto sx = Slice(o[0], o[0] + patch[0]);
    const auto sy = Slice(o[1], o[1] + patch[1]);
    const auto sz = Slice(o[2], o[2] + patch[2]);
    acc.index({Slice(), sx, sy, sz}) += torch::sigmoid(logits);
    hits.index({Slice(), sx, sy, sz}) += 1.0f;
  }
  auto probs = acc / hits;
  const auto& off = plan.pad_offset;
  const auto& vs = plan.volume_shape;
  return probs
      .index({Slice(), Slice(off[0], off[0] + vs[0]), Slice(off[1], off[1] + vs[1]), Slice(off[2], off[2] + vs[2])})
      .contiguous();
}

GradePrompt inference_prompt(const GradePrompt& predicted) {
  return GradePrompt::one_hot(predicted.hard_label, PromptSource::Predicted);
}

RegionMasks threshold_regions(const torch::Tensor& probs, double threshold) {
  if (probs.dim() != 4 || probs.size(0) != 3) throw ShapeMismatchError("threshold_regions: expected [3, X, Y, Z]");
  auto bin = probs.gt(threshold);
  return {mask_of(bin[0]), mask_of(bin[1]), mask_of(bin[2])};
}

CaseInference infer_case(const AeplNet& model, const torch::Tensor& voxels,
                         const std::optional<GradePrompt>& prompt_override) {
  CaseInference out;
  const auto enc = encode_case(model, voxels);
  out.predicted = enc.predicted;
  out.used = prompt_override ? *prompt_override : inference_prompt(enc.predicted);
  out.probs = decode_case(model, enc, out.used);
  out.regions = threshold_regions(out.probs);
  return out;
}

}  // namespace aepl
