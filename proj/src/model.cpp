#include "aepl/model.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "aepl/errors.hpp"

namespace aepl {

namespace F = torch::nn::functional;

std::vector<int> ModelConfig::default_widths(int n_stages, int base, int max_width) {
  std::vector<int> w;
  for (int l = 0; l < n_stages; ++l) w.push_back(std::min(base << l, max_width));
  return w;
}

ModelConfig ModelConfig::desk_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig cfg;
  cfg.base_channels = 32;
  cfg.channel_widths = default_widths(5, 32);
  cfg.patch_size = {96, 160, 160};
  return cfg;
}

void ModelConfig::validate() const {
  if (n_stages < 2) throw ConfigError("n_stages must be at least 2");
  if (static_cast<int>(channel_widths.size()) != n_stages)
    throw ConfigError("channel_widths needs one entry per stage (" + std::to_string(n_stages) + ")");
  for (std::size_t l = 1; l < channel_widths.size(); ++l)
    if (channel_widths[l] <= channel_widths[l - 1]) throw ConfigError("channel_widths must increase with depth");
  if (channel_widths.front() <= 0) throw ConfigError("channel widths must be positive");
  const std::int64_t factor = std::int64_t{1} << (n_stages - 1);
  for (auto d : patch_size)
    if (d <= 0 || d % factor != 0)
      throw ShapeMismatchError("patch dims must be divisible by " + std::to_string(factor));
  if (conv_blocks_per_stage < 1) throw ConfigError("conv_blocks_per_stage must be positive");
  if (deep_supervision_scales < 1 || deep_supervision_scales > n_stages)
    throw ConfigError("deep_supervision_scales must lie in [1, n_stages]");
  if (in_channels != 4) throw ConfigError("input must have exactly 4 modalities");
  if (n_classes_grade != 2) throw ConfigError("grade classifier is binary (LGG/HGG)");
}

std::vector<int> ModelConfig::decoder_widths() const {
  return {channel_widths.rbegin(), channel_widths.rend()};
}

std::int64_t ModelConfig::prompt_param_count() const {
  return 2 * std::accumulate(channel_widths.begin(), channel_widths.end(), std::int64_t{0});
}

PromptParams PromptParams::identity(const ModelConfig& cfg, std::int64_t batch) {
  PromptParams p;
  for (int c : cfg.decoder_widths()) {
    std::vector<std::int64_t> shape = batch > 0 ? std::vector<std::int64_t>{batch, c} : std::vector<std::int64_t>{c};
    p.stages.push_back({torch::ones(shape), torch::zeros(shape)});
  }
  return p;
}

ConvBlockImpl::ConvBlockImpl(int in_channels, int out_channels, int stride) {
  conv_ = register_module(
      "conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_channels, out_channels, 3).stride(stride).padding(1)));
  norm_ = register_module("norm", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out_channels).affine(true)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  return F::leaky_relu(norm_->forward(conv_->forward(x)), F::LeakyReLUFuncOptions().negative_slope(0.01));
}

MlpImpl::MlpImpl(int in_features, std::array<int, 2> hidden, int out_features, bool zero_init_output) {
  fc1_ = register_module("fc1", torch::nn::Linear(in_features, hidden[0]));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden[0], hidden[1]));
  fc3_ = register_module("fc3", torch::nn::Linear(hidden[1], out_features));
  if (zero_init_output) {
    torch::NoGradGuard no_grad;
    fc3_->weight.zero_();
    fc3_->bias.zero_();
  }
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  const auto act = F::LeakyReLUFuncOptions().negative_slope(0.01);
  auto h = F::leaky_relu(fc1_->forward(x), act);
  h = F::leaky_relu(fc2_->forward(h), act);
  return fc3_->forward(h);
}

torch::Tensor modulate(const torch::Tensor& features, const torch::Tensor& scale, const torch::Tensor& shift) {
  if (features.dim() < 2) throw ShapeMismatchError("modulate: features need a channel axis");
  const auto channels = features.size(1);
  if (scale.size(-1) != channels || shift.size(-1) != channels) {
    throw ShapeMismatchError("modulate: expected " + std::to_string(channels) + " channels, got scale " +
                             std::to_string(scale.size(-1)) + " and shift " + std::to_string(shift.size(-1)));
  }
  std::vector<std::int64_t> view(static_cast<std::size_t>(features.dim()), 1);
  view[1] = channels;
  if (scale.dim() == 2) view[0] = scale.size(0);
  auto w = scale.reshape(view);
  view[0] = shift.dim() == 2 ? shift.size(0) : 1;
  auto b = shift.reshape(view);
  return features * w + b;
}

AeplNetImpl::AeplNetImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& w = cfg_.channel_widths;
  const int n = cfg_.n_stages;

  encoder_ = register_module("encoder", torch::nn::ModuleList());
  for (int l = 0; l < n; ++l) {
    torch::nn::Sequential level;
    const int in = l == 0 ? cfg_.in_channels : w[l - 1];
    level->push_back(ConvBlock(in, w[l], l == 0 ? 1 : 2));
    for (int b = 1; b < cfg_.conv_blocks_per_stage; ++b) level->push_back(ConvBlock(w[l], w[l]));
    encoder_->push_back(level);
  }

  // Decoder stage 0 runs at bottleneck resolution; stages 1.. upsample, fuse the
  // matching skip, and refine.
  bottleneck_blocks_ = register_module("bottleneck", torch::nn::ModuleList());
  {
    torch::nn::Sequential stage;
    for (int b = 0; b < cfg_.conv_blocks_per_stage; ++b) stage->push_back(ConvBlock(w[n - 1], w[n - 1]));
    bottleneck_blocks_->push_back(stage);
  }
  upsamplers_ = register_module("upsamplers", torch::nn::ModuleList());
  decoder_ = register_module("decoder", torch::nn::ModuleList());
  for (int l = n - 2; l >= 0; --l) {
    upsamplers_->push_back(
        torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(w[l + 1], w[l], 2).stride(2).bias(false)));
    torch::nn::Sequential stage;
    stage->push_back(ConvBlock(2 * w[l], w[l]));
    for (int b = 1; b < cfg_.conv_blocks_per_stage; ++b) stage->push_back(ConvBlock(w[l], w[l]));
    decoder_->push_back(stage);
  }
  heads_ = register_module("heads", torch::nn::ModuleList());
  for (int s = 0; s < n; ++s) {
    const int width = cfg_.decoder_widths()[s];
    heads_->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(width, cfg_.n_classes_seg, 1)));
  }

  classifier_ = register_module("classifier", Mlp(w.back(), cfg_.mlp_hidden, cfg_.n_classes_grade, false));
  prompt_encoder_ = register_module(
      "prompt_encoder",
      Mlp(cfg_.n_classes_grade, cfg_.mlp_hidden, static_cast<int>(cfg_.prompt_param_count()), true));
}

EncoderOutput AeplNetImpl::encode(const torch::Tensor& volume) const {
  if (volume.dim() != 5 || volume.size(1) != cfg_.in_channels)
    throw ShapeMismatchError("encode: expected [B, 4, X, Y, Z] input");
  for (int a = 0; a < 3; ++a) {
    if (volume.size(a + 2) != cfg_.patch_size[a]) {
      throw ShapeMismatchError("encode: patch spatial shape must equal the configured patch (" +
                               std::to_string(cfg_.patch_size[0]) + "," + std::to_string(cfg_.patch_size[1]) +
                               "," + std::to_string(cfg_.patch_size[2]) + ")");
    }
  }
  EncoderOutput out;
  auto x = volume;
  for (std::size_t l = 0; l < encoder_->size(); ++l) {
    x = encoder_[l]->as<torch::nn::Sequential>()->forward(x);
    if (l + 1 < encoder_->size()) out.skips.push_back(x);
  }
  out.bottleneck = x;
  return out;
}

GradeHead AeplNetImpl::classify(const torch::Tensor& bottleneck) const {
  auto pooled = bottleneck.mean({2, 3, 4});
  auto logits = classifier_->forward(pooled);
  return {logits, torch::softmax(logits, 1)};
}

PromptParams AeplNetImpl::encode_prompt(const torch::Tensor& prompt) const {
  if (prompt.dim() != 2 || prompt.size(1) != cfg_.n_classes_grade)
    throw ShapeMismatchError("encode_prompt: expected a [B, 2] prompt");
  auto flat = prompt_encoder_->forward(prompt);
  if (flat.size(1) != cfg_.prompt_param_count())
    throw ConfigError("encode_prompt: prompt encoder output does not match decoder widths");
  PromptParams params;
  std::int64_t offset = 0;
  for (int c : cfg_.decoder_widths()) {
    auto delta = flat.narrow(1, offset, c);
    auto shift = flat.narrow(1, offset + c, c);
    params.stages.push_back({1.0 + delta, shift});
    offset += 2 * c;
  }
  return params;
}

SegOutput AeplNetImpl::decode(const torch::Tensor& bottleneck, const std::vector<torch::Tensor>& skips,
                              const PromptParams* params) const {
  const int n = cfg_.n_stages;
  if (params && static_cast<int>(params->stages.size()) != n)
    throw ShapeMismatchError("decode: expected " + std::to_string(n) + " modulation stages");
  if (static_cast<int>(skips.size()) != n - 1) throw ShapeMismatchError("decode: wrong number of skip tensors");

  std::vector<torch::Tensor> coarse_first;
  auto x = bottleneck_blocks_[0]->as<torch::nn::Sequential>()->forward(bottleneck);
  for (int s = 0; s < n; ++s) {
    if (s > 0) {
      const auto& skip = skips[static_cast<std::size_t>(n - 1 - s)];
      x = upsamplers_[s - 1]->as<torch::nn::ConvTranspose3d>()->forward(x);
      if (x.sizes() != skip.sizes()) throw ShapeMismatchError("decode: upsampled features do not match skip");
      x = decoder_[s - 1]->as<torch::nn::Sequential>()->forward(torch::cat({x, skip}, 1));
    }
    if (params) x = modulate(x, params->stages[s].scale, params->stages[s].shift);
    if (s >= n - cfg_.deep_supervision_scales) coarse_first.push_back(heads_[s]->as<torch::nn::Conv3d>()->forward(x));
  }
  SegOutput out;
  out.logits_per_scale.assign(coarse_first.rbegin(), coarse_first.rend());
  return out;
}

torch::Tensor AeplNetImpl::prompt_tensor(const std::vector<GradePrompt>& prompts) {
  auto t = torch::empty({static_cast<std::int64_t>(prompts.size()), 2});
  auto acc = t.accessor<float, 2>();
  for (std::size_t b = 0; b < prompts.size(); ++b) {
    prompts[b].validate();
    acc[b][0] = static_cast<float>(prompts[b].probs[0]);
    acc[b][1] = static_cast<float>(prompts[b].probs[1]);
  }
  return t;
}

std::vector<GradePrompt> prompts_from_probs(const torch::Tensor& probs, PromptSource source) {
  auto p = probs.detach().to(torch::kDouble).contiguous();
  auto acc = p.accessor<double, 2>();
  std::vector<GradePrompt> out;
  for (std::int64_t b = 0; b < p.size(0); ++b) {
    // Renormalize in double so float32 rounding cannot break the simplex check.
    const double sum = acc[b][0] + acc[b][1];
    out.push_back(GradePrompt::from_probs({acc[b][0] / sum, acc[b][1] / sum}, source));
  }
  return out;
}

ForwardResult AeplNetImpl::forward(const torch::Tensor& volume,
                                   const std::optional<std::vector<GradePrompt>>& prompt_override) const {
  ForwardResult out;
  const auto enc = encode(volume);
  out.grade = classify(enc.bottleneck);
  if (prompt_override) {
    if (static_cast<std::int64_t>(prompt_override->size()) != volume.size(0))
      throw ShapeMismatchError("forward: need one prompt override per batch item");
    out.prompts = *prompt_override;
    out.prompt = prompt_tensor(out.prompts).to(volume.device());
  } else if (is_training()) {
    out.prompt = out.grade.probs;
    // A diverged classifier must surface as a non-finite loss, not a prompt error.
    if (torch::isfinite(out.grade.probs).all().item<bool>())
      out.prompts = prompts_from_probs(out.grade.probs, PromptSource::Predicted);
  } else {
    auto idx = out.grade.probs.argmax(1);
    out.prompt = F::one_hot(idx, cfg_.n_classes_grade).to(volume.scalar_type());
    for (std::int64_t b = 0; b < idx.size(0); ++b) {
      auto p = GradePrompt::one_hot(static_cast<Grade>(idx[b].item<std::int64_t>()), PromptSource::Predicted);
      out.prompts.push_back(p);
    }
  }
  const auto params = encode_prompt(out.prompt);
  out.seg = decode(enc.bottleneck, enc.skips, &params);
  return out;
}

}  // namespace aepl
