#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <vector>

#include "aepl/grade.hpp"

namespace aepl {

/// Network hyper-parameters. `channel_widths[l]` is the encoder width at
/// resolution level l (level 0 = full resolution); decoder stages reuse the
/// widths in reverse order.
struct ModelConfig {
  int n_stages = 5;
  int base_channels = 8;
  std::vector<int> channel_widths{8, 16, 32, 64, 128};
  int conv_blocks_per_stage = 2;
  std::array<std::int64_t, 3> patch_size{32, 64, 64};
  int in_channels = 4;
  int n_classes_seg = 3;
  int n_classes_grade = 2;
  std::array<int, 2> mlp_hidden{64, 64};
  int deep_supervision_scales = 5;

  /// Widths base·2^l capped at `max_width`.
  static std::vector<int> default_widths(int n_stages, int base, int max_width = 320);
  static ModelConfig desk_scale();
  static ModelConfig full_scale();

  void validate() const;
  /// Decoder stage widths, coarsest stage first.
  std::vector<int> decoder_widths() const;
  /// Length of the prompt encoder's flat output: 2 · Σ widths.
  std::int64_t prompt_param_count() const;
};

/// One (ω, β) pair per decoder stage, coarsest stage first. Each tensor is
/// [C] or [B, C].
struct StageModulation {
  torch::Tensor scale;
  torch::Tensor shift;
};

struct PromptParams {
  std::vector<StageModulation> stages;

  /// ω = 1, β = 0 for every stage.
  static PromptParams identity(const ModelConfig& cfg, std::int64_t batch = 0);
};

/// Segmentation logits, full resolution first, each later scale halved per axis.
/// Channels are (ET, WT, TC).
struct SegOutput {
  std::vector<torch::Tensor> logits_per_scale;
};

struct EncoderOutput {
  torch::Tensor bottleneck;
  std::vector<torch::Tensor> skips;  // level 0 (finest) .. n_stages-2
};

struct GradeHead {
  torch::Tensor logits;  // [B, 2]
  torch::Tensor probs;   // [B, 2]
};

struct ForwardResult {
  SegOutput seg;
  GradeHead grade;
  torch::Tensor prompt;              // [B, 2] prompt vector fed to the prompt encoder
  std::vector<GradePrompt> prompts;  // per batch item, the prompt actually used
};

/// conv 3×3×3 → instance norm → leaky ReLU(0.01).
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int in_channels, int out_channels, int stride = 1);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv_{nullptr};
  torch::nn::InstanceNorm3d norm_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Three linear layers with leaky ReLU between them.
class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int in_features, std::array<int, 2> hidden, int out_features, bool zero_init_output);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear& output_layer() { return fc3_; }

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, fc3_{nullptr};
};
TORCH_MODULE(Mlp);

/// Channel-wise affine modulation out[b,c,...] = ω[c]·x[b,c,...] + β[c].
/// ω/β may be [C] (shared over the batch) or [B, C].
torch::Tensor modulate(const torch::Tensor& features, const torch::Tensor& scale, const torch::Tensor& shift);

/// Grade-prompted 3D U-Net.
///
/// The encoder feeds both a GAP + MLP grade classifier and the decoder. The
/// classifier output (or an override) is turned by the prompt encoder into one
/// (ω, β) pair per decoder stage; each stage's features are modulated after its
/// conv blocks and before its deep-supervision head. The prompt encoder's last
/// layer starts at zero and ω = 1 + δ, so a fresh network is a plain U-Net.
class AeplNetImpl : public torch::nn::Module {
 public:
  explicit AeplNetImpl(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// Input [B, 4, X, Y, Z] with spatial shape equal to the configured patch.
  EncoderOutput encode(const torch::Tensor& volume) const;
  GradeHead classify(const torch::Tensor& bottleneck) const;
  PromptParams encode_prompt(const torch::Tensor& prompt) const;
  /// `params == nullptr` runs the unconditioned decoder.
  SegOutput decode(const torch::Tensor& bottleneck, const std::vector<torch::Tensor>& skips,
                   const PromptParams* params) const;

  /// encode → classify → prompt → decode.
  ///
  /// Without an override the prompt is the softmax in training mode (so the
  /// loss reaches the classifier through the prompt path) and the one-hot
  /// argmax in eval mode. `prompt_override` holds one prompt per batch item.
  ForwardResult forward(const torch::Tensor& volume,
                        const std::optional<std::vector<GradePrompt>>& prompt_override = std::nullopt) const;

  /// Prompt tensor [B, 2] for the given prompts.
  static torch::Tensor prompt_tensor(const std::vector<GradePrompt>& prompts);

  Mlp& prompt_encoder() { return prompt_encoder_; }
  Mlp& classifier() { return classifier_; }

 private:
  ModelConfig cfg_;
  mutable torch::nn::ModuleList encoder_{nullptr};
  mutable torch::nn::ModuleList bottleneck_blocks_{nullptr};
  mutable torch::nn::ModuleList upsamplers_{nullptr};
  mutable torch::nn::ModuleList decoder_{nullptr};
  mutable torch::nn::ModuleList heads_{nullptr};
  mutable Mlp classifier_{nullptr};
  mutable Mlp prompt_encoder_{nullptr};
};
TORCH_MODULE(AeplNet);

/// GradePrompt per batch row of `probs` ([B,2]).
std::vector<GradePrompt> prompts_from_probs(const torch::Tensor& probs, PromptSource source);

}  // namespace aepl
