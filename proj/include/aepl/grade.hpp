#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace aepl {

enum class Grade : int { LGG = 0, HGG = 1 };

enum class PromptSource { Predicted, Edited, GroundTruth };

std::string_view to_string(Grade g);
std::string_view to_string(PromptSource s);
std::optional<Grade> parse_grade(std::string_view text);
std::optional<PromptSource> parse_prompt_source(std::string_view text);

inline Grade flipped(Grade g) { return g == Grade::LGG ? Grade::HGG : Grade::LGG; }
inline int index_of(Grade g) { return static_cast<int>(g); }

/// Tumor-grade prompt fed to the prompt encoder.
///
/// `probs` is (p_LGG, p_HGG). Predicted prompts carry the classifier's
/// distribution; edited and ground-truth prompts are one-hot.
struct GradePrompt {
  std::array<double, 2> probs{0.5, 0.5};
  Grade hard_label = Grade::LGG;
  PromptSource source = PromptSource::Predicted;

  static GradePrompt one_hot(Grade g, PromptSource source);
  static GradePrompt from_probs(std::array<double, 2> probs, PromptSource source);

  // Throws ConfigError when the simplex or argmax invariant is broken.
  void validate() const;

  bool operator==(const GradePrompt&) const = default;
};

}  // namespace aepl
