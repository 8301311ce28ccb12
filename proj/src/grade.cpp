#include "aepl/grade.hpp"

#include <cmath>

#include "aepl/errors.hpp"

namespace aepl {

std::string_view to_string(Grade g) { return g == Grade::LGG ? "LGG" : "HGG"; }

std::string_view to_string(PromptSource s) {
  switch (s) {
    case PromptSource::Predicted: return "predicted";
    case PromptSource::Edited: return "edited";
    case PromptSource::GroundTruth: return "ground_truth";
  }
  return "predicted";
}

std::optional<Grade> parse_grade(std::string_view text) {
  if (text == "LGG") return Grade::LGG;
  if (text == "HGG") return Grade::HGG;
  return std::nullopt;
}

std::optional<PromptSource> parse_prompt_source(std::string_view text) {
  if (text == "predicted") return PromptSource::Predicted;
  if (text == "edited") return PromptSource::Edited;
  if (text == "ground_truth") return PromptSource::GroundTruth;
  return std::nullopt;
}

GradePrompt GradePrompt::one_hot(Grade g, PromptSource source) {
  GradePrompt p;
  p.probs = g == Grade::LGG ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
  p.hard_label = g;
  p.source = source;
  return p;
}

GradePrompt GradePrompt::from_probs(std::array<double, 2> probs, PromptSource source) {
  GradePrompt p;
  p.probs = probs;
  // Ties resolve to LGG, matching argmax's first-index rule.
  p.hard_label = probs[1] > probs[0] ? Grade::HGG : Grade::LGG;
  p.source = source;
  p.validate();
  return p;
}

void GradePrompt::validate() const {
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw ConfigError("grade prompt probability outside [0,1]");
  }
  if (std::abs(probs[0] + probs[1] - 1.0) > 1e-6) throw ConfigError("grade prompt probabilities must sum to 1");
  if (source == PromptSource::Predicted) {
    const Grade argmax = probs[1] > probs[0] ? Grade::HGG : Grade::LGG;
    if (argmax != hard_label) throw ConfigError("predicted grade prompt: hard label is not the argmax");
  }
}

}  // namespace aepl
