#pragma once

#include <array>
#include <map>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/prompt.hpp"
#include "unlearn/sae.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

struct ClampNeg {
  double c = 0.0;
};
struct ZeroAblate {};
struct ScaleNeg {
  double k = 0.0;
};
// Clamp to -m times the feature's maximum activation. Only the selected
// features' maxima are kept, keyed by feature id.
struct ClampMaxMultiple {
  double m = 0.0;
  std::map<int, float> max_activation;
};
// Gate on the original feature, write along the substitute's decoder row.
struct RandomDecoder {
  std::map<int, int> substitute;
  double c = 0.0;
};

using InterventionMode = std::variant<ClampNeg, ZeroAblate, ScaleNeg, ClampMaxMultiple, RandomDecoder>;

struct InterventionSpec {
  int layer = 0;
  std::vector<int> features;  // ordered, no duplicates
  InterventionMode mode = ZeroAblate{};

  void validate(int n_features) const;
};

void to_json(nlohmann::json& j, const InterventionSpec& s);
void from_json(const nlohmann::json& j, InterventionSpec& s);

// ClampMaxMultiple with maxima taken from feature statistics.
ClampMaxMultiple clamp_max_multiple(double m, const std::vector<int>& features, const FeatureStats& stats);

// Random-decoder control: each feature maps to a distinct feature outside the
// selected set, drawn with `seed`.
RandomDecoder random_decoder(double c, const std::vector<int>& features, int n_features, std::uint64_t seed);

// Replacement activation for a firing feature (f_i > 0).
float target_value(const InterventionMode& mode, float f_i, int feature);

// x' = x + sum over selected i with f_i > 0 of (v_i - f_i) d_target(i).
// Row 0 (<bos>) and rows where nothing fires are returned unchanged.
Hook<float> build_hook(const SaeParams& sae, const InterventionSpec& spec);

std::array<double, 4> intervened_answer_probs(const ModelParams& model, const SaeParams& sae,
                                              const InterventionSpec& spec, const RenderedPrompt& prompt);

// Softmax over the four letter logits at the answer position.
std::array<double, 4> letter_logits(const MatrixF& logits, const RenderedPrompt& prompt);
std::array<double, 4> letter_softmax(const std::array<double, 4>& logits);

}  // namespace unlearn
