#include "unlearn/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <set>
#include <string>

namespace unlearn {
namespace {

void check_constant(double v, const char* name) {
  if (!std::isfinite(v) || v < 0.0) {
    throw ValidationError(std::string("intervention constant ") + name + " must be finite and >= 0");
  }
}

// Decoder row written for feature i.
int target_row(const InterventionMode& mode, int feature) {
  if (const auto* rd = std::get_if<RandomDecoder>(&mode)) return rd->substitute.at(feature);
  return feature;
}

}  // namespace

void InterventionSpec::validate(int n_features) const {
  if (layer < 0) throw ValidationError("intervention layer must be >= 0");
  std::set<int> seen;
  for (int f : features) {
    if (f < 0 || f >= n_features) {
      throw ValidationError("intervention feature id " + std::to_string(f) + " outside [0, " +
                            std::to_string(n_features) + ")");
    }
    if (!seen.insert(f).second) throw ValidationError("duplicate feature id " + std::to_string(f));
  }
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ClampNeg>) {
          check_constant(m.c, "c");
        } else if constexpr (std::is_same_v<M, ScaleNeg>) {
          check_constant(m.k, "k");
        } else if constexpr (std::is_same_v<M, ClampMaxMultiple>) {
          check_constant(m.m, "m");
          for (int f : features) {
            auto it = m.max_activation.find(f);
            if (it == m.max_activation.end()) {
              throw ValidationError("clamp_max_multiple: no max activation for feature " + std::to_string(f));
            }
            if (!std::isfinite(it->second) || it->second < 0.0f) {
              throw ValidationError("clamp_max_multiple: invalid max activation for feature " + std::to_string(f));
            }
          }
        } else if constexpr (std::is_same_v<M, RandomDecoder>) {
          check_constant(m.c, "c");
          for (int f : features) {
            auto it = m.substitute.find(f);
            if (it == m.substitute.end()) {
              throw ValidationError("random_decoder: substitute map missing feature " + std::to_string(f));
            }
            if (it->second < 0 || it->second >= n_features) {
              throw ValidationError("random_decoder: substitute id " + std::to_string(it->second) + " out of range");
            }
          }
        }
      },
      mode);
}

void to_json(nlohmann::json& j, const InterventionSpec& s) {
  nlohmann::json mode;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ClampNeg>) {
          mode = {{"kind", "clamp_neg"}, {"c", m.c}};
        } else if constexpr (std::is_same_v<M, ZeroAblate>) {
          mode = {{"kind", "zero_ablate"}};
        } else if constexpr (std::is_same_v<M, ScaleNeg>) {
          mode = {{"kind", "scale_neg"}, {"k", m.k}};
        } else if constexpr (std::is_same_v<M, ClampMaxMultiple>) {
          nlohmann::json maxima = nlohmann::json::object();
          for (const auto& [f, v] : m.max_activation) maxima[std::to_string(f)] = v;
          mode = {{"kind", "clamp_max_multiple"}, {"m", m.m}, {"max_activation", maxima}};
        } else {
          mode = {{"kind", "random_decoder"}, {"c", m.c}};
        }
      },
      s.mode);
  j = {{"layer", s.layer}, {"mode", mode}, {"features", s.features}};
  if (const auto* rd = std::get_if<RandomDecoder>(&s.mode)) {
    nlohmann::json sub = nlohmann::json::object();
    for (const auto& [from, to] : rd->substitute) sub[std::to_string(from)] = to;
    j["substitute"] = sub;
  }
}

void from_json(const nlohmann::json& j, InterventionSpec& s) {
  try {
    s.layer = j.at("layer").get<int>();
    s.features = j.at("features").get<std::vector<int>>();
    const auto& mode = j.at("mode");
    const auto kind = mode.at("kind").get<std::string>();
    if (kind == "clamp_neg") {
      s.mode = ClampNeg{mode.at("c").get<double>()};
    } else if (kind == "zero_ablate") {
      s.mode = ZeroAblate{};
    } else if (kind == "scale_neg") {
      s.mode = ScaleNeg{mode.at("k").get<double>()};
    } else if (kind == "clamp_max_multiple") {
      ClampMaxMultiple m{mode.at("m").get<double>(), {}};
      for (const auto& [key, v] : mode.at("max_activation").items()) m.max_activation[std::stoi(key)] = v.get<float>();
      s.mode = m;
    } else if (kind == "random_decoder") {
      RandomDecoder m{{}, mode.at("c").get<double>()};
      for (const auto& [key, v] : j.at("substitute").items()) m.substitute[std::stoi(key)] = v.get<int>();
      s.mode = m;
    } else {
      throw ValidationError("unknown intervention mode '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("intervention spec: ") + e.what());
  }
}

ClampMaxMultiple clamp_max_multiple(double m, const std::vector<int>& features, const FeatureStats& stats) {
  ClampMaxMultiple out{m, {}};
  for (int f : features) {
    if (f < 0 || f >= stats.n_features()) throw ValidationError("feature id outside feature stats");
    out.max_activation[f] = stats.max_activation[static_cast<std::size_t>(f)];
  }
  return out;
}

RandomDecoder random_decoder(double c, const std::vector<int>& features, int n_features, std::uint64_t seed) {
  const std::set<int> selected(features.begin(), features.end());
  for (int f : features) {
    if (f < 0 || f >= n_features) throw ValidationError("random_decoder: feature " + std::to_string(f) + " out of range");
  }
  std::vector<int> pool;
  for (int i = 0; i < n_features; ++i) {
    if (!selected.count(i)) pool.push_back(i);
  }
  if (pool.size() < features.size()) {
    throw ValidationError("random_decoder: not enough unselected features to substitute");
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < features.size(); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  RandomDecoder out{{}, c};
  for (std::size_t i = 0; i < features.size(); ++i) out.substitute[features[i]] = pool[i];
  return out;
}

float target_value(const InterventionMode& mode, float f_i, int feature) {
  return std::visit(
      [&](const auto& m) -> float {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ClampNeg>) {
          return -static_cast<float>(m.c);
        } else if constexpr (std::is_same_v<M, ZeroAblate>) {
          return 0.0f;
        } else if constexpr (std::is_same_v<M, ScaleNeg>) {
          return -(static_cast<float>(m.k) * f_i);
        } else if constexpr (std::is_same_v<M, ClampMaxMultiple>) {
          return -(static_cast<float>(m.m) * m.max_activation.at(feature));
        } else {
          return -static_cast<float>(m.c);
        }
      },
      mode);
}

Hook<float> build_hook(const SaeParams& sae, const InterventionSpec& spec) {
  if (sae.layer != spec.layer) {
    throw ValidationError("intervention layer " + std::to_string(spec.layer) + " does not match SAE layer " +
                          std::to_string(sae.layer));
  }
  spec.validate(sae.n_features());
  if (spec.features.empty()) {
    return Hook<float>{spec.layer, [](const MatrixF& x) { return x; }};
  }
  auto shared_sae = std::make_shared<const SaeParams>(sae);
  auto shared_spec = std::make_shared<const InterventionSpec>(spec);
  return Hook<float>{spec.layer, [shared_sae, shared_spec](const MatrixF& x) {
                       const auto& s = *shared_sae;
                       const auto& sp = *shared_spec;
                       const MatrixF f = encode(s, x);
                       MatrixF out = x;
                       RowVectorF delta(x.cols());
                       for (Eigen::Index t = 1; t < x.rows(); ++t) {
                         bool fired = false;
                         delta.setZero();
                         for (int i : sp.features) {
                           const float fi = f(t, i);
                           if (!(fi > 0.0f)) continue;
                           const float v = target_value(sp.mode, fi, i);
                           delta += (v - fi) * s.W_dec.row(target_row(sp.mode, i));
                           fired = true;
                         }
                         if (fired) out.row(t) += delta;
                       }
                       return out;
                     }};
}

std::array<double, 4> letter_logits(const MatrixF& logits, const RenderedPrompt& prompt) {
  std::array<double, 4> out{};
  for (int k = 0; k < 4; ++k) out[static_cast<std::size_t>(k)] = logits(prompt.answer_position, prompt.letter_ids[static_cast<std::size_t>(k)]);
  return out;
}

std::array<double, 4> letter_softmax(const std::array<double, 4>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::array<double, 4> p{};
  double z = 0.0;
  for (std::size_t k = 0; k < 4; ++k) z += (p[k] = std::exp(logits[k] - mx));
  for (auto& v : p) v /= z;
  return p;
}

std::array<double, 4> intervened_answer_probs(const ModelParams& model, const SaeParams& sae,
                                              const InterventionSpec& spec, const RenderedPrompt& prompt) {
  const Hook<float> hook = build_hook(sae, spec);
  const auto out = forward<float>(model, prompt.tokens, std::span<const Hook<float>>(&hook, 1));
  return letter_softmax(letter_logits(out.logits, prompt));
}

}  // namespace unlearn
