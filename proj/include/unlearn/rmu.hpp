#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

// `layer` indexes the residual stream like hooks do: h_l is the input of block l.
// The default trainable set is the MLP weights of the (up to three) blocks
// writing into h_l: blocks l-3, l-2 and l-1.
struct RmuConfig {
  int layer = 3;
  double steering_coefficient = 2.0;  // in units of the RMS activation norm at `layer`
  double alpha = 100.0;
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  int steps = 200;
  int batch_size = 8;
  std::vector<int> trainable_blocks;  // empty: default

  void validate(const ModelConfig& model) const;
  std::vector<int> blocks(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const RmuConfig& c);
void from_json(const nlohmann::json& j, RmuConfig& c);

std::set<std::string> rmu_trainable_names(const ModelConfig& model, const RmuConfig& cfg);

// Unit vector with entries drawn uniform in [0, 1) from `seed`, then normalized.
VectorF rmu_direction(int d_model, std::uint64_t seed);

// sqrt(mean over tokens of |h|^2) at `layer`, position 0 excluded.
double activation_rms(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer);

struct RmuLoss {
  double forget = 0.0;  // mean |h - c u|^2
  double retain = 0.0;  // mean |h - h_frozen|^2
  double total = 0.0;   // forget + alpha * retain
};

// Loss on fixed corpora; `target` is c_eff * u.
RmuLoss rmu_loss(const ModelParams& params, const ModelParams& frozen, const std::vector<TokenSeq>& forget,
                 const std::vector<TokenSeq>& retain, int layer, const VectorF& target, double alpha);

struct RmuResult {
  ModelParams params;
  VectorF target;          // c_eff * u
  double rms = 0.0;
  RmuLoss final_loss;      // on the full corpora, with the returned params
  nlohmann::json log;      // per-step losses
};

RmuResult rmu_finetune(const ModelParams& model, const std::vector<TokenSeq>& forget_corpus,
                       const std::vector<TokenSeq>& retain_corpus, const RmuConfig& cfg);

}  // namespace unlearn
