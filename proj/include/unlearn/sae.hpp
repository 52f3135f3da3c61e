#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/common.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

// f = ReLU((x - b_dec) W_enc + b_enc),  x_hat = f W_dec + b_dec.
// Rows of W_dec are the feature decoder directions and have unit norm.
struct SaeParams {
  MatrixF W_enc;     // d_model x F
  RowVectorF b_enc;  // F
  MatrixF W_dec;     // F x d_model
  RowVectorF b_dec;  // d_model
  int layer = 0;

  int d_model() const { return static_cast<int>(W_dec.cols()); }
  int n_features() const { return static_cast<int>(W_dec.rows()); }
  void validate() const;
  bool operator==(const SaeParams&) const = default;
};

// x: T x d_model (a single vector is a 1 x d_model matrix).
MatrixF encode(const SaeParams& sae, const MatrixF& x);
MatrixF decode(const SaeParams& sae, const MatrixF& f);

struct SaeTrainConfig {
  int n_features = 512;
  double l1_coefficient = 1e-3;
  double learning_rate = 1e-3;
  int steps = 3000;
  int batch_size = 256;
  std::uint64_t seed = 1;
  int log_every = 500;
};

void to_json(nlohmann::json& j, const SaeTrainConfig& c);
void from_json(const nlohmann::json& j, SaeTrainConfig& c);

struct SaeTrainResult {
  SaeParams sae;
  double final_mse = 0.0;  // mean squared reconstruction error per token
  double final_l0 = 0.0;   // mean active features per token
  std::vector<std::pair<int, double>> loss_curve;
};

// Residual activations at `layer`, one row per token. Position 0 (<bos>) is skipped.
MatrixF collect_activations(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer);

SaeTrainResult train_sae_on_activations(const MatrixF& activations, int layer, const SaeTrainConfig& config);
SaeTrainResult train_sae(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer,
                         const SaeTrainConfig& config);

// Mean squared error and L0 of an SAE over an activation set.
std::pair<double, double> reconstruction_metrics(const SaeParams& sae, const MatrixF& activations);

struct FeatureStats {
  std::vector<double> sparsity_forget;  // fraction of tokens with f_i > 0
  std::vector<double> sparsity_retain;
  std::vector<float> max_activation;    // over the reference corpus
  std::size_t tokens_forget = 0;
  std::size_t tokens_retain = 0;
  std::size_t tokens_reference = 0;

  int n_features() const { return static_cast<int>(sparsity_forget.size()); }
  void validate() const;
};

void to_json(nlohmann::json& j, const FeatureStats& s);
void from_json(const nlohmann::json& j, FeatureStats& s);

FeatureStats feature_stats(const ModelParams& model, const SaeParams& sae, const std::vector<TokenSeq>& forget_corpus,
                           const std::vector<TokenSeq>& retain_corpus, const std::vector<TokenSeq>& reference_corpus);

struct ActivatingExample {
  std::size_t sequence = 0;  // index into the corpus
  int position = 0;          // token position within that sequence
  float activation = 0.0f;
  int window_start = 0;      // context = sequence[window_start, window_start + context.size())
  TokenSeq context;
};

std::vector<ActivatingExample> max_activating_examples(const ModelParams& model, const SaeParams& sae,
                                                       const std::vector<TokenSeq>& corpus, int feature, int k,
                                                       int window);

// Replaces the residual stream at every non-<bos> position with its reconstruction.
Hook<float> reconstruction_hook(const SaeParams& sae);

double sae_loss_added(const ModelParams& model, const SaeParams& sae, const std::vector<TokenSeq>& corpus);

void save_sae(const SaeParams& sae, const std::filesystem::path& path, const nlohmann::json& meta = {});
SaeParams load_sae(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace unlearn
