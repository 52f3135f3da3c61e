#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/common.hpp"
#include "unlearn/corpus.hpp"

namespace unlearn {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int context_length = 32;
  double ln_eps = 1e-5;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Per-block tensor slots, in storage order.
enum BlockSlot : int {
  kLn1Gain, kLn1Bias, kQkvWeight, kQkvBias, kAttnOutWeight, kAttnOutBias,
  kLn2Gain, kLn2Bias, kMlpInWeight, kMlpInBias, kMlpOutWeight, kMlpOutBias,
  kBlockSlotCount
};

// All weights as a flat list of named row-major tensors. Vectors are 1 x n.
// Order: tok_emb, pos_emb, blocks..., ln_f.g, ln_f.b, unembed.w, unembed.b.
template <typename T>
struct ModelParamsT {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Matrix<T>> tensors;

  static constexpr int kTokEmb = 0;
  static constexpr int kPosEmb = 1;

  int block_index(int layer, BlockSlot slot) const { return 2 + layer * kBlockSlotCount + slot; }
  int final_index(int k) const { return 2 + config.n_layers * kBlockSlotCount + k; }  // 0:g 1:b 2:W_U 3:b_U

  const Matrix<T>& block(int layer, BlockSlot slot) const { return tensors[static_cast<std::size_t>(block_index(layer, slot))]; }
  Matrix<T>& block(int layer, BlockSlot slot) { return tensors[static_cast<std::size_t>(block_index(layer, slot))]; }
  const Matrix<T>& final_tensor(int k) const { return tensors[static_cast<std::size_t>(final_index(k))]; }

  std::size_t parameter_count() const;
  int index_of(const std::string& name) const;  // throws on unknown name

  template <typename U>
  ModelParamsT<U> cast() const {
    ModelParamsT<U> out;
    out.config = config;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool operator==(const ModelParamsT&) const = default;
};

using ModelParams = ModelParamsT<float>;

// Zero-valued tensors with the canonical names and shapes.
template <typename T>
ModelParamsT<T> zero_params(const ModelConfig& config);

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Replacement for the residual stream at `layer`, shape-preserving.
// Layer l is the input of block l; layer n_layers is the input of the final norm.
template <typename T>
struct Hook {
  int layer = 0;
  std::function<Matrix<T>(const Matrix<T>&)> apply;
};

template <typename T>
using ActivationCache = std::map<int, Matrix<T>>;

template <typename T>
struct ForwardResult {
  Matrix<T> logits;
  ActivationCache<T> cache;
};

template <typename T>
ForwardResult<T> forward(const ModelParamsT<T>& params, std::span<const int> tokens,
                         std::span<const Hook<T>> hooks = {}, const std::set<int>& capture_layers = {});

// Residual stream at `layer` only; blocks at and above `layer` are not run.
template <typename T>
Matrix<T> residual_at(const ModelParamsT<T>& params, std::span<const int> tokens, int layer,
                      std::span<const Hook<T>> hooks = {});

// Scalar objectives of the logits with analytic gradients.
struct LogitDiffObjective {  // logit(correct) - mean(logit(incorrect)) at one position
  int position = 0;
  int correct_token = 0;
  std::vector<int> incorrect_tokens;
  double scale = 1.0;
};
struct CrossEntropyObjective {  // mean next-token negative log-likelihood
  double scale = 1.0;
};
struct ConstantObjective {
  double value = 0.0;
};
using ScalarObjective = std::variant<LogitDiffObjective, CrossEntropyObjective, ConstantObjective>;

template <typename T>
T evaluate_objective(const ScalarObjective& obj, const Matrix<T>& logits, std::span<const int> tokens,
                     Matrix<T>* dlogits = nullptr);

template <typename T>
T cross_entropy(const ModelParamsT<T>& params, std::span<const int> tokens, std::span<const Hook<T>> hooks = {});

// Mean cross-entropy over a corpus, each sequence weighted by its predicted token count.
double corpus_cross_entropy(const ModelParams& params, const std::vector<TokenSeq>& corpus,
                            std::span<const Hook<float>> hooks = {});

// d objective / d residual stream at `layer`, shape T x d_model.
template <typename T>
Matrix<T> grad_at_layer(const ModelParamsT<T>& params, std::span<const int> tokens, int layer,
                        const ScalarObjective& objective);

// Gradient of the batch-mean objective, zero outside `trainable` (tensor names).
template <typename T>
ModelParamsT<T> grad_params(const ModelParamsT<T>& params, const std::vector<TokenSeq>& batch,
                            const ScalarObjective& objective, const std::set<std::string>& trainable,
                            T* loss_out = nullptr);

// Gradient of <cotangent, residual at `residual_layer`> w.r.t. parameters, for losses defined on
// an intermediate activation. `cotangent` must have shape T x d_model.
template <typename T>
ModelParamsT<T> grad_params_from_residual(const ModelParamsT<T>& params, std::span<const int> tokens,
                                          int residual_layer, const Matrix<T>& cotangent,
                                          const std::set<std::string>& trainable);

std::set<std::string> all_tensor_names(const ModelConfig& config);

// TLM1 tensor file with kind "model"; `meta` is stored in the header under "meta".
void save_params(const ModelParams& params, const std::filesystem::path& path, const nlohmann::json& meta = {});
ModelParams load_params(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

enum class Optimizer { kAdam, kMomentum };

// The learning rate warms up linearly for `warmup_steps`, then (with
// `linear_decay`) is scaled by 1 - step / steps.
struct TrainConfig {
  int steps = 8000;
  int batch_size = 16;
  Optimizer optimizer = Optimizer::kAdam;
  double learning_rate = 3e-3;
  double momentum = 0.9;  // momentum optimizer only
  int warmup_steps = 200;
  bool linear_decay = true;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  int log_every = 100;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainResult {
  ModelParams params;
  std::vector<std::pair<int, double>> loss_curve;  // (step, batch loss)
  double final_loss = 0.0;
};

TrainResult train_lm(const ModelConfig& config, const std::vector<TokenSeq>& corpus, const TrainConfig& train,
                     std::uint64_t seed, const std::function<void(int, double)>& on_log = {});

}  // namespace unlearn
