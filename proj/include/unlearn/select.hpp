#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/prompt.hpp"
#include "unlearn/sae.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

struct SparsitySelectConfig {
  double retain_threshold = 0.01;
  int top_n = 20;

  void validate() const;
};

void to_json(nlohmann::json& j, const SparsitySelectConfig& c);
void from_json(const nlohmann::json& j, SparsitySelectConfig& c);

enum class PositionReduction { kSum, kMax };

struct AttributionConfig {
  int per_question_top_k = 20;
  double check_clamp_value = 20.0;  // applied as ClampNeg(check_clamp_value)
  int max_side_effects = 0;
  double loss_added_cap = std::numeric_limits<double>::infinity();
  std::vector<int> excluded_tokens;  // empty: <bos>, newline, the four letters and ':'
  PositionReduction reduction = PositionReduction::kSum;
  // When > 0, only questions whose id hash falls in the first `train_fraction`
  // of the hash range take part in selection.
  double train_fraction = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AttributionConfig& c);
void from_json(const nlohmann::json& j, AttributionConfig& c);

struct FeatureRecord {
  int feature = 0;
  nlohmann::json scores;                // method-specific numbers
  std::vector<std::string> questions;   // questions that nominated the feature
  std::vector<std::string> passed;      // filter names
  std::vector<std::string> failed;
  bool selected = false;
};

// `chosen` is ordered. Sparsity: forget sparsity descending, ties by id.
// Attribution: summed attribution over flipped questions descending, ties by id.
struct SelectionReport {
  std::string method;
  std::vector<int> chosen;
  std::vector<FeatureRecord> records;  // every scored feature, by feature id
  nlohmann::json details;
};

void to_json(nlohmann::json& j, const SelectionReport& r);
void from_json(const nlohmann::json& j, SelectionReport& r);
void save_selection(const SelectionReport& r, const std::filesystem::path& path);
SelectionReport load_selection(const std::filesystem::path& path);

SelectionReport select_by_sparsity(const FeatureStats& stats, const SparsitySelectConfig& cfg);

// Columns: feature_id, sparsity_forget, sparsity_retain, selected.
void write_sparsity_scatter_csv(const FeatureStats& stats, const SelectionReport& report,
                                const std::filesystem::path& path);

// Score per feature: sum over non-excluded positions p of (g_p . d_i) f_i(p), where g is the
// gradient at the SAE layer of logit(correct) - mean(logit(incorrect)) at the answer position.
VectorF attribution_scores(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok, const McQuestion& q,
                           const std::vector<int>& excluded_tokens, PositionReduction reduction = PositionReduction::kSum,
                           const PromptTemplate& tmpl = {});

std::vector<int> default_excluded_tokens(const Tokenizer& tok);

// True when the question's id falls in the training part of the hash split.
bool in_train_split(const McQuestion& q, double train_fraction);

SelectionReport select_by_attribution(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok,
                                      const std::vector<McQuestion>& forget_questions,
                                      const std::vector<McQuestion>& side_effect_questions,
                                      const std::vector<TokenSeq>& held_out_corpus, const AttributionConfig& cfg,
                                      const PromptTemplate& tmpl = {});

}  // namespace unlearn
