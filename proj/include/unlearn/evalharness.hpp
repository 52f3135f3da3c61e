#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/intervene.hpp"
#include "unlearn/prompt.hpp"
#include "unlearn/sae.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

using HookList = std::span<const Hook<float>>;

struct AnswerResult {
  int chosen = 0;  // argmax letter, ties to the lowest index
  std::array<double, 4> probs{};
  std::array<double, 4> logits{};
};

AnswerResult answer(const ModelParams& model, const Tokenizer& tok, const McQuestion& q, HookList hooks = {},
                    const PromptTemplate& tmpl = {});

// Questions answered correctly under all 24 option orderings, no hook. Input order is kept.
std::vector<McQuestion> known_subset(const ModelParams& model, const Tokenizer& tok,
                                     const std::vector<McQuestion>& questions, const PromptTemplate& tmpl = {});

// Fraction of `known` answered correctly in the original ordering. Throws on empty input.
double relative_accuracy(const ModelParams& model, const Tokenizer& tok, const std::vector<McQuestion>& known,
                         HookList hooks = {}, const PromptTemplate& tmpl = {});

int permutation_score(const ModelParams& model, const Tokenizer& tok, const McQuestion& q, HookList hooks = {},
                      const PromptTemplate& tmpl = {});

// Mean cross-entropy with the modification minus without, on identical tokens.
double loss_added(const ModelParams& model, HookList hooks, const std::vector<TokenSeq>& corpus);
double loss_added(const ModelParams& model, const ModelParams& modified, const std::vector<TokenSeq>& corpus);

std::array<double, 4> letter_distribution(const ModelParams& model, const Tokenizer& tok,
                                          const std::vector<McQuestion>& questions, HookList hooks = {},
                                          const PromptTemplate& tmpl = {});

// Permutation score with the stem left out of the prompt.
std::vector<int> question_blind_score(const ModelParams& model, const Tokenizer& tok,
                                      const std::vector<McQuestion>& questions, const PromptTemplate& tmpl = {});

// Fraction of questions whose correct option is strictly the longest by character count.
double longest_answer_fraction(const std::vector<McQuestion>& questions);

// True when exactly one option is strictly longest.
bool has_unique_longest_option(const McQuestion& q);

struct SweepPoint {
  double clamp_value = 0.0;
  std::array<double, 4> probs{};
  std::array<double, 4> logits{};
  double loss_added = 0.0;
};

// ClampNeg(value) on one feature for each value.
std::vector<SweepPoint> clamp_sweep(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok, int feature,
                                    const McQuestion& q, const std::vector<double>& clamp_values,
                                    const std::vector<TokenSeq>& loss_corpus, const PromptTemplate& tmpl = {});

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);

struct EvalReport {
  double forget_relative_accuracy = 0.0;
  double retain_relative_accuracy = 0.0;
  double loss_added = 0.0;
  std::array<double, 4> letter_distribution{};  // over known forget questions
  std::vector<std::pair<std::string, int>> permutation_scores;  // known forget questions
  int modal_wrong_letter = -1;  // most common wrong choice on known forget questions, -1 if none
  nlohmann::json config;
};

void to_json(nlohmann::json& j, const EvalReport& r);

EvalReport evaluate(const ModelParams& model, const Tokenizer& tok, const std::vector<McQuestion>& known_forget,
                    const std::vector<McQuestion>& known_retain, const std::vector<TokenSeq>& loss_corpus,
                    HookList hooks, const nlohmann::json& config = {}, const PromptTemplate& tmpl = {});
EvalReport evaluate(const ModelParams& original, const ModelParams& modified, const Tokenizer& tok,
                    const std::vector<McQuestion>& known_forget, const std::vector<McQuestion>& known_retain,
                    const std::vector<TokenSeq>& loss_corpus, const nlohmann::json& config = {},
                    const PromptTemplate& tmpl = {});

struct FrontierRow {
  std::string config_id;
  int n_features = 0;
  double clamp_value = 0.0;
  double forget_rel_acc = 0.0;
  double retain_rel_acc = 0.0;
  double loss_added = 0.0;
};

void write_frontier_csv(const std::vector<FrontierRow>& rows, const std::filesystem::path& path);

}  // namespace unlearn
