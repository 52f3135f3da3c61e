#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/corpus.hpp"
#include "unlearn/rmu.hpp"
#include "unlearn/sae.hpp"
#include "unlearn/select.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn {

enum class Stage { kGenWorld, kTrainLm, kTrainSae, kStats, kSelectSparsity, kSelectAttrib, kSweep, kEval, kRmu, kReport };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct SweepConfig {
  std::string selection = "sparsity";  // "sparsity" or "attribution"
  std::vector<int> n_features = {10, 20, 50};
  std::vector<double> clamp_values = {1, 10, 50, 100};  // ClampNeg(c)
  bool random_decoder = true;
  std::uint64_t random_decoder_seed = 7;
  std::vector<double> rmu_coefficients = {1, 2, 4};
  std::vector<double> rmu_alphas = {100, 300, 500};
  std::vector<int> rmu_layers = {3, 4};
};

struct EvalConfig {
  std::string selection = "sparsity";
  int n_features = 20;
  double clamp = 20.0;
  std::vector<double> sweep_values = {0, -5, -10, -20, -40};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out = "runs/toy";
  WorldSpec world;
  ModelConfig model;
  TrainConfig train;
  int sae_layer = 2;
  SaeTrainConfig sae;
  double known_gate = 0.6;  // fraction of forget questions that must be known after train-lm
  SparsitySelectConfig select_sparsity;
  AttributionConfig select_attribution;
  SweepConfig sweep;
  EvalConfig eval;
  RmuConfig rmu;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Runs pipeline stages against an output directory. Every artifact is stamped
// with its stage's config hash and the seed; a stage whose stamp matches is
// skipped unless forced.
class Experiment {
 public:
  Experiment(ExperimentConfig config, std::ostream& log);

  // Returns false when the stage was skipped as up to date.
  bool run(Stage stage, bool force = false);
  void run_all(bool force = false);

  // Hash of the configuration a stage depends on, including upstream stages.
  std::string stage_hash(Stage stage) const;
  bool up_to_date(Stage stage) const;

  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path path(const std::string& artifact) const { return config_.out / artifact; }

 private:
  void require(Stage stage) const;
  void stamp(Stage stage, const std::vector<std::string>& artifacts) const;

  void gen_world();
  void train_lm();
  void train_sae();
  void stats();
  void select_sparsity();
  void select_attrib();
  void sweep();
  void eval();
  void rmu();
  void report();

  ExperimentConfig config_;
  std::ostream& log_;
};

}  // namespace unlearn
