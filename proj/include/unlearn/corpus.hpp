#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace unlearn {

using TokenSeq = std::vector<int>;

enum class SpecialRole { kBos, kNewline, kLetterA, kLetterB, kLetterC, kLetterD, kSeparator };

inline constexpr std::array<SpecialRole, 7> kAllSpecialRoles = {
    SpecialRole::kBos,     SpecialRole::kNewline, SpecialRole::kLetterA,  SpecialRole::kLetterB,
    SpecialRole::kLetterC, SpecialRole::kLetterD, SpecialRole::kSeparator};

// Surface string of each special role. The newline role is the literal '\n'.
std::string_view special_surface(SpecialRole role);

// Word-level tokenizer. Text is split on single spaces; '\n' is its own token
// and is written without surrounding spaces, so canonical text (single spaces,
// no leading/trailing blanks) round-trips exactly through encode/decode.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocab);

  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int id(std::string_view word) const;
  std::optional<int> find(std::string_view word) const;
  const std::string& word(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }

  int special(SpecialRole role) const { return special_ids_[static_cast<std::size_t>(role)]; }
  int letter(int option_index) const;
  std::vector<int> special_ids() const { return {special_ids_.begin(), special_ids_.end()}; }

  const std::vector<std::string>& vocab() const { return vocab_; }
  int size() const { return static_cast<int>(vocab_.size()); }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  std::array<int, kAllSpecialRoles.size()> special_ids_{};
};

struct McQuestion {
  std::string id;
  std::string stem;
  std::array<std::string, 4> options;
  int correct_index = 0;

  void validate() const;
  const std::string& correct_text() const { return options.at(static_cast<std::size_t>(correct_index)); }
  bool operator==(const McQuestion&) const = default;
};

using Permutation = std::array<int, 4>;

// All 24 orderings of {0,1,2,3}, in lexicographic order.
const std::array<Permutation, 24>& all_permutations();

// New option slot k holds old option perm[k].
McQuestion permute_options(const McQuestion& q, const Permutation& perm);

std::vector<McQuestion> load_questions(const std::filesystem::path& path);
void save_questions(const std::vector<McQuestion>& questions, const std::filesystem::path& path);

struct WorldSpec {
  std::uint64_t seed = 1;
  int n_forget_facts = 32;
  int n_retain_facts = 32;
  // Facts of a third topic seen only in pretraining (sentences and answered
  // multiple-choice documents); no questions are exported for them.
  int n_practice_facts = 0;
  int n_templates = 4;
  int vocab_size = 160;

  int relations_per_topic = 2;
  int objects_per_relation = 6;
  int fact_repeats = 2;
  int mc_perms_per_fact = 24;
  int n_generic_sentences = 600;
  int n_held_out_sentences = 400;
  double mention_rate = 0.05;
  int sequence_length = 32;

  void validate() const;
};

void to_json(nlohmann::json& j, const WorldSpec& spec);
void from_json(const nlohmann::json& j, WorldSpec& spec);

enum class Topic { kForget, kRetain, kPractice };

struct Fact {
  Topic topic;
  std::string subject;
  std::string relation;
  std::string object;
};

struct WorldBundle {
  WorldSpec spec;
  Tokenizer tokenizer;
  std::vector<Fact> facts;
  std::vector<std::string> forget_entities;
  std::vector<std::string> retain_entities;

  std::vector<TokenSeq> pretrain_corpus;
  std::vector<TokenSeq> forget_corpus;
  std::vector<TokenSeq> retain_corpus;
  std::vector<TokenSeq> held_out_corpus;
  std::vector<McQuestion> forget_questions;
  std::vector<McQuestion> retain_questions;
};

WorldBundle generate_world(const WorldSpec& spec);

// Directory layout: world.json, vocab.txt, {pretrain,forget,retain,held_out}.txt
// (one sequence per line) and {forget,retain}_questions.jsonl.
void save_world(const WorldBundle& world, const std::filesystem::path& dir);
WorldBundle load_world(const std::filesystem::path& dir);

std::vector<TokenSeq> read_corpus(const Tokenizer& tok, const std::filesystem::path& path);
void write_corpus(const Tokenizer& tok, const std::vector<TokenSeq>& corpus,
                  const std::filesystem::path& path);

}  // namespace unlearn
