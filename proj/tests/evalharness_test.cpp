#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "test_support.hpp"
#include "unlearn/evalharness.hpp"

using namespace unlearn;
using namespace unlearn::testing;

namespace {

const std::vector<std::string> kWords = {"color", "size", "zubo", "mika", "tevo", "red", "blue", "green", "gold",
                                         "big",   "small", "tall", "wide", "odd"};

struct Reader {
  Tokenizer tok = small_tokenizer(kWords);
  ModelParams model = reader_model(tok, {"red", "big"});
  McQuestion known_q = make_q("k1", "the color of zubo is", {"red", "blue", "green", "gold"}, 0);
  McQuestion known_q2 = make_q("k2", "the size of mika is", {"small", "tall", "big", "wide"}, 2);
  McQuestion confused_q = make_q("c1", "the color of tevo is", {"blue", "red", "green", "gold"}, 0);
  McQuestion blank_q = make_q("b1", "the size of tevo is", {"small", "tall", "odd", "wide"}, 3);
  std::vector<McQuestion> all() const { return {confused_q, known_q, blank_q, known_q2}; }
};

// Rewrites the readout so each letter reads as the next one.
Hook<float> rotate_readout() {
  return {2, [](const MatrixF& x) {
            MatrixF y = x;
            for (int k = 0; k < 4; ++k) y.col(9 + (k + 1) % 4) = x.col(9 + k);
            return y;
          }};
}

// Replaces the readout with a one-hot letter chosen by hashing the row.
Hook<float> random_guess() {
  return {2, [](const MatrixF& x) {
            MatrixF y = x;
            for (Eigen::Index t = 0; t < x.rows(); ++t) {
              std::uint64_t h = 1469598103934665603ull;
              for (Eigen::Index j = 0; j < x.cols(); ++j) {
                h ^= static_cast<std::uint64_t>(std::lround(x(t, j) * 1000.0f));
                h *= 1099511628211ull;
              }
              y.row(t).segment(9, 4).setZero();
              y(t, 9 + static_cast<Eigen::Index>(h % 4)) = 3.0f;
            }
            return y;
          }};
}

// Independent enumeration of all orderings, reading letter logits from forward.
int enumerate_correct(const ModelParams& model, const Tokenizer& tok, const McQuestion& q) {
  std::array<int, 4> order = {0, 1, 2, 3};
  int correct = 0;
  do {
    McQuestion p = q;
    for (int k = 0; k < 4; ++k) p.options[static_cast<std::size_t>(k)] = q.options[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
    p.correct_index = static_cast<int>(std::find(order.begin(), order.end(), q.correct_index) - order.begin());
    const auto prompt = render(tok, PromptTemplate{}, p);
    const auto logits = forward<float>(model, prompt.tokens).logits;
    int best = 0;
    for (int k = 1; k < 4; ++k) {
      if (logits(prompt.answer_position, prompt.letter_ids[static_cast<std::size_t>(k)]) >
          logits(prompt.answer_position, prompt.letter_ids[static_cast<std::size_t>(best)])) {
        best = k;
      }
    }
    correct += best == p.correct_index;
  } while (std::next_permutation(order.begin(), order.end()));
  return correct;
}

ModelParams always_a(const Tokenizer& tok) {
  return constant_logit_model(tiny_config(tok.size()), {{tok.special(SpecialRole::kLetterA), 5.0f}});
}

}  // namespace

TEST(Answer, UniformModelPicksAWithQuarterProbabilities) {
  const Reader r;
  const auto model = constant_logit_model(tiny_config(r.tok.size()));
  const auto a = answer(model, r.tok, r.known_q);
  EXPECT_EQ(a.chosen, 0);
  for (double p : a.probs) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Answer, AgreesWithManualSoftmax) {
  const auto w = generate_world(tiny_world_spec());
  const auto model = noisy_params<float>(tiny_config(w.tokenizer.size()), 3);
  for (int i = 0; i < 5; ++i) {
    const auto& q = w.forget_questions[static_cast<std::size_t>(i)];
    const auto a = answer(model, w.tokenizer, q);
    const auto prompt = render(w.tokenizer, PromptTemplate{}, q);
    const auto logits = forward<float>(model, prompt.tokens).logits;
    double z = 0.0;
    std::array<double, 4> e{};
    for (int k = 0; k < 4; ++k) {
      e[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits(prompt.answer_position, prompt.letter_ids[static_cast<std::size_t>(k)])));
      z += e[static_cast<std::size_t>(k)];
    }
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
      EXPECT_NEAR(a.probs[static_cast<std::size_t>(k)], e[static_cast<std::size_t>(k)] / z, 1e-6);
      total += a.probs[static_cast<std::size_t>(k)];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_EQ(a.chosen, static_cast<int>(std::max_element(a.probs.begin(), a.probs.end()) - a.probs.begin()));
  }
}

TEST(KnownSubset, AlwaysAModelKnowsNothing) {
  const Reader r;
  const auto model = always_a(r.tok);
  EXPECT_TRUE(known_subset(model, r.tok, r.all()).empty());
  for (const auto& q : r.all()) EXPECT_EQ(permutation_score(model, r.tok, q), 6);
  EXPECT_EQ(letter_distribution(model, r.tok, r.all()), (std::array<double, 4>{1.0, 0.0, 0.0, 0.0}));
}

TEST(KnownSubset, ReaderModelKnowsExactlyTheUnambiguousQuestions) {
  const Reader r;
  const auto known = known_subset(r.model, r.tok, r.all());
  ASSERT_EQ(known.size(), 2u);
  EXPECT_EQ(known[0].id, "k1");
  EXPECT_EQ(known[1].id, "k2");
  EXPECT_EQ(permutation_score(r.model, r.tok, r.known_q), 24);
  EXPECT_EQ(permutation_score(r.model, r.tok, r.confused_q), 0);
}

TEST(KnownSubset, EqualsIndependentEnumeration) {
  const Reader r;
  for (const auto& q : r.all()) {
    EXPECT_EQ(permutation_score(r.model, r.tok, q), enumerate_correct(r.model, r.tok, q)) << q.id;
  }
  const auto m = noisy_params<float>(tiny_config(r.tok.size()), 4, 0.8);
  for (const auto& q : r.all()) EXPECT_EQ(permutation_score(m, r.tok, q), enumerate_correct(m, r.tok, q)) << q.id;
}

TEST(KnownSubset, IndependentOfQuestionOrder) {
  const Reader r;
  auto qs = r.all();
  const auto a = known_subset(r.model, r.tok, qs);
  std::reverse(qs.begin(), qs.end());
  const auto b = known_subset(r.model, r.tok, qs);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a[0].id, b[1].id);
  EXPECT_EQ(a[1].id, b[0].id);
}

TEST(RelativeAccuracy, NoHookIsOneAndFlipHookIsZero) {
  const Reader r;
  const auto known = known_subset(r.model, r.tok, r.all());
  EXPECT_EQ(relative_accuracy(r.model, r.tok, known), 1.0);
  const auto hook = rotate_readout();
  EXPECT_EQ(relative_accuracy(r.model, r.tok, known, HookList(&hook, 1)), 0.0);
  EXPECT_THROW(relative_accuracy(r.model, r.tok, {}), ValidationError);
}

TEST(RelativeAccuracy, KnowledgeDestroyingHookIsNearChance) {
  const Reader r;
  const std::vector<std::string> subjects = {"zubo", "mika", "tevo"};
  const std::vector<std::string> others = {"blue", "green", "gold", "small", "tall", "wide", "odd"};
  std::mt19937_64 rng(5);
  std::vector<McQuestion> qs;
  for (int i = 0; i < 60; ++i) {
    std::array<std::string, 4> opts;
    std::vector<std::string> pool = others;
    std::shuffle(pool.begin(), pool.end(), rng);
    const int correct = static_cast<int>(rng() % 4);
    for (int k = 0, j = 0; k < 4; ++k) opts[static_cast<std::size_t>(k)] = k == correct ? "red" : pool[static_cast<std::size_t>(j++)];
    qs.push_back(make_q("q" + std::to_string(i), "the color of " + subjects[static_cast<std::size_t>(i % 3)] + " is", opts, correct));
  }
  const auto known = known_subset(r.model, r.tok, qs);
  ASSERT_EQ(known.size(), qs.size());
  const auto hook = random_guess();
  EXPECT_NEAR(relative_accuracy(r.model, r.tok, known, HookList(&hook, 1)), 0.25, 0.1);
}

TEST(LossAdded, EmptyHookIsExactlyZero) {
  const auto w = generate_world(tiny_world_spec());
  const auto model = noisy_params<float>(tiny_config(w.tokenizer.size()), 3);
  const Hook<float> id{1, [](const MatrixF& x) { return x; }};
  EXPECT_EQ(loss_added(model, HookList(&id, 1), w.held_out_corpus), 0.0);
  EXPECT_EQ(loss_added(model, model, w.held_out_corpus), 0.0);
}

TEST(LossAdded, IndependentOfChunking) {
  const auto w = generate_world(tiny_world_spec());
  const auto model = noisy_params<float>(tiny_config(w.tokenizer.size()), 3);
  const Hook<float> shift{1, [](const MatrixF& x) { return MatrixF(x.array() + 0.3f); }};
  const HookList hooks(&shift, 1);
  const auto& corpus = w.held_out_corpus;
  const double whole = loss_added(model, hooks, corpus);
  for (std::size_t cut : {std::size_t{1}, corpus.size() / 3, corpus.size() / 2}) {
    const std::vector<TokenSeq> a(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cut));
    const std::vector<TokenSeq> b(corpus.begin() + static_cast<std::ptrdiff_t>(cut), corpus.end());
    auto tokens = [](const std::vector<TokenSeq>& c) {
      double n = 0;
      for (const auto& s : c) n += static_cast<double>(s.size() - 1);
      return n;
    };
    const double na = tokens(a), nb = tokens(b);
    const double chunked = (loss_added(model, hooks, a) * na + loss_added(model, hooks, b) * nb) / (na + nb);
    EXPECT_NEAR(chunked, whole, 1e-6);
  }
}

TEST(LetterDistribution, SumsToOne) {
  const Reader r;
  const auto d = letter_distribution(r.model, r.tok, {r.known_q, r.known_q2, r.confused_q});
  EXPECT_NEAR(d[0] + d[1] + d[2] + d[3], 1.0, 1e-12);
  EXPECT_EQ(d, (std::array<double, 4>{1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0}));
}

TEST(Diagnostics, LongestAnswerFixture) {
  const auto qs = longest_answer_fixture();
  ASSERT_EQ(qs.size(), 10u);
  EXPECT_DOUBLE_EQ(longest_answer_fraction(qs), 0.4);
  const std::vector<McQuestion> equal = {make_q("e", "s", {"aa", "bb", "cc", "dd"}, 1)};
  EXPECT_EQ(longest_answer_fraction(equal), 0.0);
  EXPECT_FALSE(has_unique_longest_option(equal[0]));
  EXPECT_TRUE(has_unique_longest_option(qs[0]));
}

TEST(Diagnostics, QuestionBlindScore) {
  const Reader r;
  const auto blind = question_blind_score(r.model, r.tok, r.all());
  EXPECT_EQ(blind, (std::vector<int>{0, 24, 6, 24}));
  EXPECT_EQ(question_blind_score(always_a(r.tok), r.tok, r.all()), (std::vector<int>{6, 6, 6, 6}));
}

TEST(ClampSweep, ZeroMatchesZeroAblate) {
  const Reader r;
  SaeParams sae;
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0.0f, 1.0f);
  sae.W_enc.resize(64, 8);
  sae.W_dec.resize(8, 64);
  for (Eigen::Index i = 0; i < sae.W_enc.size(); ++i) sae.W_enc.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < sae.W_dec.size(); ++i) sae.W_dec.data()[i] = n(rng);
  sae.W_dec.rowwise().normalize();
  sae.b_enc = RowVectorF::Zero(8);
  sae.b_dec = RowVectorF::Zero(64);
  sae.layer = 1;
  std::vector<TokenSeq> corpus;
  for (const auto& q : r.all()) corpus.push_back(render_with_answer(r.tok, PromptTemplate{}, q));
  const auto pts = clamp_sweep(r.model, sae, r.tok, 3, r.known_q, {0, -5, -10}, corpus);
  ASSERT_EQ(pts.size(), 3u);
  const auto ablated = intervened_answer_probs(r.model, sae, InterventionSpec{1, {3}, ZeroAblate{}},
                                               render(r.tok, PromptTemplate{}, r.known_q));
  EXPECT_EQ(pts[0].probs, ablated);
  const auto clamped = intervened_answer_probs(r.model, sae, InterventionSpec{1, {3}, ClampNeg{10}},
                                               render(r.tok, PromptTemplate{}, r.known_q));
  EXPECT_EQ(pts[2].probs, clamped);
  EXPECT_THROW(clamp_sweep(r.model, sae, r.tok, 3, r.known_q, {5}, corpus), ValidationError);

  const auto path = std::filesystem::temp_directory_path() / "unlearn_sweep.csv";
  write_sweep_csv(pts, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "clamp_value,prob_a,prob_b,prob_c,prob_d,logit_a,logit_b,logit_c,logit_d,loss_added");
}

// One feature that reads and writes readout letter A, the answer of k1.
TEST(ClampSweep, PlantedFeatureLowersTheAnswerUntilItFlips) {
  const Reader r;
  SaeParams sae;
  sae.W_enc = MatrixF::Zero(64, 1);
  sae.W_enc(9, 0) = 1.0f;
  sae.W_dec = MatrixF::Zero(1, 64);
  sae.W_dec(0, 9) = 1.0f;
  sae.b_enc = RowVectorF::Zero(1);
  sae.b_dec = RowVectorF::Zero(64);
  sae.layer = 2;
  const auto base = answer(r.model, r.tok, r.known_q);
  ASSERT_EQ(base.chosen, 0);
  EXPECT_GT(base.probs[0], 0.99);
  const std::vector<double> values = {0, -5, -10, -20, -40};
  const auto pts = clamp_sweep(r.model, sae, r.tok, 0, r.known_q, values, {});
  ASSERT_EQ(pts.size(), values.size());
  EXPECT_LT(pts[0].probs[0], base.probs[0]);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(pts[i].probs[0], pts[i - 1].probs[0]) << values[i];
  const auto argmax = [](const std::array<double, 4>& p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  };
  EXPECT_NE(argmax(pts.back().probs), 0);
}

TEST(Evaluate, ReportOnKnownQuestions) {
  const Reader r;
  const auto known = known_subset(r.model, r.tok, r.all());
  std::vector<TokenSeq> corpus;
  for (const auto& q : r.all()) corpus.push_back(render_with_answer(r.tok, PromptTemplate{}, q));
  const auto rep = evaluate(r.model, r.tok, known, known, corpus, {}, {{"name", "none"}});
  EXPECT_EQ(rep.forget_relative_accuracy, 1.0);
  EXPECT_EQ(rep.retain_relative_accuracy, 1.0);
  EXPECT_EQ(rep.loss_added, 0.0);
  EXPECT_EQ(rep.modal_wrong_letter, -1);
  for (const auto& [id, score] : rep.permutation_scores) EXPECT_EQ(score, 24);
  const auto hook = rotate_readout();
  const auto flipped = evaluate(r.model, r.tok, known, known, corpus, HookList(&hook, 1));
  EXPECT_EQ(flipped.forget_relative_accuracy, 0.0);
  EXPECT_GE(flipped.modal_wrong_letter, 0);
  const auto j = nlohmann::json(rep);
  EXPECT_EQ(j.at("config").at("name"), "none");
}

TEST(Frontier, CsvHeader) {
  const auto path = std::filesystem::temp_directory_path() / "unlearn_frontier.csv";
  write_frontier_csv({{"clamp_n10_c20", 10, 20, 0.3, 0.95, 0.01}}, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "config_id,n_features,clamp_value,forget_rel_acc,retain_rel_acc,loss_added");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 17), "clamp_n10_c20,10,");
}
