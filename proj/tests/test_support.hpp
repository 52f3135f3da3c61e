#pragma once

#include <random>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/tinylm.hpp"

namespace unlearn::testing {

inline WorldSpec tiny_world_spec(std::uint64_t seed = 3) {
  WorldSpec s;
  s.seed = seed;
  s.n_forget_facts = 8;
  s.n_retain_facts = 8;
  s.vocab_size = 90;
  s.relations_per_topic = 2;
  s.objects_per_relation = 4;
  s.fact_repeats = 1;
  s.mc_perms_per_fact = 2;
  s.n_generic_sentences = 40;
  s.n_held_out_sentences = 20;
  return s;
}

inline ModelConfig tiny_config(int vocab, int n_layers = 2, int d_model = 16) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = 2;
  c.d_mlp = 2 * d_model;
  c.vocab_size = vocab;
  c.context_length = 32;
  return c;
}

// Initialization plus Gaussian noise so every nonlinearity is exercised.
template <typename T>
ModelParamsT<T> noisy_params(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  auto p = init_params(cfg, seed).cast<T>();
  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& t : p.tensors) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += static_cast<T>(n(rng));
  }
  return p;
}

inline TokenSeq random_tokens(int vocab, int length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenSeq t(static_cast<std::size_t>(length));
  for (auto& x : t) x = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
  return t;
}

// All-zero weights: layer norms output zero, so logits equal the unembedding bias.
inline ModelParams constant_logit_model(const ModelConfig& cfg, const std::vector<std::pair<int, float>>& bias = {}) {
  auto p = zero_params<float>(cfg);
  auto& b = p.tensors[static_cast<std::size_t>(p.final_index(3))];
  for (const auto& [id, v] : bias) b(0, id) = v;
  return p;
}

inline Tokenizer small_tokenizer(const std::vector<std::string>& words) {
  std::vector<std::string> vocab;
  for (auto r : kAllSpecialRoles) vocab.emplace_back(special_surface(r));
  for (const char* w : {"question", "answer", "the", "of", "is"}) vocab.emplace_back(w);
  for (const auto& w : words) vocab.push_back(w);
  return Tokenizer(vocab);
}

inline McQuestion make_q(const std::string& id, const std::string& stem, std::array<std::string, 4> opts, int correct) {
  McQuestion q;
  q.id = id;
  q.stem = stem;
  q.options = std::move(opts);
  q.correct_index = correct;
  return q;
}

}  // namespace unlearn::testing

namespace unlearn::testing {

struct PlantedData {
  MatrixF directions;  // n x d, unit rows
  MatrixF samples;     // N x d
};

// Each sample is a sparse non-negative combination of planted unit directions.
inline PlantedData planted_dictionary(int n, int d, int samples, double p_active, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  PlantedData out;
  out.directions.resize(n, d);
  for (Eigen::Index i = 0; i < out.directions.size(); ++i) out.directions.data()[i] = normal(rng);
  out.directions.rowwise().normalize();
  out.samples = MatrixF::Zero(samples, d);
  for (int s = 0; s < samples; ++s) {
    for (int k = 0; k < n; ++k) {
      if (u(rng) < p_active) out.samples.row(s) += (0.5f + u(rng)) * out.directions.row(k);
    }
  }
  return out;
}

// Mean over planted directions of the best cosine similarity with any learned row.
inline double mean_max_cosine(const MatrixF& planted, const MatrixF& learned) {
  const MatrixF l = learned.rowwise().normalized();
  const MatrixF sims = planted * l.transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < sims.rows(); ++i) total += sims.row(i).maxCoeff();
  return total / static_cast<double>(sims.rows());
}

}  // namespace unlearn::testing

#include "unlearn/sae.hpp"
#include "unlearn/select.hpp"

namespace unlearn::testing {

// Sparsities drawn from a coarse grid so that ties are common.
inline FeatureStats random_feature_stats(int n_features, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> grid(0, 20);
  FeatureStats s;
  for (int i = 0; i < n_features; ++i) {
    s.sparsity_forget.push_back(grid(rng) / 20.0);
    s.sparsity_retain.push_back(grid(rng) / 400.0);
    s.max_activation.push_back(1.0f);
  }
  s.tokens_forget = s.tokens_retain = s.tokens_reference = 100;
  return s;
}

// Rank-counting oracle: a kept feature's position is the number of kept
// features that beat it.
inline std::vector<int> brute_force_sparsity(const FeatureStats& s, double threshold, int top_n) {
  const int n = s.n_features();
  auto kept = [&](int i) { return s.sparsity_retain[static_cast<std::size_t>(i)] <= threshold; };
  std::vector<int> slot(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    if (!kept(i)) continue;
    int rank = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i || !kept(j)) continue;
      const double fi = s.sparsity_forget[static_cast<std::size_t>(i)];
      const double fj = s.sparsity_forget[static_cast<std::size_t>(j)];
      if (fj > fi || (fj == fi && j < i)) ++rank;
    }
    slot[static_cast<std::size_t>(i)] = rank;
  }
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  int count = 0;
  for (int i = 0; i < n; ++i) {
    const int r = slot[static_cast<std::size_t>(i)];
    if (r >= 0 && r < top_n) {
      out[static_cast<std::size_t>(r)] = i;
      ++count;
    }
  }
  out.resize(static_cast<std::size_t>(count));
  return out;
}

}  // namespace unlearn::testing

#include <set>

#include "unlearn/prompt.hpp"

namespace unlearn::testing {

// Central differences of the letter-logit difference when every non-excluded
// position is pushed by eps * f_i(p) * d_i, in double precision.
inline std::vector<double> attribution_fd_oracle(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok,
                                                 const McQuestion& q, const std::vector<int>& excluded,
                                                 double eps = 1e-3) {
  const auto prompt = render(tok, PromptTemplate{}, q);
  const auto md = model.cast<double>();
  const MatrixF f = encode(sae, residual_at<float>(model, prompt.tokens, sae.layer));
  const std::set<int> skip(excluded.begin(), excluded.end());
  LogitDiffObjective obj;
  obj.position = prompt.answer_position;
  obj.correct_token = prompt.letter_ids[static_cast<std::size_t>(q.correct_index)];
  for (int k = 0; k < 4; ++k) {
    if (k != q.correct_index) obj.incorrect_tokens.push_back(prompt.letter_ids[static_cast<std::size_t>(k)]);
  }
  std::vector<double> out(static_cast<std::size_t>(sae.n_features()), 0.0);
  for (int i = 0; i < sae.n_features(); ++i) {
    MatrixD push = MatrixD::Zero(f.rows(), sae.d_model());
    bool any = false;
    for (Eigen::Index p = 0; p < f.rows(); ++p) {
      if (skip.count(prompt.tokens[static_cast<std::size_t>(p)]) || !(f(p, i) > 0.0f)) continue;
      push.row(p) = static_cast<double>(f(p, i)) * sae.W_dec.row(i).cast<double>();
      any = true;
    }
    if (!any) continue;
    auto value = [&](double s) {
      const Hook<double> h{sae.layer, [&push, s](const MatrixD& x) { return MatrixD(x + s * push); }};
      const auto res = forward<double>(md, prompt.tokens, std::span<const Hook<double>>(&h, 1));
      return evaluate_objective<double>(obj, res.logits, prompt.tokens);
    };
    out[static_cast<std::size_t>(i)] = (value(eps) - value(-eps)) / (2 * eps);
  }
  return out;
}

}  // namespace unlearn::testing

namespace unlearn::testing {

// Hand-wired two-layer attention model. Block 0 copies into every position the
// letter two tokens back; block 1 attends from every position to tokens in
// `good_words` and moves the copied letter into a readout the unembedding maps
// to the letter logits. So a question is answered correctly under every
// ordering iff its correct option is the only good word among its options.
//
// Layout (d_model 64): 0-3 letter, 4 good flag, 5-8 copied letter, 9-12 readout,
// 13 filler, 14 balance, 15 position balance, 16-47 position one-hot, 48 constant.
// Every embedding has zero mean and fixed norm so the layer norms only rescale.
inline ModelParams reader_model(const Tokenizer& tok, const std::vector<std::string>& good_words) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 64;
  c.n_heads = 1;
  c.d_mlp = 4;
  c.vocab_size = tok.size();
  c.context_length = 32;
  auto p = zero_params<float>(c);
  constexpr float kR2 = 10.0f;
  const std::set<std::string> good(good_words.begin(), good_words.end());
  const SpecialRole letters[4] = {SpecialRole::kLetterA, SpecialRole::kLetterB, SpecialRole::kLetterC,
                                  SpecialRole::kLetterD};
  auto& emb = p.tensors[ModelParams::kTokEmb];
  for (int id = 0; id < tok.size(); ++id) {
    RowVectorF v = RowVectorF::Zero(64);
    for (int k = 0; k < 4; ++k) {
      if (id == tok.special(letters[k])) v(k) = 1.0f;
    }
    if (good.count(tok.word(id))) v(4) = 1.0f;
    v(48) = 1.0f;
    const float s = v.sum(), n = v.squaredNorm();
    const float root = std::sqrt(2.0f * (kR2 - n) - s * s);
    v(13) = (-s + root) / 2.0f;
    v(14) = (-s - root) / 2.0f;
    emb.row(id) = v;
  }
  auto& pos = p.tensors[ModelParams::kPosEmb];
  for (int i = 0; i < 32; ++i) {
    pos(i, 15) = -1.0f;
    pos(i, 16 + i) = 1.0f;
  }
  for (int l = 0; l < 2; ++l) {
    p.block(l, kLn1Gain).setOnes();
    p.block(l, kLn2Gain).setOnes();
  }
  // Block 0: query at position i matches key at position i - 2; values carry the letter.
  auto& qkv0 = p.block(0, kQkvWeight);
  for (int i = 2; i < 32; ++i) {
    qkv0(16 + i, i) = 100.0f;
    qkv0(16 + i - 2, 64 + i) = 1.0f;
  }
  auto& out0 = p.block(0, kAttnOutWeight);
  for (int k = 0; k < 4; ++k) {
    qkv0(k, 128 + k) = 1.0f;
    out0(k, 5 + k) = 1.0f;
    out0(k, 14) = -1.0f;
  }
  // Block 1: constant query against the good flag; values carry the copied letter.
  auto& qkv1 = p.block(1, kQkvWeight);
  qkv1(48, 0) = 100.0f;
  qkv1(4, 64) = 1.0f;
  auto& out1 = p.block(1, kAttnOutWeight);
  for (int k = 0; k < 4; ++k) {
    qkv1(5 + k, 128 + k) = 1.0f;
    out1(k, 9 + k) = 1.0f;
    out1(k, 14) = -1.0f;
  }
  p.tensors[static_cast<std::size_t>(p.final_index(0))].setOnes();
  auto& unembed = p.tensors[static_cast<std::size_t>(p.final_index(2))];
  for (int k = 0; k < 4; ++k) unembed(9 + k, tok.special(letters[k])) = 10.0f;
  return p;
}

}  // namespace unlearn::testing

namespace unlearn::testing {

// Ten questions; in exactly four the correct option is strictly the longest
// (q0-q3). q4 ties for longest, q5-q9 have a longer wrong option.
inline std::vector<McQuestion> longest_answer_fixture() {
  return {
      make_q("q0", "s", {"longest", "a", "b", "c"}, 0),
      make_q("q1", "s", {"a", "bb", "cccc", "d"}, 2),
      make_q("q2", "s", {"x", "y", "z", "wwwww"}, 3),
      make_q("q3", "s", {"pp", "qqq", "r", "s"}, 1),
      make_q("q4", "s", {"same", "four", "a", "b"}, 0),
      make_q("q5", "s", {"a", "longer", "b", "c"}, 0),
      make_q("q6", "s", {"aa", "b", "cccc", "d"}, 0),
      make_q("q7", "s", {"a", "b", "c", "ddd"}, 2),
      make_q("q8", "s", {"eeee", "ff", "g", "h"}, 1),
      make_q("q9", "s", {"i", "jjjjjj", "k", "ll"}, 3),
  };
}

}  // namespace unlearn::testing
