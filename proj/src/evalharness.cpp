#include "unlearn/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace unlearn {
namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << std::setprecision(9);
  return out;
}

bool correct_under_all_permutations(const ModelParams& model, const Tokenizer& tok, const McQuestion& q,
                                    const PromptTemplate& tmpl) {
  for (const auto& perm : all_permutations()) {
    const auto pq = permute_options(q, perm);
    if (answer(model, tok, pq, {}, tmpl).chosen != pq.correct_index) return false;
  }
  return true;
}

}  // namespace

AnswerResult answer(const ModelParams& model, const Tokenizer& tok, const McQuestion& q, HookList hooks,
                    const PromptTemplate& tmpl) {
  const auto prompt = render(tok, tmpl, q);
  const auto out = forward<float>(model, prompt.tokens, hooks);
  AnswerResult r;
  r.logits = letter_logits(out.logits, prompt);
  r.probs = letter_softmax(r.logits);
  r.chosen = 0;
  for (int k = 1; k < 4; ++k) {
    if (r.logits[static_cast<std::size_t>(k)] > r.logits[static_cast<std::size_t>(r.chosen)]) r.chosen = k;
  }
  return r;
}

std::vector<McQuestion> known_subset(const ModelParams& model, const Tokenizer& tok,
                                     const std::vector<McQuestion>& questions, const PromptTemplate& tmpl) {
  std::vector<char> keep(questions.size(), 0);
  parallel_for(questions.size(),
               [&](std::size_t i) { keep[i] = correct_under_all_permutations(model, tok, questions[i], tmpl); });
  std::vector<McQuestion> out;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (keep[i]) out.push_back(questions[i]);
  }
  return out;
}

double relative_accuracy(const ModelParams& model, const Tokenizer& tok, const std::vector<McQuestion>& known,
                         HookList hooks, const PromptTemplate& tmpl) {
  if (known.empty()) throw ValidationError("relative_accuracy: known subset is empty");
  std::vector<char> ok(known.size(), 0);
  parallel_for(known.size(),
               [&](std::size_t i) { ok[i] = answer(model, tok, known[i], hooks, tmpl).chosen == known[i].correct_index; });
  const auto n = std::count(ok.begin(), ok.end(), 1);
  return static_cast<double>(n) / static_cast<double>(known.size());
}

int permutation_score(const ModelParams& model, const Tokenizer& tok, const McQuestion& q, HookList hooks,
                      const PromptTemplate& tmpl) {
  std::array<char, 24> ok{};
  parallel_for(24, [&](std::size_t k) {
    const auto pq = permute_options(q, all_permutations()[k]);
    ok[k] = answer(model, tok, pq, hooks, tmpl).chosen == pq.correct_index;
  });
  return static_cast<int>(std::count(ok.begin(), ok.end(), 1));
}

double loss_added(const ModelParams& model, HookList hooks, const std::vector<TokenSeq>& corpus) {
  return corpus_cross_entropy(model, corpus, hooks) - corpus_cross_entropy(model, corpus);
}

double loss_added(const ModelParams& model, const ModelParams& modified, const std::vector<TokenSeq>& corpus) {
  return corpus_cross_entropy(modified, corpus) - corpus_cross_entropy(model, corpus);
}

std::array<double, 4> letter_distribution(const ModelParams& model, const Tokenizer& tok,
                                          const std::vector<McQuestion>& questions, HookList hooks,
                                          const PromptTemplate& tmpl) {
  if (questions.empty()) throw ValidationError("letter_distribution: no questions");
  std::vector<int> chosen(questions.size(), 0);
  parallel_for(questions.size(), [&](std::size_t i) { chosen[i] = answer(model, tok, questions[i], hooks, tmpl).chosen; });
  std::array<double, 4> counts{};
  for (int c : chosen) counts[static_cast<std::size_t>(c)] += 1.0;
  for (auto& c : counts) c /= static_cast<double>(questions.size());
  return counts;
}

std::vector<int> question_blind_score(const ModelParams& model, const Tokenizer& tok,
                                      const std::vector<McQuestion>& questions, const PromptTemplate& tmpl) {
  PromptTemplate blind = tmpl;
  blind.include_stem = false;
  std::vector<int> scores(questions.size(), 0);
  for (std::size_t i = 0; i < questions.size(); ++i) scores[i] = permutation_score(model, tok, questions[i], {}, blind);
  return scores;
}

bool has_unique_longest_option(const McQuestion& q) {
  std::size_t best = 0;
  int count = 0;
  for (const auto& o : q.options) {
    if (o.size() > best) {
      best = o.size();
      count = 1;
    } else if (o.size() == best) {
      ++count;
    }
  }
  return count == 1;
}

double longest_answer_fraction(const std::vector<McQuestion>& questions) {
  if (questions.empty()) throw ValidationError("longest_answer_fraction: no questions");
  int hits = 0;
  for (const auto& q : questions) {
    const auto len = q.correct_text().size();
    bool strictly_longest = true;
    for (int k = 0; k < 4; ++k) {
      if (k != q.correct_index && q.options[static_cast<std::size_t>(k)].size() >= len) strictly_longest = false;
    }
    hits += strictly_longest;
  }
  return static_cast<double>(hits) / static_cast<double>(questions.size());
}

std::vector<SweepPoint> clamp_sweep(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok, int feature,
                                    const McQuestion& q, const std::vector<double>& clamp_values,
                                    const std::vector<TokenSeq>& loss_corpus, const PromptTemplate& tmpl) {
  for (double v : clamp_values) {
    if (!std::isfinite(v)) throw ValidationError("clamp_sweep: non-finite clamp value");
  }
  std::vector<SweepPoint> out;
  for (double v : clamp_values) {
    // Values are the clamped activation itself; -20 means ClampNeg(20).
    InterventionSpec spec;
    spec.layer = sae.layer;
    spec.features = {feature};
    if (v == 0.0) {
      spec.mode = ZeroAblate{};
    } else {
      if (v > 0.0) throw ValidationError("clamp_sweep: clamp values must be <= 0");
      spec.mode = ClampNeg{-v};
    }
    const Hook<float> hook = build_hook(sae, spec);
    const HookList hooks(&hook, 1);
    const auto r = answer(model, tok, q, hooks, tmpl);
    SweepPoint p;
    p.clamp_value = v;
    p.probs = r.probs;
    p.logits = r.logits;
    p.loss_added = loss_corpus.empty() ? 0.0 : loss_added(model, hooks, loss_corpus);
    out.push_back(p);
  }
  return out;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "clamp_value,prob_a,prob_b,prob_c,prob_d,logit_a,logit_b,logit_c,logit_d,loss_added\n";
  for (const auto& p : points) {
    out << p.clamp_value;
    for (double v : p.probs) out << ',' << v;
    for (double v : p.logits) out << ',' << v;
    out << ',' << p.loss_added << '\n';
  }
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& [id, s] : r.permutation_scores) scores.push_back({{"id", id}, {"score", s}});
  j = {{"forget_relative_accuracy", r.forget_relative_accuracy},
       {"retain_relative_accuracy", r.retain_relative_accuracy},
       {"loss_added", r.loss_added},
       {"letter_distribution", r.letter_distribution},
       {"permutation_scores", scores},
       {"modal_wrong_letter", r.modal_wrong_letter < 0 ? nlohmann::json(nullptr)
                                                       : nlohmann::json(std::string(1, static_cast<char>('A' + r.modal_wrong_letter)))},
       {"config", r.config}};
}

namespace {

EvalReport evaluate_impl(const ModelParams& model, const Tokenizer& tok, const std::vector<McQuestion>& known_forget,
                         const std::vector<McQuestion>& known_retain, HookList hooks, const nlohmann::json& config,
                         const PromptTemplate& tmpl) {
  EvalReport r;
  r.config = config;
  r.forget_relative_accuracy = relative_accuracy(model, tok, known_forget, hooks, tmpl);
  r.retain_relative_accuracy = relative_accuracy(model, tok, known_retain, hooks, tmpl);
  std::vector<int> chosen(known_forget.size(), 0);
  parallel_for(known_forget.size(), [&](std::size_t i) { chosen[i] = answer(model, tok, known_forget[i], hooks, tmpl).chosen; });
  std::array<int, 4> wrong{};
  for (std::size_t i = 0; i < known_forget.size(); ++i) {
    r.letter_distribution[static_cast<std::size_t>(chosen[i])] += 1.0 / static_cast<double>(known_forget.size());
    if (chosen[i] != known_forget[i].correct_index) ++wrong[static_cast<std::size_t>(chosen[i])];
  }
  int best = -1;
  for (int k = 0; k < 4; ++k) {
    if (wrong[static_cast<std::size_t>(k)] > 0 && (best < 0 || wrong[static_cast<std::size_t>(k)] > wrong[static_cast<std::size_t>(best)])) best = k;
  }
  r.modal_wrong_letter = best;
  for (const auto& q : known_forget) r.permutation_scores.emplace_back(q.id, permutation_score(model, tok, q, hooks, tmpl));
  return r;
}

}  // namespace

EvalReport evaluate(const ModelParams& model, const Tokenizer& tok, const std::vector<McQuestion>& known_forget,
                    const std::vector<McQuestion>& known_retain, const std::vector<TokenSeq>& loss_corpus,
                    HookList hooks, const nlohmann::json& config, const PromptTemplate& tmpl) {
  auto r = evaluate_impl(model, tok, known_forget, known_retain, hooks, config, tmpl);
  r.loss_added = loss_added(model, hooks, loss_corpus);
  return r;
}

EvalReport evaluate(const ModelParams& original, const ModelParams& modified, const Tokenizer& tok,
                    const std::vector<McQuestion>& known_forget, const std::vector<McQuestion>& known_retain,
                    const std::vector<TokenSeq>& loss_corpus, const nlohmann::json& config,
                    const PromptTemplate& tmpl) {
  auto r = evaluate_impl(modified, tok, known_forget, known_retain, {}, config, tmpl);
  r.loss_added = loss_added(original, modified, loss_corpus);
  return r;
}

void write_frontier_csv(const std::vector<FrontierRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "config_id,n_features,clamp_value,forget_rel_acc,retain_rel_acc,loss_added\n";
  for (const auto& r : rows) {
    out << r.config_id << ',' << r.n_features << ',' << r.clamp_value << ',' << r.forget_rel_acc << ','
        << r.retain_rel_acc << ',' << r.loss_added << '\n';
  }
}

}  // namespace unlearn
