#include "unlearn/select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>

#include "unlearn/evalharness.hpp"
#include "unlearn/intervene.hpp"

namespace unlearn {

void SparsitySelectConfig::validate() const {
  if (!(retain_threshold >= 0.0)) throw ValidationError("retain_threshold must be >= 0");
  if (top_n < 1) throw ValidationError("top_n must be >= 1");
}

void to_json(nlohmann::json& j, const SparsitySelectConfig& c) {
  j = {{"retain_threshold", c.retain_threshold}, {"top_n", c.top_n}};
}

void from_json(const nlohmann::json& j, SparsitySelectConfig& c) {
  const SparsitySelectConfig d;
  c.retain_threshold = j.value("retain_threshold", d.retain_threshold);
  c.top_n = j.value("top_n", d.top_n);
}

void AttributionConfig::validate() const {
  if (per_question_top_k < 0 || max_side_effects < 0) throw ValidationError("attribution counts must be >= 0");
  if (!(check_clamp_value >= 0.0) || std::isinf(check_clamp_value)) {
    throw ValidationError("check_clamp_value must be finite and >= 0");
  }
  if (std::isnan(loss_added_cap)) throw ValidationError("loss_added_cap is NaN");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ValidationError("train_fraction must be in [0, 1]");
}

void to_json(nlohmann::json& j, const AttributionConfig& c) {
  j = {{"per_question_top_k", c.per_question_top_k},
       {"check_clamp_value", c.check_clamp_value},
       {"max_side_effects", c.max_side_effects},
       {"loss_added_cap", std::isinf(c.loss_added_cap) ? nlohmann::json(nullptr) : nlohmann::json(c.loss_added_cap)},
       {"excluded_tokens", c.excluded_tokens},
       {"reduction", c.reduction == PositionReduction::kSum ? "sum" : "max"},
       {"train_fraction", c.train_fraction}};
}

void from_json(const nlohmann::json& j, AttributionConfig& c) {
  const AttributionConfig d;
  c.per_question_top_k = j.value("per_question_top_k", d.per_question_top_k);
  c.check_clamp_value = j.value("check_clamp_value", d.check_clamp_value);
  c.max_side_effects = j.value("max_side_effects", d.max_side_effects);
  c.loss_added_cap = (j.contains("loss_added_cap") && !j["loss_added_cap"].is_null())
                         ? j["loss_added_cap"].get<double>()
                         : d.loss_added_cap;
  c.excluded_tokens = j.value("excluded_tokens", d.excluded_tokens);
  const auto red = j.value("reduction", std::string("sum"));
  if (red != "sum" && red != "max") throw ValidationError("reduction must be 'sum' or 'max'");
  c.reduction = red == "sum" ? PositionReduction::kSum : PositionReduction::kMax;
  c.train_fraction = j.value("train_fraction", d.train_fraction);
}

void to_json(nlohmann::json& j, const SelectionReport& r) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& f : r.records) {
    records.push_back({{"feature", f.feature},
                       {"scores", f.scores},
                       {"questions", f.questions},
                       {"passed", f.passed},
                       {"failed", f.failed},
                       {"selected", f.selected}});
  }
  j = {{"method", r.method}, {"chosen", r.chosen}, {"records", records}, {"details", r.details}};
}

void from_json(const nlohmann::json& j, SelectionReport& r) {
  try {
    r.method = j.at("method").get<std::string>();
    r.chosen = j.at("chosen").get<std::vector<int>>();
    r.details = j.value("details", nlohmann::json::object());
    r.records.clear();
    for (const auto& f : j.at("records")) {
      FeatureRecord rec;
      rec.feature = f.at("feature").get<int>();
      rec.scores = f.value("scores", nlohmann::json::object());
      rec.questions = f.value("questions", std::vector<std::string>{});
      rec.passed = f.value("passed", std::vector<std::string>{});
      rec.failed = f.value("failed", std::vector<std::string>{});
      rec.selected = f.value("selected", false);
      r.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("selection report: ") + e.what());
  }
}

void save_selection(const SelectionReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << nlohmann::json(r).dump(2) << '\n';
}

SelectionReport load_selection(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return j.get<SelectionReport>();
}

SelectionReport select_by_sparsity(const FeatureStats& stats, const SparsitySelectConfig& cfg) {
  cfg.validate();
  stats.validate();
  const int n = stats.n_features();
  std::vector<int> kept;
  for (int i = 0; i < n; ++i) {
    if (stats.sparsity_retain[static_cast<std::size_t>(i)] <= cfg.retain_threshold) kept.push_back(i);
  }
  std::sort(kept.begin(), kept.end(), [&](int a, int b) {
    const double fa = stats.sparsity_forget[static_cast<std::size_t>(a)];
    const double fb = stats.sparsity_forget[static_cast<std::size_t>(b)];
    return fa != fb ? fa > fb : a < b;
  });
  if (static_cast<int>(kept.size()) > cfg.top_n) kept.resize(static_cast<std::size_t>(cfg.top_n));

  SelectionReport r;
  r.method = "sparsity";
  r.chosen = kept;
  r.details = cfg;
  const std::set<int> chosen(kept.begin(), kept.end());
  for (int i = 0; i < n; ++i) {
    FeatureRecord rec;
    rec.feature = i;
    rec.scores = {{"sparsity_forget", stats.sparsity_forget[static_cast<std::size_t>(i)]},
                  {"sparsity_retain", stats.sparsity_retain[static_cast<std::size_t>(i)]}};
    const bool below = stats.sparsity_retain[static_cast<std::size_t>(i)] <= cfg.retain_threshold;
    (below ? rec.passed : rec.failed).push_back("retain_threshold");
    if (below) (chosen.count(i) ? rec.passed : rec.failed).push_back("top_n");
    rec.selected = chosen.count(i) > 0;
    r.records.push_back(std::move(rec));
  }
  return r;
}

void write_sparsity_scatter_csv(const FeatureStats& stats, const SelectionReport& report,
                                const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << std::setprecision(9) << "feature_id,sparsity_forget,sparsity_retain,selected\n";
  const std::set<int> chosen(report.chosen.begin(), report.chosen.end());
  for (int i = 0; i < stats.n_features(); ++i) {
    out << i << ',' << stats.sparsity_forget[static_cast<std::size_t>(i)] << ','
        << stats.sparsity_retain[static_cast<std::size_t>(i)] << ',' << (chosen.count(i) ? 1 : 0) << '\n';
  }
}

std::vector<int> default_excluded_tokens(const Tokenizer& tok) { return tok.special_ids(); }

VectorF attribution_scores(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok, const McQuestion& q,
                           const std::vector<int>& excluded_tokens, PositionReduction reduction,
                           const PromptTemplate& tmpl) {
  const auto prompt = render(tok, tmpl, q);
  LogitDiffObjective obj;
  obj.position = prompt.answer_position;
  obj.correct_token = prompt.letter_ids[static_cast<std::size_t>(q.correct_index)];
  for (int k = 0; k < 4; ++k) {
    if (k != q.correct_index) obj.incorrect_tokens.push_back(prompt.letter_ids[static_cast<std::size_t>(k)]);
  }
  const MatrixF g = grad_at_layer<float>(model, prompt.tokens, sae.layer, obj);
  const MatrixF f = encode(sae, residual_at<float>(model, prompt.tokens, sae.layer));
  const MatrixF gd = g * sae.W_dec.transpose();  // T x F: g_p . d_i
  const std::set<int> excluded(excluded_tokens.begin(), excluded_tokens.end());

  VectorF scores = VectorF::Zero(sae.n_features());
  bool first = true;
  for (Eigen::Index p = 0; p < f.rows(); ++p) {
    if (excluded.count(prompt.tokens[static_cast<std::size_t>(p)])) continue;
    const VectorF contrib = gd.row(p).cwiseProduct(f.row(p)).transpose();
    if (reduction == PositionReduction::kSum) {
      scores += contrib;
    } else {
      scores = first ? contrib : scores.cwiseMax(contrib);
    }
    first = false;
  }
  return scores;
}

bool in_train_split(const McQuestion& q, double train_fraction) {
  return static_cast<double>(fnv1a64(q.id) % 10000) < train_fraction * 10000.0;
}

SelectionReport select_by_attribution(const ModelParams& model, const SaeParams& sae, const Tokenizer& tok,
                                      const std::vector<McQuestion>& forget_questions,
                                      const std::vector<McQuestion>& side_effect_questions,
                                      const std::vector<TokenSeq>& held_out_corpus, const AttributionConfig& cfg,
                                      const PromptTemplate& tmpl) {
  cfg.validate();
  const auto excluded = cfg.excluded_tokens.empty() ? default_excluded_tokens(tok) : cfg.excluded_tokens;
  std::vector<McQuestion> questions;
  for (const auto& q : forget_questions) {
    if (cfg.train_fraction <= 0.0 || in_train_split(q, cfg.train_fraction)) questions.push_back(q);
  }

  auto solo_hook = [&](int feature) {
    InterventionSpec spec;
    spec.layer = sae.layer;
    spec.features = {feature};
    spec.mode = ClampNeg{cfg.check_clamp_value};
    return build_hook(sae, spec);
  };

  // Steps 1 and 2, per question: top-k by score, kept if the solo clamp flips the answer.
  struct Candidate {
    int feature;
    float score;
    bool flipped;
  };
  std::vector<std::vector<Candidate>> per_question(questions.size());
  parallel_for(questions.size(), [&](std::size_t qi) {
    const auto& q = questions[qi];
    const VectorF s = attribution_scores(model, sae, tok, q, excluded, cfg.reduction, tmpl);
    std::vector<int> ids;
    for (int i = 0; i < s.size(); ++i) {
      if (s(i) > 0.0f) ids.push_back(i);
    }
    std::sort(ids.begin(), ids.end(), [&](int a, int b) { return s(a) != s(b) ? s(a) > s(b) : a < b; });
    if (static_cast<int>(ids.size()) > cfg.per_question_top_k) ids.resize(static_cast<std::size_t>(cfg.per_question_top_k));
    const int base = answer(model, tok, q, {}, tmpl).chosen;
    for (int i : ids) {
      const auto hook = solo_hook(i);
      const int c = answer(model, tok, q, HookList(&hook, 1), tmpl).chosen;
      per_question[qi].push_back({i, s(i), c != base});
    }
  });

  // Step 3: union, merged in question order.
  std::map<int, FeatureRecord> records;
  std::map<int, double> flipped_score;
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    for (const auto& c : per_question[qi]) {
      auto& rec = records[c.feature];
      rec.feature = c.feature;
      if (!rec.scores.contains("attribution")) rec.scores["attribution"] = nlohmann::json::object();
      rec.scores["attribution"][questions[qi].id] = c.score;
      if (c.flipped) {
        rec.questions.push_back(questions[qi].id);
        flipped_score[c.feature] += c.score;
      }
    }
  }
  std::vector<int> union_ids;
  for (auto& [id, rec] : records) {
    if (flipped_score.count(id)) {
      rec.passed.push_back("flip");
      union_ids.push_back(id);
    } else {
      rec.failed.push_back("flip");
    }
  }

  // Steps 4 and 5: side effects and loss added, each with the feature clamped alone.
  std::vector<McQuestion> side_known;
  std::vector<char> side_ok(side_effect_questions.size(), 0);
  parallel_for(side_effect_questions.size(), [&](std::size_t i) {
    side_ok[i] = answer(model, tok, side_effect_questions[i], {}, tmpl).chosen == side_effect_questions[i].correct_index;
  });
  for (std::size_t i = 0; i < side_effect_questions.size(); ++i) {
    if (side_ok[i]) side_known.push_back(side_effect_questions[i]);
  }
  std::vector<int> side_effects(union_ids.size(), 0);
  std::vector<double> added(union_ids.size(), 0.0);
  parallel_for(union_ids.size(), [&](std::size_t k) {
    const auto hook = solo_hook(union_ids[k]);
    const HookList hooks(&hook, 1);
    int wrong = 0;
    for (const auto& q : side_known) wrong += answer(model, tok, q, hooks, tmpl).chosen != q.correct_index;
    side_effects[k] = wrong;
    added[k] = held_out_corpus.empty() ? 0.0 : loss_added(model, hooks, held_out_corpus);
  });

  std::vector<int> chosen;
  for (std::size_t k = 0; k < union_ids.size(); ++k) {
    auto& rec = records[union_ids[k]];
    rec.scores["flipped_attribution_sum"] = flipped_score[union_ids[k]];
    rec.scores["side_effects"] = side_effects[k];
    rec.scores["loss_added"] = added[k];
    const bool side_pass = side_effects[k] <= cfg.max_side_effects;
    (side_pass ? rec.passed : rec.failed).push_back("side_effects");
    if (!side_pass) continue;
    const bool loss_pass = !(added[k] > cfg.loss_added_cap);
    (loss_pass ? rec.passed : rec.failed).push_back("loss_added");
    if (!loss_pass) continue;
    rec.selected = true;
    chosen.push_back(union_ids[k]);
  }
  std::sort(chosen.begin(), chosen.end(), [&](int a, int b) {
    const double sa = flipped_score[a], sb = flipped_score[b];
    return sa != sb ? sa > sb : a < b;
  });

  SelectionReport r;
  r.method = "attribution";
  r.chosen = chosen;
  r.details = {{"config", cfg}, {"questions_used", questions.size()}, {"side_effect_questions", side_known.size()}};
  for (auto& [id, rec] : records) r.records.push_back(std::move(rec));
  return r;
}

}  // namespace unlearn
