#include "unlearn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "unlearn/evalharness.hpp"
#include "unlearn/intervene.hpp"

namespace unlearn {

using nlohmann::json;

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::kGenWorld,       Stage::kTrainLm,      Stage::kTrainSae,
                                            Stage::kStats,          Stage::kSelectSparsity, Stage::kSelectAttrib,
                                            Stage::kSweep,          Stage::kEval,         Stage::kRmu,
                                            Stage::kReport};
  return stages;
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kGenWorld: return "gen-world";
    case Stage::kTrainLm: return "train-lm";
    case Stage::kTrainSae: return "train-sae";
    case Stage::kStats: return "stats";
    case Stage::kSelectSparsity: return "select-sparsity";
    case Stage::kSelectAttrib: return "select-attrib";
    case Stage::kSweep: return "sweep";
    case Stage::kEval: return "eval";
    case Stage::kRmu: return "rmu";
    case Stage::kReport: return "report";
  }
  return "?";
}

Stage stage_from_name(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) return s;
  }
  throw ValidationError("unknown stage '" + name + "'");
}

namespace {

void check_selection_name(const std::string& s, const char* where) {
  if (s != "sparsity" && s != "attribution") {
    throw ValidationError(std::string(where) + ".selection must be 'sparsity' or 'attribution'");
  }
}

Stage selection_stage(const std::string& s) { return s == "sparsity" ? Stage::kSelectSparsity : Stage::kSelectAttrib; }

std::string selection_file(const std::string& s) {
  return s == "sparsity" ? "selection_sparsity.json" : "selection_attribution.json";
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string format_number(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::vector<McQuestion> by_ids(const std::vector<McQuestion>& all, const std::vector<std::string>& ids) {
  const std::set<std::string> want(ids.begin(), ids.end());
  std::vector<McQuestion> out;
  for (const auto& q : all) {
    if (want.count(q.id)) out.push_back(q);
  }
  return out;
}

std::vector<int> first_n(const std::vector<int>& v, int n) {
  return {v.begin(), v.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(v.size()))};
}

json row_json(const FrontierRow& r) {
  return {{"config_id", r.config_id},
          {"n_features", r.n_features},
          {"clamp_value", r.clamp_value},
          {"forget_rel_acc", r.forget_rel_acc},
          {"retain_rel_acc", r.retain_rel_acc},
          {"loss_added", r.loss_added}};
}

FrontierRow row_from_json(const json& j) {
  FrontierRow r;
  r.config_id = j.at("config_id").get<std::string>();
  r.n_features = j.at("n_features").get<int>();
  r.clamp_value = j.at("clamp_value").get<double>();
  r.forget_rel_acc = j.at("forget_rel_acc").get<double>();
  r.retain_rel_acc = j.at("retain_rel_acc").get<double>();
  r.loss_added = j.at("loss_added").get<double>();
  return r;
}

// Forget accuracy of a curve at a given loss, linearly interpolated along the
// curve sorted by loss; beyond the curve the nearest end is used.
double accuracy_at_loss(std::vector<FrontierRow> curve, double loss) {
  std::sort(curve.begin(), curve.end(), [](const FrontierRow& a, const FrontierRow& b) {
    return a.loss_added != b.loss_added ? a.loss_added < b.loss_added : a.clamp_value < b.clamp_value;
  });
  if (loss <= curve.front().loss_added) return curve.front().forget_rel_acc;
  if (loss >= curve.back().loss_added) return curve.back().forget_rel_acc;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (loss <= curve[i].loss_added) {
      const auto& a = curve[i - 1];
      const auto& b = curve[i];
      const double span = b.loss_added - a.loss_added;
      const double t = span > 0.0 ? (loss - a.loss_added) / span : 1.0;
      return a.forget_rel_acc + t * (b.forget_rel_acc - a.forget_rel_acc);
    }
  }
  return curve.back().forget_rel_acc;
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  if (model.n_layers < 1 || model.d_model < 1 || model.n_heads < 1 || model.d_model % model.n_heads != 0 ||
      model.d_mlp < 1 || model.context_length < world.sequence_length) {
    throw ValidationError("model config invalid or context shorter than world sequence_length");
  }
  train.validate();
  if (sae_layer < 0 || sae_layer > model.n_layers) throw ValidationError("sae_layer outside the residual stream");
  if (sae.n_features < 1 || sae.steps < 0 || sae.batch_size < 1 || !(sae.l1_coefficient >= 0.0)) {
    throw ValidationError("sae config invalid");
  }
  if (!(known_gate >= 0.0 && known_gate <= 1.0)) throw ValidationError("known_gate must be in [0, 1]");
  select_sparsity.validate();
  select_attribution.validate();
  check_selection_name(sweep.selection, "sweep");
  check_selection_name(eval.selection, "eval");
  if (sweep.n_features.empty() || sweep.clamp_values.empty()) {
    throw ValidationError("sweep grid is empty: n_features and clamp_values need at least one value");
  }
  for (int n : sweep.n_features) {
    if (n < 1) throw ValidationError("sweep n_features must be >= 1");
  }
  for (double c : sweep.clamp_values) {
    if (!std::isfinite(c) || c < 0.0) throw ValidationError("sweep clamp values must be finite and >= 0");
  }
  for (double c : sweep.rmu_coefficients) {
    if (!std::isfinite(c) || c <= 0.0) throw ValidationError("sweep rmu coefficients must be > 0");
  }
  for (double a : sweep.rmu_alphas) {
    if (!std::isfinite(a) || a < 0.0) throw ValidationError("sweep rmu alphas must be >= 0");
  }
  for (int l : sweep.rmu_layers) {
    RmuConfig r = rmu;
    r.layer = l;
    r.validate(model);
  }
  if (eval.n_features < 1) throw ValidationError("eval n_features must be >= 1");
  if (!std::isfinite(eval.clamp) || eval.clamp < 0.0) throw ValidationError("eval clamp must be finite and >= 0");
  if (eval.sweep_values.empty()) throw ValidationError("eval sweep_values is empty");
  for (double v : eval.sweep_values) {
    if (!std::isfinite(v) || v > 0.0) throw ValidationError("eval sweep values must be finite and <= 0");
  }
  rmu.validate(model);
}

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},
       {"out", c.out.string()},
       {"world", c.world},
       {"model", c.model},
       {"train", c.train},
       {"sae_layer", c.sae_layer},
       {"sae", c.sae},
       {"known_gate", c.known_gate},
       {"select_sparsity", c.select_sparsity},
       {"select_attribution", c.select_attribution},
       {"sweep",
        {{"selection", c.sweep.selection},
         {"n_features", c.sweep.n_features},
         {"clamp_values", c.sweep.clamp_values},
         {"random_decoder", c.sweep.random_decoder},
         {"random_decoder_seed", c.sweep.random_decoder_seed},
         {"rmu_coefficients", c.sweep.rmu_coefficients},
         {"rmu_alphas", c.sweep.rmu_alphas},
         {"rmu_layers", c.sweep.rmu_layers}}},
       {"eval",
        {{"selection", c.eval.selection},
         {"n_features", c.eval.n_features},
         {"clamp", c.eval.clamp},
         {"sweep_values", c.eval.sweep_values}}},
       {"rmu", c.rmu}};
}

void from_json(const json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  try {
    c.seed = j.value("seed", d.seed);
    c.out = j.value("out", d.out.string());
    c.world = j.value("world", d.world);
    c.model = j.value("model", d.model);
    c.train = j.value("train", d.train);
    c.sae_layer = j.value("sae_layer", d.sae_layer);
    c.sae = j.value("sae", d.sae);
    c.known_gate = j.value("known_gate", d.known_gate);
    c.select_sparsity = j.value("select_sparsity", d.select_sparsity);
    c.select_attribution = j.value("select_attribution", d.select_attribution);
    const json sw = j.value("sweep", json::object());
    c.sweep.selection = sw.value("selection", d.sweep.selection);
    c.sweep.n_features = sw.value("n_features", d.sweep.n_features);
    c.sweep.clamp_values = sw.value("clamp_values", d.sweep.clamp_values);
    c.sweep.random_decoder = sw.value("random_decoder", d.sweep.random_decoder);
    c.sweep.random_decoder_seed = sw.value("random_decoder_seed", d.sweep.random_decoder_seed);
    c.sweep.rmu_coefficients = sw.value("rmu_coefficients", d.sweep.rmu_coefficients);
    c.sweep.rmu_alphas = sw.value("rmu_alphas", d.sweep.rmu_alphas);
    c.sweep.rmu_layers = sw.value("rmu_layers", d.sweep.rmu_layers);
    const json ev = j.value("eval", json::object());
    c.eval.selection = ev.value("selection", d.eval.selection);
    c.eval.n_features = ev.value("n_features", d.eval.n_features);
    c.eval.clamp = ev.value("clamp", d.eval.clamp);
    c.eval.sweep_values = ev.value("sweep_values", d.eval.sweep_values);
    c.rmu = j.value("rmu", d.rmu);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const json j = read_json(path);
  auto c = j.get<ExperimentConfig>();
  // Relative output paths are resolved against the config file's directory.
  if (c.out.is_relative() && j.contains("out")) c.out = path.parent_path() / c.out;
  return c;
}

Experiment::Experiment(ExperimentConfig config, std::ostream& log) : config_(std::move(config)), log_(log) {
  // The global seed drives every stage.
  config_.world.seed = config_.seed;
  config_.sae.seed = config_.seed;
  config_.rmu.seed = config_.seed;
  config_.validate();
}

std::string Experiment::stage_hash(Stage stage) const {
  const auto& c = config_;
  json part;
  std::vector<Stage> deps;
  switch (stage) {
    case Stage::kGenWorld:
      part = c.world;
      break;
    case Stage::kTrainLm:
      part = {{"model", c.model}, {"train", c.train}, {"known_gate", c.known_gate}};
      deps = {Stage::kGenWorld};
      break;
    case Stage::kTrainSae:
      part = {{"sae_layer", c.sae_layer}, {"sae", c.sae}};
      deps = {Stage::kTrainLm};
      break;
    case Stage::kStats:
      deps = {Stage::kTrainSae};
      break;
    case Stage::kSelectSparsity:
      part = c.select_sparsity;
      deps = {Stage::kStats};
      break;
    case Stage::kSelectAttrib:
      part = c.select_attribution;
      deps = {Stage::kTrainSae};
      break;
    case Stage::kSweep:
      part = json(c).at("sweep");
      deps = {selection_stage(c.sweep.selection), Stage::kStats};
      break;
    case Stage::kEval:
      part = json(c).at("eval");
      deps = {selection_stage(c.eval.selection), Stage::kStats};
      break;
    case Stage::kRmu:
      part = c.rmu;
      deps = {Stage::kTrainLm};
      break;
    case Stage::kReport:
      deps = {Stage::kEval, Stage::kSweep, Stage::kRmu};
      break;
  }
  std::string text = stage_name(stage) + "|seed=" + std::to_string(c.seed) + "|" + part.dump();
  for (Stage d : deps) text += "|" + stage_hash(d);
  return hex64(fnv1a64(text));
}

namespace {

std::vector<Stage> dependencies(Stage stage, const ExperimentConfig& c) {
  switch (stage) {
    case Stage::kGenWorld: return {};
    case Stage::kTrainLm: return {Stage::kGenWorld};
    case Stage::kTrainSae: return {Stage::kTrainLm};
    case Stage::kStats: return {Stage::kTrainSae};
    case Stage::kSelectSparsity: return {Stage::kStats};
    case Stage::kSelectAttrib: return {Stage::kTrainSae};
    case Stage::kSweep: return {selection_stage(c.sweep.selection), Stage::kStats};
    case Stage::kEval: return {selection_stage(c.eval.selection), Stage::kStats};
    case Stage::kRmu: return {Stage::kTrainLm};
    case Stage::kReport: return {Stage::kEval, Stage::kSweep, Stage::kRmu};
  }
  return {};
}

std::filesystem::path stamp_path(const std::filesystem::path& out, Stage s) {
  return out / "stamps" / (stage_name(s) + ".json");
}

}  // namespace

bool Experiment::up_to_date(Stage stage) const {
  const auto sp = stamp_path(config_.out, stage);
  if (!std::filesystem::exists(sp)) return false;
  json st;
  try {
    st = read_json(sp);
  } catch (const std::exception&) {
    return false;
  }
  if (st.value("config_hash", std::string()) != stage_hash(stage)) return false;
  for (const auto& a : st.value("artifacts", std::vector<std::string>{})) {
    if (!std::filesystem::exists(config_.out / a)) return false;
  }
  return true;
}

void Experiment::require(Stage stage) const {
  for (Stage d : dependencies(stage, config_)) {
    if (!up_to_date(d)) {
      throw RuntimeError("stage '" + stage_name(stage) + "' needs the output of '" + stage_name(d) +
                         "' for this config: run `unlearn " + stage_name(d) + "` first");
    }
  }
}

void Experiment::stamp(Stage stage, const std::vector<std::string>& artifacts) const {
  write_json(stamp_path(config_.out, stage),
             {{"stage", stage_name(stage)}, {"config_hash", stage_hash(stage)}, {"seed", config_.seed},
              {"artifacts", artifacts}});
}

bool Experiment::run(Stage stage, bool force) {
  if (!force && up_to_date(stage)) {
    log_ << "[" << stage_name(stage) << "] up to date, skipped\n";
    return false;
  }
  require(stage);
  std::filesystem::create_directories(config_.out);
  log_ << "[" << stage_name(stage) << "] running\n";
  switch (stage) {
    case Stage::kGenWorld: gen_world(); break;
    case Stage::kTrainLm: train_lm(); break;
    case Stage::kTrainSae: train_sae(); break;
    case Stage::kStats: stats(); break;
    case Stage::kSelectSparsity: select_sparsity(); break;
    case Stage::kSelectAttrib: select_attrib(); break;
    case Stage::kSweep: sweep(); break;
    case Stage::kEval: eval(); break;
    case Stage::kRmu: rmu(); break;
    case Stage::kReport: report(); break;
  }
  log_ << "[" << stage_name(stage) << "] done\n";
  return true;
}

void Experiment::run_all(bool force) {
  for (Stage s : all_stages()) run(s, force);
}

json stamp_meta(const Experiment& e, Stage s) {
  return {{"config_hash", e.stage_hash(s)}, {"seed", e.config().seed}};
}

void Experiment::gen_world() {
  const auto w = generate_world(config_.world);
  save_world(w, path("world"));
  log_ << "  vocab " << w.tokenizer.size() << ", pretraining sequences " << w.pretrain_corpus.size() << ", questions "
       << w.forget_questions.size() << " forget / " << w.retain_questions.size() << " retain\n";
  stamp(Stage::kGenWorld, {"world/world.json", "world/vocab.txt", "world/pretrain.txt", "world/forget.txt",
                           "world/retain.txt", "world/held_out.txt", "world/forget_questions.jsonl",
                           "world/retain_questions.jsonl"});
}

void Experiment::train_lm() {
  const auto w = load_world(path("world"));
  ModelConfig mc = config_.model;
  mc.vocab_size = w.tokenizer.size();
  auto result = unlearn::train_lm(mc, w.pretrain_corpus, config_.train, config_.seed, [&](int step, double loss) {
    log_ << "  step " << step << " loss " << loss << '\n';
  });
  json meta = stamp_meta(*this, Stage::kTrainLm);
  meta["final_loss"] = result.final_loss;
  save_params(result.params, path("model.tlm"), meta);

  const auto kf = known_subset(result.params, w.tokenizer, w.forget_questions);
  const auto kr = known_subset(result.params, w.tokenizer, w.retain_questions);
  auto ids = [](const std::vector<McQuestion>& qs) {
    std::vector<std::string> out;
    for (const auto& q : qs) out.push_back(q.id);
    return out;
  };
  const double frac = w.forget_questions.empty() ? 0.0
                                                 : static_cast<double>(kf.size()) / static_cast<double>(w.forget_questions.size());
  json known = {{"forget", ids(kf)},
                {"retain", ids(kr)},
                {"forget_fraction", frac},
                {"retain_fraction", w.retain_questions.empty() ? 0.0
                                                               : static_cast<double>(kr.size()) / static_cast<double>(w.retain_questions.size())},
                {"gate", config_.known_gate},
                {"gate_passed", frac >= config_.known_gate},
                {"final_loss", result.final_loss},
                {"loss_curve", result.loss_curve},
                {"meta", meta}};
  write_json(path("known.json"), known);
  log_ << "  known forget " << kf.size() << "/" << w.forget_questions.size() << ", known retain " << kr.size() << "/"
       << w.retain_questions.size() << '\n';
  if (frac < config_.known_gate) {
    log_ << "  warning: known forget fraction " << frac << " is below the gate " << config_.known_gate << '\n';
  }
  stamp(Stage::kTrainLm, {"model.tlm", "known.json"});
}

void Experiment::train_sae() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  auto result = unlearn::train_sae(model, w.pretrain_corpus, config_.sae_layer, config_.sae);
  const double added = sae_loss_added(model, result.sae, w.held_out_corpus);
  json meta = stamp_meta(*this, Stage::kTrainSae);
  meta["mse"] = result.final_mse;
  meta["l0"] = result.final_l0;
  meta["reconstruction_loss_added"] = added;
  save_sae(result.sae, path("sae.tlm"), meta);
  write_json(path("sae.json"), {{"mse", result.final_mse},
                                {"l0", result.final_l0},
                                {"reconstruction_loss_added", added},
                                {"loss_curve", result.loss_curve},
                                {"meta", meta}});
  log_ << "  mse " << result.final_mse << ", L0 " << result.final_l0 << ", reconstruction loss added " << added << '\n';
  stamp(Stage::kTrainSae, {"sae.tlm", "sae.json"});
}

void Experiment::stats() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  const auto sae = load_sae(path("sae.tlm"));
  std::vector<TokenSeq> reference = w.forget_corpus;
  reference.insert(reference.end(), w.retain_corpus.begin(), w.retain_corpus.end());
  const auto s = feature_stats(model, sae, w.forget_corpus, w.retain_corpus, reference);
  json j = s;
  j["meta"] = stamp_meta(*this, Stage::kStats);
  write_json(path("stats.json"), j);
  stamp(Stage::kStats, {"stats.json"});
}

namespace {

FeatureStats load_stats(const std::filesystem::path& p) { return read_json(p).get<FeatureStats>(); }

}  // namespace

void Experiment::select_sparsity() {
  const auto s = load_stats(path("stats.json"));
  auto report = select_by_sparsity(s, config_.select_sparsity);
  report.details["meta"] = stamp_meta(*this, Stage::kSelectSparsity);
  save_selection(report, path("selection_sparsity.json"));
  write_sparsity_scatter_csv(s, report, path("sparsity_scatter.csv"));
  log_ << "  selected " << report.chosen.size() << " features\n";
  stamp(Stage::kSelectSparsity, {"selection_sparsity.json", "sparsity_scatter.csv"});
}

void Experiment::select_attrib() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  const auto sae = load_sae(path("sae.tlm"));
  const json known = read_json(path("known.json"));
  const auto kf = by_ids(w.forget_questions, known.at("forget").get<std::vector<std::string>>());
  const auto kr = by_ids(w.retain_questions, known.at("retain").get<std::vector<std::string>>());
  auto report = select_by_attribution(model, sae, w.tokenizer, kf, kr, w.held_out_corpus, config_.select_attribution);
  report.details["meta"] = stamp_meta(*this, Stage::kSelectAttrib);
  save_selection(report, path("selection_attribution.json"));
  log_ << "  selected " << report.chosen.size() << " features\n";
  stamp(Stage::kSelectAttrib, {"selection_attribution.json"});
}

void Experiment::sweep() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  const auto sae = load_sae(path("sae.tlm"));
  const json known = read_json(path("known.json"));
  const auto kf = by_ids(w.forget_questions, known.at("forget").get<std::vector<std::string>>());
  const auto kr = by_ids(w.retain_questions, known.at("retain").get<std::vector<std::string>>());
  if (kf.empty() || kr.empty()) throw RuntimeError("sweep: known subset is empty, the model did not learn the questions");
  const auto selection = load_selection(path(selection_file(config_.sweep.selection)));
  const auto& sw = config_.sweep;

  auto eval_spec = [&](const InterventionSpec& spec, const std::string& id) {
    const Hook<float> hook = build_hook(sae, spec);
    const HookList hooks(&hook, 1);
    FrontierRow r;
    r.config_id = id;
    r.n_features = static_cast<int>(spec.features.size());
    r.forget_rel_acc = relative_accuracy(model, w.tokenizer, kf, hooks);
    r.retain_rel_acc = relative_accuracy(model, w.tokenizer, kr, hooks);
    r.loss_added = loss_added(model, hooks, w.held_out_corpus);
    return r;
  };

  std::vector<FrontierRow> rows, random_rows;
  for (int n : sw.n_features) {
    const auto feats = first_n(selection.chosen, n);
    if (feats.empty()) {
      log_ << "  selection is empty, no intervention rows\n";
      break;
    }
    InterventionSpec spec;
    spec.layer = sae.layer;
    spec.features = feats;
    spec.mode = ZeroAblate{};
    auto zr = eval_spec(spec, "zero-n" + std::to_string(n));
    zr.clamp_value = 0.0;
    rows.push_back(zr);
    for (double c : sw.clamp_values) {
      spec.mode = ClampNeg{c};
      auto r = eval_spec(spec, "clamp-n" + std::to_string(n) + "-c" + format_number(c));
      r.clamp_value = -c;
      rows.push_back(r);
      log_ << "  " << r.config_id << " forget " << r.forget_rel_acc << " retain " << r.retain_rel_acc << " loss "
           << r.loss_added << '\n';
      if (sw.random_decoder) {
        InterventionSpec rs = spec;
        rs.mode = random_decoder(c, feats, sae.n_features(), sw.random_decoder_seed);
        auto rr = eval_spec(rs, "random-n" + std::to_string(n) + "-c" + format_number(c));
        rr.clamp_value = -c;
        random_rows.push_back(rr);
      }
    }
  }

  for (int layer : sw.rmu_layers) {
    for (double c : sw.rmu_coefficients) {
      for (double a : sw.rmu_alphas) {
        RmuConfig rc = config_.rmu;
        rc.layer = layer;
        rc.steering_coefficient = c;
        rc.alpha = a;
        const auto res = rmu_finetune(model, w.forget_corpus, w.retain_corpus, rc);
        FrontierRow r;
        r.config_id = "rmu-l" + std::to_string(layer) + "-c" + format_number(c) + "-a" + format_number(a);
        r.n_features = 0;
        r.clamp_value = c;
        r.forget_rel_acc = relative_accuracy(res.params, w.tokenizer, kf);
        r.retain_rel_acc = relative_accuracy(res.params, w.tokenizer, kr);
        r.loss_added = loss_added(model, res.params, w.held_out_corpus);
        rows.push_back(r);
        log_ << "  " << r.config_id << " forget " << r.forget_rel_acc << " retain " << r.retain_rel_acc << " loss "
             << r.loss_added << '\n';
      }
    }
  }

  write_frontier_csv(rows, path("frontier.csv"));
  write_frontier_csv(random_rows, path("frontier_random_decoder.csv"));
  json j = {{"rows", json::array()}, {"random_decoder_rows", json::array()}, {"meta", stamp_meta(*this, Stage::kSweep)}};
  for (const auto& r : rows) j["rows"].push_back(row_json(r));
  for (const auto& r : random_rows) j["random_decoder_rows"].push_back(row_json(r));
  write_json(path("sweep.json"), j);
  stamp(Stage::kSweep, {"frontier.csv", "frontier_random_decoder.csv", "sweep.json"});
}

void Experiment::eval() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  const auto sae = load_sae(path("sae.tlm"));
  const auto st = load_stats(path("stats.json"));
  const json known = read_json(path("known.json"));
  const auto kf = by_ids(w.forget_questions, known.at("forget").get<std::vector<std::string>>());
  const auto kr = by_ids(w.retain_questions, known.at("retain").get<std::vector<std::string>>());
  const auto selection = load_selection(path(selection_file(config_.eval.selection)));
  const auto& ev = config_.eval;
  const auto feats = first_n(selection.chosen, ev.n_features);

  json out = {{"meta", stamp_meta(*this, Stage::kEval)},
              {"known_forget", kf.size()},
              {"known_retain", kr.size()},
              {"features", feats}};
  if (kf.empty() || kr.empty()) throw RuntimeError("eval: known subset is empty, the model did not learn the questions");
  out["baseline_letter_distribution"] = letter_distribution(model, w.tokenizer, kf);

  auto run_mode = [&](const InterventionMode& mode, const char* name) {
    InterventionSpec spec;
    spec.layer = sae.layer;
    spec.features = feats;
    spec.mode = mode;
    const Hook<float> hook = build_hook(sae, spec);
    const auto r = evaluate(model, w.tokenizer, kf, kr, w.held_out_corpus, HookList(&hook, 1), spec);
    log_ << "  " << name << ": forget " << r.forget_relative_accuracy << " retain " << r.retain_relative_accuracy
         << " loss added " << r.loss_added << '\n';
    return json(r);
  };
  out["clamp"] = run_mode(ClampNeg{ev.clamp}, "clamp");
  out["zero_ablate"] = run_mode(ZeroAblate{}, "zero ablate");
  out["scale"] = run_mode(ScaleNeg{ev.clamp}, "scale");
  out["clamp_max_multiple"] = run_mode(clamp_max_multiple(1.0, feats, st), "clamp max multiple");
  if (feats.size() * 2 <= static_cast<std::size_t>(sae.n_features())) {
    out["random_decoder"] =
        run_mode(random_decoder(ev.clamp, feats, sae.n_features(), config_.sweep.random_decoder_seed), "random decoder");
  }

  // Single-feature clamp sweep on the first known forget question where the top feature fires.
  if (!feats.empty()) {
    const int top = feats.front();
    const McQuestion* target = &kf.front();
    for (const auto& q : kf) {
      const auto prompt = render(w.tokenizer, PromptTemplate{}, q);
      const MatrixF f = encode(sae, residual_at<float>(model, prompt.tokens, sae.layer));
      if ((f.col(top).array() > 0.0f).any()) {
        target = &q;
        break;
      }
    }
    const auto points = clamp_sweep(model, sae, w.tokenizer, top, *target, ev.sweep_values, w.held_out_corpus);
    write_sweep_csv(points, path("clamp_sweep.csv"));
    json sweep_json = json::array();
    for (const auto& p : points) {
      sweep_json.push_back({{"clamp_value", p.clamp_value}, {"probs", p.probs}, {"logits", p.logits}, {"loss_added", p.loss_added}});
    }
    out["clamp_sweep"] = {{"feature", top}, {"question", target->id}, {"points", sweep_json}};

    json examples = json::array();
    for (int f : feats) {
      json ex = json::array();
      for (const auto& e : max_activating_examples(model, sae, w.pretrain_corpus, f, 3, 6)) {
        ex.push_back({{"activation", e.activation}, {"text", w.tokenizer.decode(e.context)}});
      }
      examples.push_back({{"feature", f}, {"examples", ex}});
    }
    out["max_activating_examples"] = examples;
  } else {
    write_sweep_csv({}, path("clamp_sweep.csv"));
  }

  // Dataset diagnostics.
  const auto blind = question_blind_score(model, w.tokenizer, kf);
  int blind_all = 0;
  json blind_json = json::array();
  for (std::size_t i = 0; i < kf.size(); ++i) {
    blind_all += blind[i] == 24;
    blind_json.push_back({{"id", kf[i].id}, {"score", blind[i]}, {"unique_longest", has_unique_longest_option(kf[i])}});
  }
  out["diagnostics"] = {{"longest_answer_fraction_forget", longest_answer_fraction(w.forget_questions)},
                        {"longest_answer_fraction_retain", longest_answer_fraction(w.retain_questions)},
                        {"blind_all24_fraction", static_cast<double>(blind_all) / static_cast<double>(kf.size())},
                        {"blind_scores", blind_json}};
  write_json(path("eval.json"), out);
  stamp(Stage::kEval, {"eval.json", "clamp_sweep.csv"});
}

void Experiment::rmu() {
  const auto w = load_world(path("world"));
  const auto model = load_params(path("model.tlm"));
  const json known = read_json(path("known.json"));
  const auto kf = by_ids(w.forget_questions, known.at("forget").get<std::vector<std::string>>());
  const auto kr = by_ids(w.retain_questions, known.at("retain").get<std::vector<std::string>>());
  const auto res = rmu_finetune(model, w.forget_corpus, w.retain_corpus, config_.rmu);
  const json meta = stamp_meta(*this, Stage::kRmu);
  save_params(res.params, path("rmu.tlm"), meta);
  json j = {{"config", config_.rmu},
            {"activation_rms", res.rms},
            {"final_loss", {{"forget", res.final_loss.forget}, {"retain", res.final_loss.retain}, {"total", res.final_loss.total}}},
            {"log", res.log},
            {"meta", meta}};
  if (!kf.empty() && !kr.empty()) {
    j["eval"] = evaluate(model, res.params, w.tokenizer, kf, kr, w.held_out_corpus, config_.rmu);
    log_ << "  forget " << j["eval"]["forget_relative_accuracy"] << " retain " << j["eval"]["retain_relative_accuracy"]
         << " loss added " << j["eval"]["loss_added"] << '\n';
  }
  write_json(path("rmu_log.json"), j);
  stamp(Stage::kRmu, {"rmu.tlm", "rmu_log.json"});
}

void Experiment::report() {
  const json known = read_json(path("known.json"));
  const json sae = read_json(path("sae.json"));
  const json ev = read_json(path("eval.json"));
  const json sw = read_json(path("sweep.json"));
  const json rm = read_json(path("rmu_log.json"));

  json stages = json::object();
  for (Stage s : all_stages()) {
    if (s == Stage::kReport) continue;
    if (s == selection_stage("sparsity") || s == selection_stage("attribution")) {
      if (s != selection_stage(config_.eval.selection) && s != selection_stage(config_.sweep.selection)) continue;
    }
    stages[stage_name(s)] = stage_hash(s);
  }

  // Random-decoder comparison at the eval operating point, at matched loss added.
  json comparison = {{"available", false}};
  std::vector<FrontierRow> true_curve, random_curve;
  const int n_eval = static_cast<int>(ev.at("features").size());
  for (const auto& r : sw.at("random_decoder_rows")) {
    auto row = row_from_json(r);
    if (row.n_features == n_eval) random_curve.push_back(row);
  }
  for (const auto& r : sw.at("rows")) {
    auto row = row_from_json(r);
    if (row.n_features == n_eval && row.config_id.rfind("clamp-", 0) == 0) true_curve.push_back(row);
  }
  if (!random_curve.empty() && ev.contains("clamp")) {
    const double true_forget = ev["clamp"]["forget_relative_accuracy"].get<double>();
    const double true_loss = ev["clamp"]["loss_added"].get<double>();
    const double random_forget = accuracy_at_loss(random_curve, true_loss);
    const bool less = random_forget > true_forget;
    comparison = {{"available", true},
                  {"n_features", n_eval},
                  {"loss_added", true_loss},
                  {"true_decoder_forget_rel_acc", true_forget},
                  {"random_decoder_forget_rel_acc_at_matched_loss", random_forget},
                  {"random_decoder_less_unlearning", less},
                  {"random_decoder_exception", !less}};
  }

  json r = {{"seed", config_.seed},
            {"stages", stages},
            {"known",
             {{"forget", known.at("forget").size()},
              {"retain", known.at("retain").size()},
              {"forget_fraction", known.at("forget_fraction")},
              {"gate_passed", known.at("gate_passed")},
              {"final_lm_loss", known.at("final_loss")}}},
            {"sae",
             {{"mse", sae.at("mse")}, {"l0", sae.at("l0")}, {"reconstruction_loss_added", sae.at("reconstruction_loss_added")}}},
            {"features", ev.at("features")},
            {"baseline_letter_distribution", ev.at("baseline_letter_distribution")}};
  for (const char* k : {"clamp", "zero_ablate", "scale", "clamp_max_multiple", "random_decoder"}) {
    if (!ev.contains(k)) continue;
    json e = ev[k];
    e.erase("permutation_scores");
    r["interventions"][k] = e;
  }
  r["random_decoder_comparison"] = comparison;
  r["rmu"] = {{"config", rm.at("config")}, {"eval", rm.value("eval", json(nullptr))}};
  r["diagnostics"] = {{"longest_answer_fraction_forget", ev["diagnostics"]["longest_answer_fraction_forget"]},
                      {"blind_all24_fraction", ev["diagnostics"]["blind_all24_fraction"]}};
  r["frontier"] = sw.at("rows");
  r["frontier_random_decoder"] = sw.at("random_decoder_rows");
  write_json(path("report.json"), r);
  stamp(Stage::kReport, {"report.json"});
}

}  // namespace unlearn
