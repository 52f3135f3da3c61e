#include "unlearn/sae.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "unlearn/weights_io.hpp"
#include "adam.hpp"

namespace unlearn {

using nlohmann::json;

void SaeParams::validate() const {
  const auto F = W_dec.rows();
  const auto d = W_dec.cols();
  if (F == 0 || d == 0) throw ValidationError("sae: empty dictionary");
  if (W_enc.rows() != d || W_enc.cols() != F || b_enc.size() != F || b_dec.size() != d) {
    throw ValidationError("sae: inconsistent shapes");
  }
  if (!W_enc.allFinite() || !W_dec.allFinite() || !b_enc.allFinite() || !b_dec.allFinite()) {
    throw ValidationError("sae: non-finite parameters");
  }
  if (layer < 0) throw ValidationError("sae: negative layer");
}

MatrixF encode(const SaeParams& sae, const MatrixF& x) {
  if (x.cols() != sae.d_model()) throw ValidationError("sae encode: activation width does not match d_model");
  MatrixF pre = (x.rowwise() - sae.b_dec) * sae.W_enc;
  pre.rowwise() += sae.b_enc;
  return pre.cwiseMax(0.0f);
}

MatrixF decode(const SaeParams& sae, const MatrixF& f) {
  if (f.cols() != sae.n_features()) throw ValidationError("sae decode: feature width does not match F");
  MatrixF out = f * sae.W_dec;
  out.rowwise() += sae.b_dec;
  return out;
}

void to_json(json& j, const SaeTrainConfig& c) {
  j = json{{"n_features", c.n_features}, {"l1_coefficient", c.l1_coefficient}, {"learning_rate", c.learning_rate},
           {"steps", c.steps},           {"batch_size", c.batch_size},         {"seed", c.seed},
           {"log_every", c.log_every}};
}

void from_json(const json& j, SaeTrainConfig& c) {
  SaeTrainConfig d;
  c.n_features = j.value("n_features", d.n_features);
  c.l1_coefficient = j.value("l1_coefficient", d.l1_coefficient);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.log_every = j.value("log_every", d.log_every);
}

MatrixF collect_activations(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer) {
  std::vector<MatrixF> per_seq(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { per_seq[i] = residual_at<float>(model, corpus[i], layer); });
  Eigen::Index rows = 0;
  for (const auto& m : per_seq) rows += std::max<Eigen::Index>(0, m.rows() - 1);
  MatrixF out(rows, model.config.d_model);
  Eigen::Index r = 0;
  for (const auto& m : per_seq) {
    if (m.rows() <= 1) continue;
    out.middleRows(r, m.rows() - 1) = m.bottomRows(m.rows() - 1);
    r += m.rows() - 1;
  }
  return out;
}

namespace {

using detail::Adam;

void normalize_rows(MatrixF& w) {
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const float n = w.row(i).norm();
    if (n > 0.0f) w.row(i) /= n;
  }
}

}  // namespace

std::pair<double, double> reconstruction_metrics(const SaeParams& sae, const MatrixF& activations) {
  if (activations.rows() == 0) return {0.0, 0.0};
  double se = 0.0, l0 = 0.0;
  const Eigen::Index chunk = 4096;
  for (Eigen::Index r = 0; r < activations.rows(); r += chunk) {
    const auto n = std::min(chunk, activations.rows() - r);
    const MatrixF x = activations.middleRows(r, n);
    const MatrixF f = encode(sae, x);
    se += static_cast<double>((decode(sae, f) - x).squaredNorm());
    l0 += static_cast<double>((f.array() > 0.0f).count());
  }
  const auto n = static_cast<double>(activations.rows());
  return {se / n, l0 / n};
}

SaeTrainResult train_sae_on_activations(const MatrixF& acts, int layer, const SaeTrainConfig& cfg) {
  if (acts.rows() == 0) throw ValidationError("train_sae: no activations");
  if (cfg.l1_coefficient < 0.0) throw ValidationError("train_sae: l1 coefficient must be non-negative");
  if (cfg.n_features <= 0 || cfg.batch_size <= 0 || cfg.steps < 0) throw ValidationError("train_sae: bad sizes");
  const auto d = acts.cols();
  const Eigen::Index F = cfg.n_features;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  SaeTrainResult res;
  auto& sae = res.sae;
  sae.layer = layer;
  sae.W_dec.resize(F, d);
  for (Eigen::Index i = 0; i < sae.W_dec.size(); ++i) sae.W_dec.data()[i] = normal(rng);
  normalize_rows(sae.W_dec);
  sae.W_enc = sae.W_dec.transpose();
  sae.b_enc = RowVectorF::Zero(F);
  sae.b_dec = acts.colwise().mean();

  Adam adam{cfg.learning_rate};
  const auto B = static_cast<Eigen::Index>(cfg.batch_size);
  const auto lambda = static_cast<float>(cfg.l1_coefficient);
  MatrixF x(B, d);
  for (int step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index b = 0; b < B; ++b) {
      x.row(b) = acts.row(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(acts.rows())));
    }
    const MatrixF centered = x.rowwise() - sae.b_dec;
    MatrixF pre = centered * sae.W_enc;
    pre.rowwise() += sae.b_enc;
    const MatrixF f = pre.cwiseMax(0.0f);
    MatrixF err = f * sae.W_dec;
    err.rowwise() += sae.b_dec;
    err -= x;
    const float inv_b = 1.0f / static_cast<float>(B);
    const double loss = (err.squaredNorm() + lambda * f.sum()) * inv_b;
    if (!std::isfinite(loss)) throw RuntimeError("train_sae: non-finite loss at step " + std::to_string(step));

    const MatrixF d_out = 2.0f * inv_b * err;
    MatrixF d_f = d_out * sae.W_dec.transpose();
    d_f.array() += lambda * inv_b;
    const MatrixF d_pre = (pre.array() > 0.0f).select(d_f, 0.0f);
    std::vector<MatrixF> grads = {centered.transpose() * d_pre, d_pre.colwise().sum(), f.transpose() * d_out,
                                  d_out.colwise().sum() - (d_pre * sae.W_enc.transpose()).colwise().sum()};
    std::vector<MatrixF*> params;
    MatrixF b_enc = sae.b_enc, b_dec = sae.b_dec;
    params = {&sae.W_enc, &b_enc, &sae.W_dec, &b_dec};
    adam.step(params, grads);
    sae.b_enc = b_enc;
    sae.b_dec = b_dec;
    normalize_rows(sae.W_dec);
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      res.loss_curve.emplace_back(step, loss);
    }
  }
  std::tie(res.final_mse, res.final_l0) = reconstruction_metrics(sae, acts);
  return res;
}

SaeTrainResult train_sae(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer,
                         const SaeTrainConfig& config) {
  if (layer < 0 || layer > model.config.n_layers) throw ValidationError("train_sae: layer out of range");
  return train_sae_on_activations(collect_activations(model, corpus, layer), layer, config);
}

void FeatureStats::validate() const {
  const auto F = sparsity_forget.size();
  if (sparsity_retain.size() != F || max_activation.size() != F) throw ValidationError("feature stats: size mismatch");
  for (std::size_t i = 0; i < F; ++i) {
    if (!(sparsity_forget[i] >= 0.0 && sparsity_forget[i] <= 1.0 && sparsity_retain[i] >= 0.0 &&
          sparsity_retain[i] <= 1.0 && max_activation[i] >= 0.0f)) {
      throw ValidationError("feature stats: value out of range for feature " + std::to_string(i));
    }
  }
}

void to_json(json& j, const FeatureStats& s) {
  j = json{{"sparsity_forget", s.sparsity_forget}, {"sparsity_retain", s.sparsity_retain},
           {"max_activation", s.max_activation},   {"tokens_forget", s.tokens_forget},
           {"tokens_retain", s.tokens_retain},     {"tokens_reference", s.tokens_reference}};
}

void from_json(const json& j, FeatureStats& s) {
  s.sparsity_forget = j.at("sparsity_forget").get<std::vector<double>>();
  s.sparsity_retain = j.at("sparsity_retain").get<std::vector<double>>();
  s.max_activation = j.at("max_activation").get<std::vector<float>>();
  s.tokens_forget = j.value("tokens_forget", std::size_t{0});
  s.tokens_retain = j.value("tokens_retain", std::size_t{0});
  s.tokens_reference = j.value("tokens_reference", std::size_t{0});
}

namespace {

struct CorpusCounts {
  std::vector<std::size_t> fired;
  std::vector<float> max_act;
  std::size_t tokens = 0;
};

CorpusCounts count_firing(const ModelParams& model, const SaeParams& sae, const std::vector<TokenSeq>& corpus) {
  const auto F = static_cast<std::size_t>(sae.n_features());
  std::vector<CorpusCounts> per_seq(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    auto& c = per_seq[i];
    c.fired.assign(F, 0);
    c.max_act.assign(F, 0.0f);
    const MatrixF x = residual_at<float>(model, corpus[i], sae.layer);
    if (x.rows() <= 1) return;
    const MatrixF f = encode(sae, x.bottomRows(x.rows() - 1));
    c.tokens = static_cast<std::size_t>(f.rows());
    for (Eigen::Index t = 0; t < f.rows(); ++t) {
      for (std::size_t k = 0; k < F; ++k) {
        const float v = f(t, static_cast<Eigen::Index>(k));
        if (v > 0.0f) ++c.fired[k];
        c.max_act[k] = std::max(c.max_act[k], v);
      }
    }
  });
  CorpusCounts total;
  total.fired.assign(F, 0);
  total.max_act.assign(F, 0.0f);
  for (const auto& c : per_seq) {
    total.tokens += c.tokens;
    for (std::size_t k = 0; k < F && !c.fired.empty(); ++k) {
      total.fired[k] += c.fired[k];
      total.max_act[k] = std::max(total.max_act[k], c.max_act[k]);
    }
  }
  return total;
}

}  // namespace

FeatureStats feature_stats(const ModelParams& model, const SaeParams& sae, const std::vector<TokenSeq>& forget_corpus,
                           const std::vector<TokenSeq>& retain_corpus, const std::vector<TokenSeq>& reference_corpus) {
  if (forget_corpus.empty() || retain_corpus.empty() || reference_corpus.empty()) {
    throw ValidationError("feature_stats: corpora must be non-empty");
  }
  const auto forget = count_firing(model, sae, forget_corpus);
  const auto retain = count_firing(model, sae, retain_corpus);
  const auto reference = count_firing(model, sae, reference_corpus);
  if (forget.tokens == 0 || retain.tokens == 0) throw ValidationError("feature_stats: corpora have no tokens");
  FeatureStats s;
  s.tokens_forget = forget.tokens;
  s.tokens_retain = retain.tokens;
  s.tokens_reference = reference.tokens;
  for (std::size_t k = 0; k < forget.fired.size(); ++k) {
    s.sparsity_forget.push_back(static_cast<double>(forget.fired[k]) / static_cast<double>(forget.tokens));
    s.sparsity_retain.push_back(static_cast<double>(retain.fired[k]) / static_cast<double>(retain.tokens));
  }
  s.max_activation = reference.max_act;
  return s;
}

std::vector<ActivatingExample> max_activating_examples(const ModelParams& model, const SaeParams& sae,
                                                       const std::vector<TokenSeq>& corpus, int feature, int k,
                                                       int window) {
  if (k < 1) throw ValidationError("max_activating_examples: k must be at least 1");
  if (feature < 0 || feature >= sae.n_features()) throw ValidationError("max_activating_examples: bad feature id");
  if (window < 0) throw ValidationError("max_activating_examples: negative window");
  std::vector<std::vector<ActivatingExample>> per_seq(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const MatrixF x = residual_at<float>(model, corpus[i], sae.layer);
    const MatrixF f = encode(sae, x);
    for (Eigen::Index t = 1; t < f.rows(); ++t) {
      const float a = f(t, feature);
      if (a > 0.0f) per_seq[i].push_back({i, static_cast<int>(t), a, 0, {}});
    }
  });
  std::vector<ActivatingExample> all;
  for (auto& v : per_seq) all.insert(all.end(), v.begin(), v.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    if (a.sequence != b.sequence) return a.sequence < b.sequence;
    return a.position < b.position;
  });
  if (all.size() > static_cast<std::size_t>(k)) all.resize(static_cast<std::size_t>(k));
  for (auto& ex : all) {
    const auto& seq = corpus[ex.sequence];
    const int lo = std::max(0, ex.position - window);
    const int hi = std::min(static_cast<int>(seq.size()), ex.position + window + 1);
    ex.window_start = lo;
    ex.context.assign(seq.begin() + lo, seq.begin() + hi);
  }
  return all;
}

Hook<float> reconstruction_hook(const SaeParams& sae) {
  auto shared = std::make_shared<const SaeParams>(sae);
  return {sae.layer, [shared](const MatrixF& x) {
            const auto& sae = *shared;
            MatrixF out = x;
            if (x.rows() > 1) out.bottomRows(x.rows() - 1) = decode(sae, encode(sae, x.bottomRows(x.rows() - 1)));
            return out;
          }};
}

double sae_loss_added(const ModelParams& model, const SaeParams& sae, const std::vector<TokenSeq>& corpus) {
  const double base = corpus_cross_entropy(model, corpus);
  const Hook<float> hooks[] = {reconstruction_hook(sae)};
  return corpus_cross_entropy(model, corpus, hooks) - base;
}

void save_sae(const SaeParams& sae, const std::filesystem::path& path, const json& meta) {
  sae.validate();
  TensorFile file;
  file.header = {{"kind", "sae"}, {"layer", sae.layer}, {"d_model", sae.d_model()}, {"n_features", sae.n_features()}};
  if (!meta.is_null()) file.header["meta"] = meta;
  file.names = {"W_enc", "b_enc", "W_dec", "b_dec"};
  file.tensors = {sae.W_enc, sae.b_enc, sae.W_dec, sae.b_dec};
  write_tensor_file(file, path);
}

SaeParams load_sae(const std::filesystem::path& path, json* meta) {
  auto file = read_tensor_file(path);
  if (file.header.value("kind", "") != "sae") throw ValidationError(path.string() + ": not an SAE weights file");
  const std::vector<std::string> expected = {"W_enc", "b_enc", "W_dec", "b_dec"};
  if (file.names != expected) throw ValidationError(path.string() + ": unexpected SAE tensor names");
  SaeParams sae;
  sae.layer = file.header.at("layer").get<int>();
  sae.W_enc = std::move(file.tensors[0]);
  sae.b_enc = file.tensors[1];
  sae.W_dec = std::move(file.tensors[2]);
  sae.b_dec = file.tensors[3];
  try {
    sae.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (meta) *meta = file.header.value("meta", json());
  return sae;
}

}  // namespace unlearn
