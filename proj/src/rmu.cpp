#include "unlearn/rmu.hpp"

#include <cmath>
#include <random>

#include "adam.hpp"

namespace unlearn {

std::vector<int> RmuConfig::blocks(const ModelConfig& model) const {
  if (!trainable_blocks.empty()) return trainable_blocks;
  std::vector<int> out;
  for (int b = layer - 3; b < layer; ++b) {
    if (b >= 0 && b < model.n_layers) out.push_back(b);
  }
  return out;
}

void RmuConfig::validate(const ModelConfig& model) const {
  if (layer < 1 || layer > model.n_layers) {
    throw ValidationError("rmu layer must be in [1, " + std::to_string(model.n_layers) + "]");
  }
  if (trainable_blocks.empty() && layer < 3) {
    throw ValidationError("rmu layer must be >= 3 with the default trainable blocks");
  }
  if (!std::isfinite(steering_coefficient) || steering_coefficient <= 0.0) {
    throw ValidationError("rmu steering coefficient must be finite and > 0");
  }
  if (!std::isfinite(alpha) || alpha < 0.0) throw ValidationError("rmu alpha must be finite and >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("rmu learning rate must be > 0");
  if (steps < 0 || batch_size < 1) throw ValidationError("rmu steps >= 0 and batch_size >= 1 required");
  for (int b : trainable_blocks) {
    if (b < 0 || b >= layer) throw ValidationError("rmu trainable block " + std::to_string(b) + " does not feed layer");
  }
}

void to_json(nlohmann::json& j, const RmuConfig& c) {
  j = {{"layer", c.layer},
       {"steering_coefficient", c.steering_coefficient},
       {"alpha", c.alpha},
       {"seed", c.seed},
       {"learning_rate", c.learning_rate},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"trainable_blocks", c.trainable_blocks}};
}

void from_json(const nlohmann::json& j, RmuConfig& c) {
  const RmuConfig d;
  c.layer = j.value("layer", d.layer);
  c.steering_coefficient = j.value("steering_coefficient", d.steering_coefficient);
  c.alpha = j.value("alpha", d.alpha);
  c.seed = j.value("seed", d.seed);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.trainable_blocks = j.value("trainable_blocks", d.trainable_blocks);
}

std::set<std::string> rmu_trainable_names(const ModelConfig& model, const RmuConfig& cfg) {
  std::set<std::string> out;
  for (int b : cfg.blocks(model)) {
    out.insert("blocks." + std::to_string(b) + ".mlp.w_in");
    out.insert("blocks." + std::to_string(b) + ".mlp.w_out");
  }
  return out;
}

VectorF rmu_direction(int d_model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  VectorF u(d_model);
  for (int i = 0; i < d_model; ++i) u(i) = uni(rng);
  return u / u.norm();
}

double activation_rms(const ModelParams& model, const std::vector<TokenSeq>& corpus, int layer) {
  std::vector<double> sums(corpus.size(), 0.0);
  std::vector<std::size_t> counts(corpus.size(), 0);
  parallel_for(corpus.size(), [&](std::size_t i) {
    const MatrixF h = residual_at<float>(model, corpus[i], layer);
    for (Eigen::Index t = 1; t < h.rows(); ++t) sums[i] += static_cast<double>(h.row(t).squaredNorm());
    counts[i] = static_cast<std::size_t>(std::max<Eigen::Index>(h.rows() - 1, 0));
  });
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    s += sums[i];
    n += counts[i];
  }
  if (n == 0) throw ValidationError("activation_rms: corpus has no tokens after <bos>");
  return std::sqrt(s / static_cast<double>(n));
}

namespace {

std::size_t token_count(const std::vector<TokenSeq>& batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.size() > 1 ? s.size() - 1 : 0;
  return n;
}

// Sum over tokens (position 0 excluded) of |h - ref|^2, with the gradient
// scale * 2 (h - ref) injected when `grads` is non-null.
struct PartResult {
  double sq = 0.0;
  ModelParams grad;
};

std::vector<PartResult> part(const ModelParams& params, const ModelParams* frozen, const std::vector<TokenSeq>& batch,
                             int layer, const VectorF& target, double scale, const std::set<std::string>* trainable) {
  std::vector<PartResult> out(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& seq = batch[i];
    const MatrixF h = residual_at<float>(params, seq, layer);
    MatrixF diff;
    if (frozen) {
      diff = h - residual_at<float>(*frozen, seq, layer);
    } else {
      diff = h.rowwise() - target.transpose();
    }
    diff.row(0).setZero();
    out[i].sq = static_cast<double>(diff.cast<double>().squaredNorm());
    if (trainable) {
      const MatrixF cot = static_cast<float>(2.0 * scale) * diff;
      out[i].grad = grad_params_from_residual<float>(params, seq, layer, cot, *trainable);
    }
  });
  return out;
}

double sum_sq(const std::vector<PartResult>& parts) {
  double s = 0.0;
  for (const auto& p : parts) s += p.sq;
  return s;
}

std::vector<TokenSeq> cyclic_batch(const std::vector<TokenSeq>& corpus, int step, int batch_size) {
  std::vector<TokenSeq> out;
  const auto n = corpus.size();
  for (int j = 0; j < batch_size; ++j) {
    out.push_back(corpus[(static_cast<std::size_t>(step) * static_cast<std::size_t>(batch_size) + static_cast<std::size_t>(j)) % n]);
  }
  return out;
}

}  // namespace

RmuLoss rmu_loss(const ModelParams& params, const ModelParams& frozen, const std::vector<TokenSeq>& forget,
                 const std::vector<TokenSeq>& retain, int layer, const VectorF& target, double alpha) {
  RmuLoss l;
  const auto nf = token_count(forget), nr = token_count(retain);
  if (nf == 0 || nr == 0) throw ValidationError("rmu_loss: empty corpus");
  l.forget = sum_sq(part(params, nullptr, forget, layer, target, 0.0, nullptr)) / static_cast<double>(nf);
  l.retain = sum_sq(part(params, &frozen, retain, layer, target, 0.0, nullptr)) / static_cast<double>(nr);
  l.total = l.forget + alpha * l.retain;
  return l;
}

RmuResult rmu_finetune(const ModelParams& model, const std::vector<TokenSeq>& forget_corpus,
                       const std::vector<TokenSeq>& retain_corpus, const RmuConfig& cfg) {
  cfg.validate(model.config);
  if (token_count(forget_corpus) == 0 || token_count(retain_corpus) == 0) {
    throw ValidationError("rmu: forget and retain corpora must be nonempty");
  }
  RmuResult res;
  res.params = model;
  res.rms = activation_rms(model, forget_corpus, cfg.layer);
  res.target = static_cast<float>(cfg.steering_coefficient * res.rms) * rmu_direction(model.config.d_model, cfg.seed);
  res.log = nlohmann::json::array();

  const auto names = rmu_trainable_names(model.config, cfg);
  std::vector<int> indices;
  for (const auto& n : names) indices.push_back(model.index_of(n));
  detail::Adam adam{cfg.learning_rate};

  for (int step = 0; step < cfg.steps; ++step) {
    const auto fb = cyclic_batch(forget_corpus, step, cfg.batch_size);
    const auto rb = cyclic_batch(retain_corpus, step, cfg.batch_size);
    const auto nf = static_cast<double>(token_count(fb));
    const auto nr = static_cast<double>(token_count(rb));
    const auto fparts = part(res.params, nullptr, fb, cfg.layer, res.target, 1.0 / nf, &names);
    std::vector<PartResult> rparts;
    if (cfg.alpha > 0.0) rparts = part(res.params, &model, rb, cfg.layer, res.target, cfg.alpha / nr, &names);
    else rparts = part(res.params, &model, rb, cfg.layer, res.target, 0.0, nullptr);

    RmuLoss l;
    l.forget = sum_sq(fparts) / nf;
    l.retain = sum_sq(rparts) / nr;
    l.total = l.forget + cfg.alpha * l.retain;
    if (!std::isfinite(l.total)) throw RuntimeError("rmu: non-finite loss at step " + std::to_string(step));
    res.log.push_back({{"step", step}, {"forget", l.forget}, {"retain", l.retain}, {"total", l.total}});

    std::vector<MatrixF> grads;
    std::vector<MatrixF*> ptrs;
    for (int k : indices) {
      const auto uk = static_cast<std::size_t>(k);
      MatrixF g = MatrixF::Zero(res.params.tensors[uk].rows(), res.params.tensors[uk].cols());
      for (const auto& p : fparts) g += p.grad.tensors[uk];
      if (cfg.alpha > 0.0) {
        for (const auto& p : rparts) g += p.grad.tensors[uk];
      }
      grads.push_back(std::move(g));
      ptrs.push_back(&res.params.tensors[uk]);
    }
    adam.step(ptrs, grads);
  }
  res.final_loss = rmu_loss(res.params, model, forget_corpus, retain_corpus, cfg.layer, res.target, cfg.alpha);
  return res;
}

}  // namespace unlearn
