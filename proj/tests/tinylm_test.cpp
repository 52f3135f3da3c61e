#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "test_support.hpp"
#include "unlearn/tinylm.hpp"

using namespace unlearn;
using namespace unlearn::testing;

namespace {

constexpr int kVocab = 23;

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

LogitDiffObjective logit_diff(int position) {
  LogitDiffObjective o;
  o.position = position;
  o.correct_token = 3;
  o.incorrect_tokens = {4, 5, 6};
  return o;
}

double objective_value(const ModelParamsT<double>& p, const TokenSeq& t, const ScalarObjective& obj,
                       std::span<const Hook<double>> hooks = {}) {
  const auto out = forward<double>(p, t, hooks);
  return evaluate_objective<double>(obj, out.logits, t);
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
  auto c = tiny_config(kVocab);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Forward, ShapesAndCache) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto p = init_params(cfg, 1);
  const auto t = random_tokens(kVocab, 11, 2);
  const auto out = forward<float>(p, t, {}, {0, 1, 2, 3});
  EXPECT_EQ(out.logits.rows(), 11);
  EXPECT_EQ(out.logits.cols(), kVocab);
  EXPECT_TRUE(out.logits.allFinite());
  ASSERT_EQ(out.cache.size(), 4u);
  for (const auto& [layer, m] : out.cache) {
    EXPECT_EQ(m.rows(), 11);
    EXPECT_EQ(m.cols(), cfg.d_model);
  }
}

TEST(Forward, OnlyRequestedLayersAreCached) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto out = forward<float>(init_params(cfg, 1), random_tokens(kVocab, 5, 2), {}, {2});
  ASSERT_EQ(out.cache.size(), 1u);
  EXPECT_TRUE(out.cache.count(2));
}

TEST(Forward, LengthOverflowIsAnError) {
  const auto cfg = tiny_config(kVocab);
  EXPECT_THROW(forward<float>(init_params(cfg, 1), random_tokens(kVocab, 33, 1)), ValidationError);
}

TEST(Forward, IdentityHookIsBitExact) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto p = noisy_params<float>(cfg, 4);
  const auto t = random_tokens(kVocab, 12, 5);
  const auto base = forward<float>(p, t).logits;
  for (int layer = 0; layer <= cfg.n_layers; ++layer) {
    const Hook<float> h{layer, [](const MatrixF& x) { return x; }};
    EXPECT_EQ(forward<float>(p, t, std::span<const Hook<float>>(&h, 1)).logits, base) << "layer " << layer;
  }
}

TEST(Forward, CacheHoldsPostHookActivations) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<float>(cfg, 4);
  const auto t = random_tokens(kVocab, 6, 5);
  const Hook<float> h{1, [](const MatrixF& x) { return MatrixF(x.array() + 1.0f); }};
  const auto plain = forward<float>(p, t, {}, {1});
  const auto hooked = forward<float>(p, t, std::span<const Hook<float>>(&h, 1), {1});
  EXPECT_TRUE(hooked.cache.at(1).isApprox(MatrixF(plain.cache.at(1).array() + 1.0f)));
}

// Adding v to the residual stream before block l is the same as adding v to the
// bias of the MLP output of block l-1 (or to every positional embedding for l = 0).
TEST(Forward, AdditiveHookMatchesParameterShift) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto p = noisy_params<double>(cfg, 7);
  const auto t = random_tokens(kVocab, 9, 8);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int layer = 0; layer <= cfg.n_layers; ++layer) {
    RowVector<double> v(cfg.d_model);
    for (int i = 0; i < cfg.d_model; ++i) v(i) = n(rng);
    const Hook<double> h{layer, [v](const MatrixD& x) { return MatrixD(x.rowwise() + v); }};
    const auto hooked = forward<double>(p, t, std::span<const Hook<double>>(&h, 1)).logits;
    auto shifted = p;
    if (layer == 0) {
      shifted.tensors[ModelParamsT<double>::kPosEmb].rowwise() += v;
    } else {
      shifted.block(layer - 1, kMlpOutBias) += v;
    }
    const auto manual = forward<double>(shifted, t).logits;
    EXPECT_LT((hooked - manual).cwiseAbs().maxCoeff(), 1e-9) << "layer " << layer;
  }
}

TEST(Forward, IsCausal) {
  const auto cfg = tiny_config(kVocab, 2);
  const auto p = noisy_params<float>(cfg, 9);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto a = random_tokens(kVocab, 16, 100 + trial);
    auto b = a;
    const std::size_t cut = 3 + trial;
    for (std::size_t i = cut + 1; i < b.size(); ++i) b[i] = (b[i] + 1) % kVocab;
    const auto la = forward<float>(p, a).logits;
    const auto lb = forward<float>(p, b).logits;
    EXPECT_EQ(la.topRows(static_cast<Eigen::Index>(cut) + 1), lb.topRows(static_cast<Eigen::Index>(cut) + 1));
  }
}

TEST(CrossEntropy, UniformModelGivesLogVocab) {
  const auto cfg = tiny_config(kVocab);
  const auto p = constant_logit_model(cfg);
  EXPECT_NEAR(cross_entropy<float>(p, random_tokens(kVocab, 10, 1)), std::log(static_cast<double>(kVocab)), 1e-5);
}

TEST(CrossEntropy, MatchesRecomputationFromLogits) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<double>(cfg, 2);
  const auto t = random_tokens(kVocab, 14, 3);
  const auto logits = forward<double>(p, t).logits;
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(t[i + 1]);
  }
  const double expected = total / static_cast<double>(t.size() - 1);
  const double got = cross_entropy<double>(p, t);
  EXPECT_NEAR(got, expected, 1e-12);
  EXPECT_GE(got, 0.0);
}

TEST(GradAtLayer, ConstantObjectiveGivesZero) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<float>(cfg, 2);
  const auto g = grad_at_layer<float>(p, random_tokens(kVocab, 7, 1), 1, ConstantObjective{3.0});
  EXPECT_EQ(g.rows(), 7);
  EXPECT_TRUE((g.array() == 0.0f).all());
}

TEST(GradAtLayer, FiniteDifferencesAtEveryLayer) {
  const auto cfg = tiny_config(kVocab, 2);
  const auto p = noisy_params<double>(cfg, 11);
  const auto t = random_tokens(kVocab, 8, 12);
  const std::vector<ScalarObjective> objectives = {logit_diff(6), CrossEntropyObjective{}};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  const double eps = 1e-3;
  for (const auto& obj : objectives) {
    for (int layer = 0; layer <= cfg.n_layers; ++layer) {
      const MatrixD g = grad_at_layer<double>(p, t, layer, obj);
      for (int trial = 0; trial < 5; ++trial) {
        MatrixD r(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
        r /= r.norm();
        auto shifted = [&](double s) {
          const Hook<double> h{layer, [&r, s](const MatrixD& x) { return MatrixD(x + s * r); }};
          return objective_value(p, t, obj, std::span<const Hook<double>>(&h, 1));
        };
        const double fd = (shifted(eps) - shifted(-eps)) / (2 * eps);
        const double an = (g.array() * r.array()).sum();
        EXPECT_LT(rel_err(fd, an), 1e-3) << "layer " << layer << " fd " << fd << " analytic " << an;
      }
    }
  }
}

// At the input of the final norm the gradient of a logit difference is the
// layer-norm backward of the unembedding column difference, at one position.
TEST(GradAtLayer, FinalLayerMatchesAnalyticLayerNormBackward) {
  const auto cfg = tiny_config(kVocab, 2);
  const auto p = noisy_params<double>(cfg, 21);
  const auto t = random_tokens(kVocab, 6, 22);
  const auto obj = logit_diff(4);
  const MatrixD g = grad_at_layer<double>(p, t, cfg.n_layers, obj);
  const MatrixD x = residual_at<double>(p, t, cfg.n_layers);
  const auto& wu = p.final_tensor(2);
  Vector<double> w = wu.col(obj.correct_token);
  for (int k : obj.incorrect_tokens) w -= wu.col(k) / 3.0;
  const RowVector<double> gain = p.final_tensor(0).row(0);
  const auto row = x.row(4);
  const double mu = row.mean();
  const double var = (row.array() - mu).square().mean();
  const double sigma = std::sqrt(var + cfg.ln_eps);
  const RowVector<double> xhat = (row.array() - mu) / sigma;
  const RowVector<double> dxhat = w.transpose().cwiseProduct(gain);
  const RowVector<double> expected =
      (dxhat.array() - dxhat.mean() - xhat.array() * dxhat.cwiseProduct(xhat).mean()) / sigma;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    if (r == 4) {
      EXPECT_LT((g.row(r) - expected).cwiseAbs().maxCoeff(), 1e-10);
    } else {
      EXPECT_EQ(g.row(r).cwiseAbs().maxCoeff(), 0.0);
    }
  }
}

TEST(GradParams, EmptySubsetGivesZeros) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<float>(cfg, 2);
  const auto g = grad_params<float>(p, {random_tokens(kVocab, 7, 1)}, CrossEntropyObjective{}, {});
  for (const auto& t : g.tensors) EXPECT_TRUE((t.array() == 0.0f).all());
}

TEST(GradParams, SubsetZeroFillsOtherTensors) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<float>(cfg, 2);
  const auto g = grad_params<float>(p, {random_tokens(kVocab, 7, 1)}, CrossEntropyObjective{}, {"blocks.1.mlp.w_in"});
  for (std::size_t i = 0; i < g.tensors.size(); ++i) {
    if (g.names[i] == "blocks.1.mlp.w_in") {
      EXPECT_GT(g.tensors[i].cwiseAbs().maxCoeff(), 0.0f);
    } else {
      EXPECT_TRUE((g.tensors[i].array() == 0.0f).all()) << g.names[i];
    }
  }
}

TEST(GradParams, FiniteDifferencesOnRandomScalarWeights) {
  const auto cfg = tiny_config(kVocab, 2);
  auto p = noisy_params<double>(cfg, 31);
  const std::vector<TokenSeq> batch = {random_tokens(kVocab, 9, 1), random_tokens(kVocab, 6, 2)};
  const auto names = all_tensor_names(cfg);
  const std::vector<ScalarObjective> objectives = {CrossEntropyObjective{}, logit_diff(5)};
  std::mt19937_64 rng(8);
  const double eps = 1e-3;
  for (const auto& obj : objectives) {
    const auto g = grad_params<double>(p, batch, obj, names);
    auto batch_value = [&](const ModelParamsT<double>& q) {
      double s = 0.0;
      for (const auto& t : batch) s += objective_value(q, t, obj);
      return s / static_cast<double>(batch.size());
    };
    for (int trial = 0; trial < 10; ++trial) {
      const auto k = static_cast<std::size_t>(rng() % p.tensors.size());
      const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.tensors[k].size()));
      auto plus = p, minus = p;
      plus.tensors[k].data()[idx] += eps;
      minus.tensors[k].data()[idx] -= eps;
      const double fd = (batch_value(plus) - batch_value(minus)) / (2 * eps);
      const double an = g.tensors[k].data()[idx];
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      EXPECT_LT(rel_err(fd, an), 1e-3) << p.names[k] << "[" << idx << "] fd " << fd << " analytic " << an;
    }
  }
}

TEST(GradParams, LossOutMatchesBatchMean) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<double>(cfg, 2);
  const std::vector<TokenSeq> batch = {random_tokens(kVocab, 9, 1), random_tokens(kVocab, 5, 2)};
  double loss = 0.0;
  grad_params<double>(p, batch, CrossEntropyObjective{}, {}, &loss);
  EXPECT_NEAR(loss, (cross_entropy<double>(p, batch[0]) + cross_entropy<double>(p, batch[1])) / 2, 1e-12);
}

TEST(GradFromResidual, FiniteDifferencesAlongRandomDirections) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto p = noisy_params<double>(cfg, 41);
  const auto t = random_tokens(kVocab, 7, 3);
  const auto names = all_tensor_names(cfg);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  const double eps = 1e-3;
  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    MatrixD cot(7, cfg.d_model);
    for (Eigen::Index i = 0; i < cot.size(); ++i) cot.data()[i] = n(rng);
    const auto g = grad_params_from_residual<double>(p, t, layer, cot, names);
    auto dir = zero_params<double>(cfg);
    double norm2 = 0.0;
    for (auto& d : dir.tensors) {
      for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = n(rng);
      norm2 += d.squaredNorm();
    }
    double an = 0.0;
    for (std::size_t k = 0; k < dir.tensors.size(); ++k) {
      dir.tensors[k] /= std::sqrt(norm2);
      an += (dir.tensors[k].array() * g.tensors[k].array()).sum();
    }
    auto value = [&](double s) {
      auto q = p;
      for (std::size_t k = 0; k < q.tensors.size(); ++k) q.tensors[k] += s * dir.tensors[k];
      return (residual_at<double>(q, t, layer).array() * cot.array()).sum();
    };
    const double fd = (value(eps) - value(-eps)) / (2 * eps);
    EXPECT_LT(rel_err(fd, an), 1e-3) << "layer " << layer;
  }
}

TEST(GradFromResidual, BlocksAboveTheLayerGetNoGradient) {
  const auto cfg = tiny_config(kVocab, 3);
  const auto p = noisy_params<float>(cfg, 41);
  const auto t = random_tokens(kVocab, 7, 3);
  const MatrixF cot = MatrixF::Ones(7, cfg.d_model);
  const auto g = grad_params_from_residual<float>(p, t, 2, cot, all_tensor_names(cfg));
  EXPECT_TRUE((g.block(2, kMlpInWeight).array() == 0.0f).all());
  EXPECT_GT(g.block(1, kMlpInWeight).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Weights, SaveLoadIsBitExact) {
  const auto cfg = tiny_config(kVocab);
  const auto p = noisy_params<float>(cfg, 5);
  const auto path = std::filesystem::temp_directory_path() / "unlearn_tinylm_weights.tlm";
  save_params(p, path, {{"note", "x"}});
  nlohmann::json meta;
  const auto q = load_params(path, &meta);
  EXPECT_EQ(p, q);
  EXPECT_EQ(meta.at("note"), "x");
}

TEST(Training, LossDecreasesAndIsThreadCountIndependent) {
  const auto w = generate_world(tiny_world_spec());
  const auto cfg = tiny_config(w.tokenizer.size());
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 8;
  tc.warmup_steps = 10;
  tc.log_every = 10;
  set_num_threads(1);
  const auto a = train_lm(cfg, w.pretrain_corpus, tc, 3);
  set_num_threads(4);
  const auto b = train_lm(cfg, w.pretrain_corpus, tc, 3);
  set_num_threads(0);
  EXPECT_EQ(a.params, b.params);
  ASSERT_GE(a.loss_curve.size(), 2u);
  EXPECT_LT(a.loss_curve.back().second, a.loss_curve.front().second);
}

TEST(Training, DivergenceNamesTheStep) {
  const auto w = generate_world(tiny_world_spec());
  const auto cfg = tiny_config(w.tokenizer.size());
  TrainConfig tc;
  tc.steps = 50;
  tc.optimizer = Optimizer::kMomentum;
  tc.learning_rate = 1e30;
  tc.grad_clip = 0.0;
  tc.warmup_steps = 0;
  try {
    train_lm(cfg, w.pretrain_corpus, tc, 3);
    FAIL() << "expected divergence";
  } catch (const RuntimeError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}
