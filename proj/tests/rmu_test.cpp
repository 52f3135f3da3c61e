#include <gtest/gtest.h>

#include "test_support.hpp"
#include "unlearn/rmu.hpp"

using namespace unlearn;
using namespace unlearn::testing;

namespace {

struct Fixture {
  WorldBundle world = generate_world(tiny_world_spec());
  ModelConfig cfg = tiny_config(world.tokenizer.size(), 4);
  ModelParams model = noisy_params<float>(cfg, 3, 0.1);
  std::vector<TokenSeq> forget{world.forget_corpus.begin(), world.forget_corpus.begin() + 4};
  std::vector<TokenSeq> retain{world.retain_corpus.begin(), world.retain_corpus.begin() + 4};
};

// Mean over non-<bos> tokens of |h - target|.
double mean_distance(const ModelParams& p, const std::vector<TokenSeq>& corpus, int layer, const RowVectorF& target) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    const MatrixF h = residual_at<float>(p, s, layer);
    for (Eigen::Index t = 1; t < h.rows(); ++t, ++n) total += (h.row(t) - target).norm();
  }
  return total / static_cast<double>(n);
}

double mean_drift(const ModelParams& p, const ModelParams& q, const std::vector<TokenSeq>& corpus, int layer) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    const MatrixF a = residual_at<float>(p, s, layer), b = residual_at<float>(q, s, layer);
    for (Eigen::Index t = 1; t < a.rows(); ++t, ++n) total += (a.row(t) - b.row(t)).norm();
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST(Rmu, DefaultBlocksFeedTheLayer) {
  const auto cfg = tiny_config(20, 4);
  RmuConfig r;
  r.layer = 3;
  EXPECT_EQ(r.blocks(cfg), (std::vector<int>{0, 1, 2}));
  r.layer = 4;
  EXPECT_EQ(r.blocks(cfg), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(rmu_trainable_names(cfg, r),
            (std::set<std::string>{"blocks.1.mlp.w_in", "blocks.1.mlp.w_out", "blocks.2.mlp.w_in",
                                   "blocks.2.mlp.w_out", "blocks.3.mlp.w_in", "blocks.3.mlp.w_out"}));
  r.layer = 2;
  EXPECT_THROW(r.validate(cfg), ValidationError);
  r.trainable_blocks = {0, 1};
  EXPECT_NO_THROW(r.validate(cfg));
  r.trainable_blocks = {2};
  EXPECT_THROW(r.validate(cfg), ValidationError);
}

TEST(Rmu, ConfigValidation) {
  const auto cfg = tiny_config(20, 4);
  RmuConfig r;
  r.steering_coefficient = 0.0;
  EXPECT_THROW(r.validate(cfg), ValidationError);
  r = RmuConfig{};
  r.alpha = -1.0;
  EXPECT_THROW(r.validate(cfg), ValidationError);
  r = RmuConfig{};
  r.layer = 5;
  EXPECT_THROW(r.validate(cfg), ValidationError);
}

TEST(Rmu, DirectionIsUnitNonNegativeAndSeeded) {
  const auto u = rmu_direction(16, 4);
  EXPECT_NEAR(u.norm(), 1.0f, 1e-6f);
  EXPECT_GE(u.minCoeff(), 0.0f);
  EXPECT_EQ(u, rmu_direction(16, 4));
  EXPECT_NE(u, rmu_direction(16, 5));
}

TEST(Rmu, ActivationRmsSkipsBos) {
  Fixture fx;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : fx.forget) {
    const MatrixF h = residual_at<float>(fx.model, s, 3);
    for (Eigen::Index t = 1; t < h.rows(); ++t, ++n) total += h.row(t).squaredNorm();
  }
  EXPECT_NEAR(activation_rms(fx.model, fx.forget, 3), std::sqrt(total / static_cast<double>(n)), 1e-5);
}

TEST(Rmu, ZeroStepsIsBitIdentical) {
  Fixture fx;
  RmuConfig r;
  r.steps = 0;
  EXPECT_EQ(rmu_finetune(fx.model, fx.forget, fx.retain, r).params, fx.model);
}

TEST(Rmu, FrozenParametersAreUntouched) {
  Fixture fx;
  RmuConfig r;
  r.steps = 20;
  r.learning_rate = 1e-2;
  const auto res = rmu_finetune(fx.model, fx.forget, fx.retain, r);
  const auto trainable = rmu_trainable_names(fx.cfg, r);
  int changed = 0;
  for (std::size_t i = 0; i < fx.model.tensors.size(); ++i) {
    if (trainable.count(fx.model.names[i])) {
      changed += res.params.tensors[i] != fx.model.tensors[i];
    } else {
      EXPECT_EQ(res.params.tensors[i], fx.model.tensors[i]) << fx.model.names[i];
    }
  }
  EXPECT_EQ(changed, static_cast<int>(trainable.size()));
}

TEST(Rmu, AlphaZeroHalvesForgetDistance) {
  Fixture fx;
  RmuConfig r;
  r.alpha = 0.0;
  r.steps = 300;
  r.learning_rate = 1e-2;
  r.batch_size = static_cast<int>(fx.forget.size());
  const auto res = rmu_finetune(fx.model, fx.forget, fx.retain, r);
  const RowVectorF target = res.target.transpose();
  const double before = mean_distance(fx.model, fx.forget, r.layer, target);
  const double after = mean_distance(res.params, fx.forget, r.layer, target);
  EXPECT_LE(after, 0.5 * before) << "before " << before << " after " << after;
  EXPECT_NEAR(res.target.norm(), r.steering_coefficient * res.rms, 1e-4 * res.rms);
}

TEST(Rmu, LargeAlphaDriftsLessOnRetain) {
  Fixture fx;
  RmuConfig r;
  r.steps = 100;
  r.learning_rate = 1e-2;
  r.alpha = 0.0;
  const auto free = rmu_finetune(fx.model, fx.forget, fx.retain, r);
  r.alpha = 1e6;
  const auto held = rmu_finetune(fx.model, fx.forget, fx.retain, r);
  EXPECT_LT(mean_drift(held.params, fx.model, fx.retain, r.layer), mean_drift(free.params, fx.model, fx.retain, r.layer));
}

TEST(Rmu, ReportedLossMatchesRecomputation) {
  Fixture fx;
  RmuConfig r;
  r.steps = 30;
  r.learning_rate = 1e-2;
  const auto res = rmu_finetune(fx.model, fx.forget, fx.retain, r);
  const auto again = rmu_loss(res.params, fx.model, fx.forget, fx.retain, r.layer, res.target, r.alpha);
  EXPECT_NEAR(again.total, res.final_loss.total, 1e-6 * std::max(1.0, std::abs(again.total)));
  EXPECT_NEAR(again.forget, res.final_loss.forget, 1e-6 * std::max(1.0, again.forget));
  EXPECT_NEAR(again.retain, res.final_loss.retain, 1e-6);
}

TEST(Rmu, DeterministicInSeed) {
  Fixture fx;
  RmuConfig r;
  r.steps = 10;
  EXPECT_EQ(rmu_finetune(fx.model, fx.forget, fx.retain, r).params, rmu_finetune(fx.model, fx.forget, fx.retain, r).params);
}

TEST(Rmu, RetainLossIsZeroForUnchangedParams) {
  Fixture fx;
  const VectorF target = VectorF::Zero(fx.cfg.d_model);
  const auto l = rmu_loss(fx.model, fx.model, fx.forget, fx.retain, 3, target, 10.0);
  EXPECT_EQ(l.retain, 0.0);
  EXPECT_DOUBLE_EQ(l.total, l.forget);
}

TEST(Rmu, ConfigJsonRoundTrip) {
  RmuConfig r;
  r.layer = 4;
  r.trainable_blocks = {1, 3};
  const nlohmann::json j = r;
  const auto back = j.get<RmuConfig>();
  EXPECT_EQ(back.layer, 4);
  EXPECT_EQ(back.trainable_blocks, (std::vector<int>{1, 3}));
  EXPECT_EQ(back.alpha, r.alpha);
}
