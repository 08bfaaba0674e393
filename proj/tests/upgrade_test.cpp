#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace pcmp;
using namespace pcmp::testing;

namespace {

UpgradeRecipe quick_recipe() {
  UpgradeRecipe r;
  r.epochs = 2;
  r.steps_per_epoch = 4;
  r.batch = 16;
  return r;
}

UpgradeRecipe drift_recipe(double sigma0, std::size_t realign) {
  UpgradeRecipe r;
  r.kind = "synthetic_drift";
  r.sigma0 = sigma0;
  r.realign_epochs = realign;
  r.steps_per_epoch = 4;
  r.batch = 16;
  return r;
}

}  // namespace

TEST(Upgrade, ZeroEpochsIsANoOp) {
  UpgradeRecipe r;
  r.epochs = 0;
  const ModelPair up = upgrade_once(small_base(), World{}, r, 3);
  EXPECT_EQ(pair_bytes(up), pair_bytes(small_base()));
  EXPECT_EQ(up.tag, "upgraded");
}

TEST(Upgrade, ZeroSigmaDriftLeavesTextUnchanged) {
  for (std::size_t realign : {0u, 2u}) {
    const ModelPair up = upgrade_once(small_base(), World{}, drift_recipe(0.0, realign), 4);
    EXPECT_EQ(text_encoder_bytes(up.text), text_encoder_bytes(small_base().text));
    EXPECT_EQ(up.text.params().trainable_names(), small_base().text.params().trainable_names());
  }
}

TEST(Upgrade, SyntheticDriftGrowsWithDepth) {
  const ModelPair up = upgrade_once(small_base(), World{}, drift_recipe(0.05, 0), 5);
  const DriftProfile p = layer_param_change(small_base().text, up.text);
  for (int l = 1; l < 6; ++l) EXPECT_GT(p.at(l).param_abs, p.at(l - 1).param_abs) << "layer " << l;
  EXPECT_EQ(p.at(-1).param_abs, 0.0);
  EXPECT_EQ(p.at(6).param_abs, 0.0);
  const double expect0 = 0.05 * 1.0 / 6.0 * std::sqrt(2.0 / M_PI);
  EXPECT_NEAR(p.at(0).param_abs, expect0, 0.1 * expect0);
}

TEST(Upgrade, ContinuedTrainingKeepsLayerAlignment) {
  const ModelPair& up = small_upgraded();
  EXPECT_EQ(up.config, small_base().config);
  for (const auto& [name, t] : small_base().text.params().values()) EXPECT_EQ(up.text.params().at(name).shape(), t.shape()) << name;
  EXPECT_EQ(up.image.widths(), (std::vector<std::size_t>{16, 96, 32}));
  EXPECT_GT(max_abs_diff(up.text.params().at("proj"), small_base().text.params().at("proj")), 0.0);
  EXPECT_EQ(up.text.params().at("tok_emb").shape(), (Shape{64, 32}));
}

TEST(Upgrade, SameSeedSameBytes) {
  const ModelPair a = upgrade_once(small_base(), World{}, quick_recipe(), 9);
  const ModelPair b = upgrade_once(small_base(), World{}, quick_recipe(), 9);
  const ModelPair c = upgrade_once(small_base(), World{}, quick_recipe(), 10);
  EXPECT_EQ(pair_bytes(a), pair_bytes(b));
  EXPECT_NE(pair_bytes(a), pair_bytes(c));
}

TEST(Upgrade, LayerDecayScales) {
  const auto scale = layer_decay_scale(small_base().text, 0.5);
  EXPECT_DOUBLE_EQ(scale("text.block5.wq"), 1.0);
  EXPECT_DOUBLE_EQ(scale("text.block0.wq"), std::pow(0.5, 5));
  EXPECT_DOUBLE_EQ(scale("text.tok_emb"), std::pow(0.5, 6));
  EXPECT_DOUBLE_EQ(scale("text.proj"), 1.0);
  EXPECT_DOUBLE_EQ(scale("image.l0.w"), 1.0);
}

TEST(Upgrade, GateOfBaseAgainstItselfPassesWithEquality) {
  const World w;
  const UpgradeRecipe r;
  const GateReport g = upgrade_gate_report(small_base(), small_base(), w, gate_tasks(w, r));
  EXPECT_TRUE(g.passed);
  EXPECT_EQ(g.base_acc, g.upgraded_acc);
  EXPECT_EQ(g.strictly_higher, 0u);
  const json j = g;
  EXPECT_EQ(j.at("base_acc").size(), 3u);
  EXPECT_EQ(j.at("upgraded_acc").size(), 3u);
  EXPECT_TRUE(j.at("passed").get<bool>());
}

TEST(Upgrade, GateFailureRaisesWithMeasuredAccuracies) {
  UpgradeRecipe r = drift_recipe(5.0, 0);
  r.retries = 1;
  try {
    simulate_upgrade(small_base(), World{}, r, 11);
    FAIL() << "expected the gate to fail";
  } catch (const UpgradeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2 attempts"), std::string::npos) << msg;
    EXPECT_NE(msg.find("base"), std::string::npos);
  }
}

TEST(Upgrade, GatePassingUpgradeRecordsManifest) {
  UpgradeRecipe r = drift_recipe(0.0, 0);
  const UpgradeResult res = simulate_upgrade(small_base(), World{}, r, 12);
  EXPECT_TRUE(res.gate.passed);
  EXPECT_EQ(res.attempts, 1u);
  const json m = upgrade_manifest(res, r);
  EXPECT_EQ(m.at("recipe").get<UpgradeRecipe>(), r);
  EXPECT_EQ(m.at("seed").get<std::uint64_t>(), 12u);
}

TEST(Upgrade, RecipeValidation) {
  UpgradeRecipe r;
  r.kind = "distill";
  EXPECT_THROW(upgrade_once(small_base(), World{}, r, 1), ConfigError);
  EXPECT_THROW(upgrade_once(small_base(), World{}, drift_recipe(-1.0, 0), 1), ConfigError);
  ModelPair other = tiny_pair(1);
  EXPECT_THROW(upgrade_gate_report(small_base(), other, World{}, {}), ConfigError);
}

TEST(Pretrain, SameSeedSamePair) {
  PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 4;
  cfg.heldout_batches = 1;
  const auto a = contrastive_pretrain(EncoderConfig{}, World{}, cfg, 5);
  const auto b = contrastive_pretrain(EncoderConfig{}, World{}, cfg, 5);
  EXPECT_EQ(pair_bytes(a.pair), pair_bytes(b.pair));
  EXPECT_EQ(a.pair.tag, "base");
}

TEST(Pretrain, ZeroShotBeatsTwiceChance) {
  const World w;
  const SyntheticTask t = generate_task(w, 77, TaskConfig{});
  EXPECT_GT(zero_shot_accuracy(small_base(), t, w.template_tokens(), t.test), 2.0 * 100.0 / 8.0);
}

TEST(Pretrain, InfoNceHandValue) {
  ad::Graph g;
  const ad::Var img = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const ad::Var txt = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const double tau = 0.5;
  const double expect = std::log(1.0 + std::exp(-1.0 / tau));
  EXPECT_NEAR(infonce_loss(img, txt, tau).value()[0], expect, 1e-14);
}
