#include <gtest/gtest.h>

#include <cmath>

#include "grad_suite.hpp"
#include "test_support.hpp"

using namespace pcmp;
using namespace pcmp::testing;

namespace {

const SyntheticTask& small_task() {
  static const SyntheticTask t = generate_task(World{}, 41, small_task_config());
  return t;
}

const TokenSeq& tmpl() {
  static const TokenSeq t = World{}.template_tokens();
  return t;
}

AttnFuser unit_fuser_d1() {
  const Tensor one = Tensor::matrix(1, 1, {1.0});
  return {one, one, one, one, 1};
}

AttnFuser random_fuser(std::size_t d, std::size_t heads, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5), rng.normal_tensor({d, d}, 0.5),
          rng.normal_tensor({d, d}, 0.5), heads};
}

}  // namespace

TEST(AttnFuse, OneDimensionalHandOracle) {
  const Tensor out = attn_fuse(Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {3.0}), unit_fuser_d1());
  const double w1 = 1.0 / (1.0 + std::exp(2.0));
  EXPECT_NEAR(out[0], w1 * 1.0 + (1.0 - w1) * 3.0, 1e-14);
  EXPECT_NEAR(out[0], 2.76160, 1e-4);
  const Tensor pc = class_conditioned_prompts(Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {3.0}), unit_fuser_d1());
  EXPECT_NEAR(pc[0], 3.76160, 1e-4);
}

TEST(AttnFuse, ZeroValuePathGivesZeros) {
  AttnFuser f = random_fuser(4, 1, 1);
  f.wv = Tensor({4, 4});
  Rng rng(2);
  const Tensor p = rng.normal_tensor({3, 4}, 1.0);
  const Tensor out = attn_fuse(p, rng.normal_tensor({1, 4}, 1.0), f);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(AttnFuse, ZeroOutputProjectionReturnsPromptsExactly) {
  AttnFuser f = random_fuser(4, 2, 3);
  f.wo = Tensor({4, 4});
  Rng rng(4);
  const Tensor p = rng.normal_tensor({5, 4}, 1.0);
  EXPECT_EQ(class_conditioned_prompts(p, rng.normal_tensor({1, 4}, 1.0), f), p);
}

TEST(AttnFuse, PermutingPromptRowsPermutesOutput) {
  const AttnFuser f = random_fuser(4, 1, 5);
  Rng rng(6);
  const Tensor p = rng.normal_tensor({3, 4}, 1.0), c = rng.normal_tensor({1, 4}, 1.0);
  Tensor q({3, 4});
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) q.at(i, j) = p.at(perm[i], j);
  const Tensor a = attn_fuse(p, c, f), b = attn_fuse(q, c, f);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b.at(i, j), a.at(perm[i], j), 1e-14);
}

TEST(AttnFuse, HeadCountsPreserveShape) {
  Rng rng(7);
  const Tensor p = rng.normal_tensor({16, 32}, 0.1), c = rng.normal_tensor({1, 32}, 0.1);
  for (std::size_t heads : {1u, 2u, 4u}) {
    const Tensor out = attn_fuse(p, c, random_fuser(32, heads, 8));
    EXPECT_EQ(out.shape(), (Shape{16, 32}));
    EXPECT_TRUE(out.all_finite());
  }
  EXPECT_THROW(attn_fuse(p, c, random_fuser(32, 3, 8)), ConfigError);
}

TEST(AttnFuse, TwoHeadsMatchPerHeadOracle) {
  const AttnFuser f = random_fuser(4, 2, 9);
  Rng rng(10);
  const Tensor p = rng.normal_tensor({2, 4}, 1.0), c = rng.normal_tensor({1, 4}, 1.0);
  Tensor x({3, 4});
  for (std::size_t j = 0; j < 4; ++j) {
    x.at(0, j) = p.at(0, j);
    x.at(1, j) = p.at(1, j);
    x.at(2, j) = c.at(0, j);
  }
  const Tensor q = matmul(x, f.wq), k = matmul(x, f.wk), v = matmul(x, f.wv);
  Tensor cat({3, 4});
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 3; ++i) {
      double s[3], z = 0, mx = -1e300;
      for (std::size_t j = 0; j < 3; ++j) {
        s[j] = (q.at(i, 2 * h) * k.at(j, 2 * h) + q.at(i, 2 * h + 1) * k.at(j, 2 * h + 1)) / std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t d = 0; d < 2; ++d)
        for (std::size_t j = 0; j < 3; ++j) cat.at(i, 2 * h + d) += s[j] / z * v.at(j, 2 * h + d);
    }
  const Tensor ref = matmul(cat, f.wo);
  const Tensor out = attn_fuse(p, c, f);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), ref.at(i, j), 1e-13);
}

TEST(AttnFuse, DistinctClassesGiveDistinctPrompts) {
  const ModelPair& base = small_base();
  TunerHyper h = quick_hyper();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TunerModule m = init_module(Method::contcoop, h, base, small_task(), seed);
    const AttnFuser f{m.payload.at("fuser.wq"), m.payload.at("fuser.wk"), m.payload.at("fuser.wv"), m.payload.at("fuser.wo"), 1};
    const Tensor& emb = base.text.params().at("tok_emb");
    std::vector<Tensor> prompts;
    for (const auto& tok : small_task().class_tokens) {
      Tensor c({1, emb.cols()});
      std::copy(emb.row(tok[0]).begin(), emb.row(tok[0]).end(), c.data());
      prompts.push_back(class_conditioned_prompts(m.payload.at("ctx"), c, f));
    }
    for (std::size_t i = 0; i < prompts.size(); ++i)
      for (std::size_t j = i + 1; j < prompts.size(); ++j) EXPECT_GT(max_abs_diff(prompts[i], prompts[j]), 0.0);
  }
}

TEST(KdLoss, HandValuesAndProperties) {
  const Tensor w = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor z = Tensor::matrix(2, 2, {0, 0, 0, 1});
  EXPECT_DOUBLE_EQ(kd_loss(w, z), 0.5);
  EXPECT_DOUBLE_EQ(kd_loss(w, w), 0.0);
  Rng rng(11);
  const Tensor a = rng.normal_tensor({3, 4}, 1.0), b = rng.normal_tensor({3, 4}, 1.0);
  Tensor scaled = b;
  for (std::size_t i = 0; i < b.size(); ++i) scaled[i] = a[i] + 3.0 * (b[i] - a[i]);
  EXPECT_NEAR(kd_loss(scaled, a), 3.0 * kd_loss(b, a), 1e-12);
  EXPECT_GE(kd_loss(a, b), 0.0);
}

TEST(KdLoss, TotalLoss) {
  EXPECT_DOUBLE_EQ(total_loss(0.7, 0.3, 0.5), 0.85);
  EXPECT_DOUBLE_EQ(total_loss(0.7, 0.3, 0.0), 0.7);
  EXPECT_THROW(total_loss(0.7, 0.3, -1.0), ConfigError);
}

TEST(Tuners, DefaultHyperparameters) {
  const TunerHyper h;
  EXPECT_EQ(h.ctx_len, 16u);
  EXPECT_DOUBLE_EQ(h.lambda, 1.0);
  EXPECT_EQ(h.heads, 1u);
  EXPECT_EQ(h.depth, 0u);
  EXPECT_DOUBLE_EQ(h.lr, 2e-3);
  EXPECT_EQ(h.epochs, 200u);
}

TEST(Tuners, ZeroOutputContCoOpClassifierEqualsCoOp) {
  TunerHyper h = quick_hyper();
  h.zero_init_output = true;
  const ClassSpec spec = class_spec(small_task(), tmpl());
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const TunerModule cont = init_module(Method::contcoop, h, small_base(), small_task(), seed);
    const TunerModule coop = init_module(Method::coop, h, small_base(), small_task(), seed);
    EXPECT_EQ(cont.payload.at("ctx"), coop.payload.at("ctx"));
    EXPECT_EQ(build_contcoop_classifier(cont, small_base(), spec), build_classifier(coop, small_base(), spec));
  }
}

TEST(Tuners, FrozenZeroFuserWithoutKdFollowsCoOpTrajectory) {
  TunerHyper h = quick_hyper(40);
  h.zero_init_output = true;
  h.freeze_fuser = true;
  h.lambda = 0.0;
  const TunerModule cont = train_tuner(Method::contcoop, small_base(), small_task(), tmpl(), h, 5);
  const TunerModule coop = train_tuner(Method::coop, small_base(), small_task(), tmpl(), h, 5);
  ASSERT_EQ(cont.loss_history.size(), coop.loss_history.size());
  for (std::size_t e = 0; e < coop.loss_history.size(); ++e) EXPECT_NEAR(cont.loss_history[e], coop.loss_history[e], 1e-12);
  EXPECT_LE(max_abs_diff(cont.payload.at("ctx"), coop.payload.at("ctx")), 1e-12);
  EXPECT_EQ(cont.payload.at("fuser.wo"), Tensor({32, 32}));
}

TEST(Tuners, TrainingLeavesEncodersBitwiseUnchanged) {
  const auto before = pair_bytes(small_base());
  for (Method m : all_methods()) {
    train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(3), 1);
    EXPECT_EQ(pair_bytes(small_base()), before) << to_string(m);
  }
}

TEST(Tuners, PayloadHoldsNoEncoderParameters) {
  for (Method m : all_methods()) {
    const TunerModule mod = init_module(m, quick_hyper(), small_base(), small_task(), 1);
    for (const auto& [name, t] : mod.payload.values()) {
      EXPECT_FALSE(small_base().text.params().contains(name)) << name;
      EXPECT_FALSE(small_base().image.params().contains(name)) << name;
    }
  }
}

TEST(Tuners, SameSeedSamePayload) {
  for (Method m : {Method::coop, Method::contcoop, Method::lp}) {
    const TunerModule a = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(5), 3);
    const TunerModule b = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(5), 3);
    EXPECT_EQ(encode_container(a.payload.values()), encode_container(b.payload.values())) << to_string(m);
  }
}

TEST(Tuners, TrainedPromptsBeatZeroShotOnTrainSplit) {
  const TunerModule zs = train_tuner(Method::zs, small_base(), small_task(), tmpl(), quick_hyper(), 1);
  for (Method m : {Method::coop, Method::kgcoop, Method::contcoop}) {
    const TunerModule t = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(200), 1);
    EXPECT_GT(t.train_accuracy, zs.train_accuracy) << to_string(m);
    EXPECT_LT(t.loss_history.back(), t.loss_history.front()) << to_string(m);
  }
}

TEST(Tuners, LinearProbeAtLeastZeroShotOnDefaultTask) {
  const SyntheticTask task = generate_task(World{}, 42, TaskConfig{});
  const ClassSpec spec = class_spec(task, tmpl());
  TunerModule zs;
  const TunerModule lp = train_tuner(Method::lp, small_base(), task, tmpl(), TunerHyper{}, 1);
  EXPECT_GE(evaluate_accuracy(lp, small_base(), spec, task.test), evaluate_accuracy(zs, small_base(), spec, task.test));
}

TEST(Tuners, TipAdapterWithoutCacheIsZeroShot) {
  TunerHyper h = quick_hyper(5);
  h.alpha = 0.0;
  const TunerModule tip = train_tuner(Method::tip_adapter, small_base(), small_task(), tmpl(), h, 1);
  TunerModule zs;
  const ClassSpec spec = class_spec(small_task(), tmpl());
  EXPECT_EQ(module_logits(tip, small_base(), spec, small_task().test.x), module_logits(zs, small_base(), spec, small_task().test.x));
}

TEST(Tuners, ClassifierRowsAreUnitNorm) {
  const ClassSpec spec = class_spec(small_task(), tmpl());
  for (Method m : all_methods()) {
    if (m == Method::cocoop) continue;
    const TunerModule mod = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(3), 2);
    const Tensor w = build_classifier(mod, small_base(), spec);
    for (std::size_t i = 0; i < w.rows(); ++i) EXPECT_NEAR(l2_norm(w.row(i)), 1.0, 1e-9) << to_string(m);
  }
}

TEST(Tuners, EveryMethodReusesOnTheUpgradedPair) {
  const ClassSpec spec = class_spec(small_task(), tmpl());
  for (Method m : all_methods()) {
    const TunerModule mod = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(3), 2);
    const Tensor logits = module_logits(mod, small_upgraded(), spec, small_task().test.x);
    EXPECT_TRUE(logits.all_finite()) << to_string(m);
    const Tensor probs = softmax_rows(logits);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double s = 0;
      for (double v : probs.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const double acc = evaluate_accuracy(mod, small_upgraded(), spec, small_task().test);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 100.0);
  }
}

TEST(Tuners, ContCoOpClassifierFollowsThePairsEmbeddings) {
  const ClassSpec spec = class_spec(small_task(), tmpl());
  const TunerModule m = train_tuner(Method::contcoop, small_base(), small_task(), tmpl(), quick_hyper(5), 1);
  EXPECT_EQ(build_contcoop_classifier(m, small_base(), spec), build_contcoop_classifier(m, small_base(), spec));
  EXPECT_GT(max_abs_diff(build_contcoop_classifier(m, small_base(), spec), build_contcoop_classifier(m, small_upgraded(), spec)),
            0.0);
  const TunerModule coop = train_tuner(Method::coop, small_base(), small_task(), tmpl(), quick_hyper(5), 1);
  EXPECT_THROW(build_contcoop_classifier(coop, small_base(), spec), ConfigError);
}

TEST(Tuners, ModuleRoundTripIsBitwise) {
  for (Method m : {Method::contcoop, Method::tip_adapter, Method::cocoop}) {
    const TunerModule mod = train_tuner(m, small_base(), small_task(), tmpl(), quick_hyper(3), 4);
    const auto bytes = encode_container(mod.payload.values());
    const TunerModule back = module_from(decode_container(bytes), module_manifest(mod));
    EXPECT_EQ(encode_container(back.payload.values()), bytes);
    EXPECT_EQ(back.method, mod.method);
    EXPECT_EQ(back.hyper, mod.hyper);
    EXPECT_EQ(back.payload.trainable_names(), mod.payload.trainable_names());
    EXPECT_EQ(back.base_checksum, hex64(pair_checksum(small_base())));
  }
}

TEST(Tuners, RejectsBadRequests) {
  EXPECT_THROW(train_tuner(Method::coop, small_upgraded(), small_task(), tmpl(), quick_hyper(1), 1), ConfigError);
  EXPECT_THROW(method_from_string("prompt_magic"), ConfigError);
  TunerHyper deep = quick_hyper(1);
  deep.depth = 6;
  EXPECT_THROW(train_tuner(Method::coop, small_base(), small_task(), tmpl(), deep, 1), ConfigError);
  TunerHyper heads = quick_hyper(1);
  heads.heads = 5;
  EXPECT_THROW(train_tuner(Method::contcoop, small_base(), small_task(), tmpl(), heads, 1), ConfigError);
  TunerHyper cond = quick_hyper(1);
  cond.condition = "sentence";
  EXPECT_THROW(train_tuner(Method::contcoop, small_base(), small_task(), tmpl(), cond, 1), ConfigError);
}

TEST(Tuners, MultiHeadFusersTrain) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    TunerHyper h = quick_hyper(5);
    h.heads = heads;
    const TunerModule m = train_tuner(Method::contcoop, small_base(), small_task(), tmpl(), h, 1);
    EXPECT_EQ(m.payload.at("ctx").shape(), (Shape{4, 32}));
    EXPECT_TRUE(std::isfinite(m.loss_history.back()));
  }
}

TEST(GradientSuite, EveryTrainablePathOnThreeSeeds) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed)
    for (const auto& r : run_grad_suite(seed)) EXPECT_TRUE(r.passed) << r.label << " " << r.param << " " << r.rel_error;
}

TEST(GradientSuite, CoversEveryFuserWeight) {
  const auto results = run_grad_suite(1);
  for (const char* p : {"ctx", "fuser.wq", "fuser.wk", "fuser.wv", "fuser.wo"}) {
    bool seen = false;
    for (const auto& r : results) seen |= r.label == "contcoop" && r.param == p;
    EXPECT_TRUE(seen) << p;
  }
}
