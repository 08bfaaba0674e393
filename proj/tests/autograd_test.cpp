#include <gtest/gtest.h>

#include <cmath>

#include "pcmp/autograd.hpp"
#include "pcmp/optim.hpp"
#include "pcmp/rng.hpp"

using namespace pcmp;
using namespace pcmp::ad;

namespace {

ParamSet random_params(std::uint64_t seed, std::initializer_list<std::pair<const char*, Shape>> specs) {
  Rng rng(seed);
  ParamSet ps;
  for (const auto& [name, shape] : specs) ps.add(name, rng.normal_tensor(shape, 1.0));
  return ps;
}

void expect_all_pass(const Objective& f, const ParamSet& ps) {
  for (const auto& name : ps.trainable_names()) {
    const auto rep = finite_diff_check(f, ps, name);
    EXPECT_TRUE(rep.passed) << name << " rel " << rep.max_rel_error;
  }
}

/// Fixed weights that turn any matrix into a scalar with non-trivial gradients.
Var probe_sum(Var x, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = rng.normal_tensor(x.shape(), 1.0);
  return sum(mul(x, x.graph->constant(std::move(w))));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  const ParamSet ps = random_params(1, {{"a", {3, 4}}, {"b", {3, 4}}, {"r", {4}}});
  expect_all_pass(
      [](Binder& p) {
        Var a = p("a"), b = p("b");
        Var x = add(mul(a, b), sub(scale(a, 0.3), add_scalar(b, 2.0)));
        x = add_row(x, p("r"));
        return probe_sum(add(tanh(x), add(gelu(x), exp(scale(relu(x), 0.2)))), 7);
      },
      ps);
}

TEST(Autograd, MatrixOps) {
  const ParamSet ps = random_params(2, {{"a", {3, 4}}, {"b", {4, 5}}, {"c", {5, 4}}});
  expect_all_pass(
      [](Binder& p) {
        Var ab = matmul(p("a"), p("b"));
        Var ac = matmul_nt(p("a"), p("c"));
        return add(probe_sum(add(ab, ac), 3), probe_sum(transpose(ab), 4));
      },
      ps);
}

TEST(Autograd, SoftmaxNormsAndNormalization) {
  const ParamSet ps = random_params(3, {{"x", {4, 5}}});
  expect_all_pass(
      [](Binder& p) {
        Var x = p("x");
        return add(add(probe_sum(softmax_rows(x), 1), probe_sum(l2_normalize_rows(x), 2)), mean(row_norms(x)));
      },
      ps);
}

TEST(Autograd, LayerNormGradients) {
  ParamSet ps = random_params(4, {{"x", {3, 6}}, {"g", {6}}, {"b", {6}}});
  expect_all_pass([](Binder& p) { return probe_sum(layer_norm(p("x"), p("g"), p("b")), 5); }, ps);
}

TEST(Autograd, LayerNormOracle) {
  Graph g;
  Var y = layer_norm(g.constant(Tensor::matrix(1, 2, {1.0, -1.0})), g.constant(Tensor::vector({1, 1})),
                     g.constant(Tensor::vector({0, 0})));
  const double inv = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(y.value()[0], inv, 1e-15);
  EXPECT_NEAR(y.value()[1], -inv, 1e-15);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-5);
}

TEST(Autograd, StructuralOps) {
  const ParamSet ps = random_params(5, {{"a", {2, 3}}, {"b", {3, 3}}, {"t", {6, 3}}, {"pre", {4, 3}}});
  expect_all_pass(
      [](Binder& p) {
        Var cat = concat_rows({p("a"), p("b")});
        Var cols = concat_cols({slice_cols(cat, 0, 1), slice_cols(cat, 1, 3)});
        Var gathered = gather_rows(p("t"), {5, 0, 5, 2});
        Var rep = repeat_rows(slice_rows(cat, 1, 2), 3);
        Var pre = prepend_per_sequence(slice_rows(p("t"), 0, 4), 2, 2, p("pre"), 2);
        return add(add(probe_sum(cols, 1), probe_sum(gathered, 2)), add(probe_sum(rep, 3), probe_sum(pre, 4)));
      },
      ps);
}

TEST(Autograd, PrependPlacesPrefixFirst) {
  Graph g;
  Var h = g.constant(Tensor::matrix(4, 1, {10, 11, 20, 21}));
  Var pre = g.constant(Tensor::matrix(2, 1, {1, 2}));
  Var out = prepend_per_sequence(h, 2, 2, pre, 1);
  EXPECT_EQ(out.value(), Tensor::matrix(6, 1, {1, 10, 11, 2, 20, 21}));
}

TEST(Autograd, MultiheadAttentionGradients) {
  for (std::size_t heads : {1u, 2u, 4u}) {
    const ParamSet ps = random_params(6 + heads, {{"q", {6, 4}}, {"k", {6, 4}}, {"v", {6, 4}}});
    expect_all_pass([heads](Binder& p) { return probe_sum(multihead_attention(p("q"), p("k"), p("v"), 2, 3, heads), 9); },
                    ps);
  }
  Graph g;
  Var x = g.constant(Tensor({4, 6}));
  EXPECT_THROW(multihead_attention(x, x, x, 1, 4, 4), ConfigError);
}

TEST(Autograd, AttentionMatchesUnfusedSingleHead) {
  Rng rng(12);
  const Tensor q = rng.normal_tensor({3, 2}, 1.0), k = rng.normal_tensor({3, 2}, 1.0), v = rng.normal_tensor({3, 2}, 1.0);
  Graph g;
  const Tensor fused = multihead_attention(g.constant(q), g.constant(k), g.constant(v), 1, 3, 1).value();
  Tensor scores({3, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) scores.at(i, j) = (q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / std::sqrt(2.0);
  const Tensor ref = matmul(softmax_rows(scores), v);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(fused[i], ref[i], 1e-14);
}

TEST(Autograd, CrossEntropyOracleAndGradient) {
  Graph g;
  Var l = cross_entropy(g.constant(Tensor::matrix(1, 2, {10.0, -10.0})), {0});
  EXPECT_NEAR(l.value()[0], std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(l.value()[0], 2.06e-9, 0.01e-9);
  Var u = cross_entropy(g.constant(Tensor::matrix(2, 3, {0, 0, 0, 1, 1, 1})), {2, 0});
  EXPECT_NEAR(u.value()[0], std::log(3.0), 1e-15);
  EXPECT_THROW(cross_entropy(g.constant(Tensor::matrix(1, 2, {0, 0})), {2}), IndexError);
  const ParamSet ps = random_params(13, {{"z", {4, 5}}});
  expect_all_pass([](Binder& p) { return cross_entropy(scale(p("z"), 3.0), {0, 4, 2, 2}); }, ps);
}

TEST(Autograd, BackwardNeedsScalar) {
  Graph g;
  Var x = g.input(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(scale(x, 2.0)), ContractError);
}

TEST(Autograd, ReusedNodeAccumulates) {
  Graph g;
  Var x = g.input(Tensor::vector({3.0}));
  Var y = add(mul(x, x), x);
  g.backward(sum(y));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 7.0);
}

TEST(Autograd, FrozenParametersGetNoGradient) {
  ParamSet ps = random_params(14, {{"a", {2, 2}}, {"b", {2, 2}}});
  ps.freeze("b");
  Graph g;
  Binder bind(g, ps);
  g.backward(probe_sum(matmul(bind("a"), bind("b")), 1));
  const TensorMap grads = bind.gradients();
  EXPECT_EQ(grads.count("a"), 1u);
  EXPECT_EQ(grads.count("b"), 0u);
  EXPECT_FALSE(g.requires_grad(bind("b")));
  EXPECT_THROW(finite_diff_check([](Binder& p) { return sum(p("b")); }, ps, "b"), ConfigError);
}

TEST(Autograd, CheckerCatchesCorruptedGradient) {
  const ParamSet ps = random_params(15, {{"w", {3, 3}}});
  const Objective f = [](Binder& p) { return probe_sum(tanh(matmul(p("w"), p("w"))), 2); };
  Tensor grad = analytic_gradients(f, ps).at("w");
  EXPECT_TRUE(compare_gradient(grad, f, ps, "w", 1e-5, 1e-6).passed);
  grad[4] *= 1.01;
  const auto bad = compare_gradient(grad, f, ps, "w", 1e-5, 1e-6);
  EXPECT_FALSE(bad.passed);
  EXPECT_GT(bad.max_rel_error, 1e-4);
}

TEST(Autograd, RowNormsAtZeroRow) {
  Graph g;
  Var x = g.input(Tensor::matrix(2, 2, {0, 0, 3, 4}));
  Var n = row_norms(x);
  EXPECT_DOUBLE_EQ(n.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(n.value()[1], 5.0);
  g.backward(sum(n));
  const Tensor gr = g.grad(x);
  EXPECT_DOUBLE_EQ(gr[0], 0.0);
  EXPECT_DOUBLE_EQ(gr[2], 0.6);
}

TEST(Optim, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 0, 100), 2e-3);
  EXPECT_NEAR(cosine_lr(2e-3, 50, 100), 1e-3, 1e-18);
  EXPECT_NEAR(cosine_lr(2e-3, 100, 100), 0.0, 1e-18);
}

TEST(Optim, SgdMovesOnlyTrainable) {
  ParamSet ps;
  ps.add("a", Tensor::vector({1.0}));
  ps.add("b", Tensor::vector({1.0}), false);
  TensorMap g;
  g.emplace("a", Tensor::vector({2.0}));
  g.emplace("b", Tensor::vector({2.0}));
  sgd_step(ps, g, 0.5);
  EXPECT_DOUBLE_EQ(ps.at("a")[0], 0.0);
  EXPECT_DOUBLE_EQ(ps.at("b")[0], 1.0);
}

TEST(Optim, AdamFirstStepIsSignedLearningRate) {
  ParamSet ps;
  ps.add("a", Tensor::vector({1.0, 1.0}));
  TensorMap g;
  g.emplace("a", Tensor::vector({0.3, -7.0}));
  Adam opt;
  opt.step(ps, g, 0.1);
  EXPECT_NEAR(ps.at("a")[0], 0.9, 1e-7);
  EXPECT_NEAR(ps.at("a")[1], 1.1, 1e-7);
}
