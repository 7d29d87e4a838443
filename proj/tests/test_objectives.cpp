#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "kge/objectives.hpp"
#include "kge/trainer.hpp"

using namespace kge;

namespace {

std::vector<double> v(std::initializer_list<double> x) { return x; }

LossResult run(LossKind k, std::vector<double> pos, std::vector<double> neg, LossParams p = {}) {
  return loss(k, pos, neg, p);
}

}  // namespace

TEST(Sampling, TwoEntitiesForcesTheOtherId) {
  const TripleStore store(2, 1, {{0, 0, 1}}, {}, {});
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto b = sample_negatives(store, {0, 0, 1}, 1, SamplingMode::Uniform, rng);
    ASSERT_EQ(b.negatives.size(), 1u);
    const auto& n = b.negatives[0];
    if (n.corrupted == Direction::Tail) EXPECT_EQ(n.triple, (Triple{0, 0, 0}));
    else EXPECT_EQ(n.triple, (Triple{1, 0, 1}));
  }
}

TEST(Sampling, CorruptedSlotAlwaysDiffers) {
  const TripleStore store(7, 2, {{3, 1, 4}}, {}, {});
  Rng rng(2);
  const auto b = sample_negatives(store, {3, 1, 4}, 500, SamplingMode::Uniform, rng);
  std::size_t heads = 0;
  for (const auto& n : b.negatives) {
    EXPECT_EQ(n.triple.relation, 1u);
    if (n.corrupted == Direction::Head) {
      ++heads;
      EXPECT_NE(n.triple.head, 3u);
      EXPECT_EQ(n.triple.tail, 4u);
    } else {
      EXPECT_NE(n.triple.tail, 4u);
      EXPECT_EQ(n.triple.head, 3u);
    }
  }
  EXPECT_NEAR(static_cast<double>(heads) / 500.0, 0.5, 0.1);
}

TEST(Sampling, UniformChiSquare) {
  const std::size_t n = 6;
  const TripleStore store(n, 1, {{0, 0, 1}}, {}, {});
  Rng rng(3);
  std::vector<double> counts(n, 0.0);
  std::size_t tails = 0;
  const auto b = sample_negatives(store, {0, 0, 1}, 20000, SamplingMode::Uniform, rng);
  for (const auto& x : b.negatives) {
    if (x.corrupted != Direction::Tail) continue;
    ++tails;
    counts[x.triple.tail] += 1;
  }
  EXPECT_EQ(counts[1], 0.0);
  const double expect = static_cast<double>(tails) / (n - 1);
  double chi2 = 0;
  for (std::size_t e = 0; e < n; ++e) {
    if (e == 1) continue;
    chi2 += (counts[e] - expect) * (counts[e] - expect) / expect;
  }
  // 4 degrees of freedom, p = 0.001 critical value.
  EXPECT_LT(chi2, 18.47);
}

TEST(Sampling, FilteredNeverLeaksWhenAValidCorruptionExists) {
  // Every tail of (0, 0, .) except 4 is known true, and every head of (., 0, 1) is known.
  std::vector<Triple> train;
  for (EntityId e = 0; e < 4; ++e) train.push_back({0, 0, e});
  for (EntityId e = 0; e < 5; ++e) train.push_back({e, 0, 1});
  const TripleStore store(5, 1, train, {}, {});
  Rng rng(4);
  const auto b = sample_negatives(store, {0, 0, 1}, 2000, SamplingMode::Filtered, rng);
  for (const auto& n : b.negatives) {
    EXPECT_FALSE(n.leak);
    EXPECT_FALSE(store.is_known(n.triple));
    EXPECT_EQ(n.triple, (Triple{0, 0, 4}));
  }
  // Exhaustively: no valid corruption at all gives flagged samples.
  std::vector<Triple> full;
  for (EntityId a = 0; a < 3; ++a) {
    for (EntityId c = 0; c < 3; ++c) full.push_back({a, 0, c});
  }
  const TripleStore dense(3, 1, full, {}, {});
  const auto f = sample_negatives(dense, {1, 0, 1}, 5, SamplingMode::Filtered, rng);
  for (const auto& n : f.negatives) EXPECT_TRUE(n.leak);
}

TEST(Sampling, UniformFlagsLeaks) {
  const TripleStore store(3, 1, {{0, 0, 1}, {0, 0, 2}, {1, 0, 1}, {2, 0, 1}}, {}, {});
  Rng rng(5);
  const auto b = sample_negatives(store, {0, 0, 1}, 100, SamplingMode::Uniform, rng);
  for (const auto& n : b.negatives) EXPECT_EQ(n.leak, store.is_known(n.triple));
}

TEST(Sampling, Errors) {
  const TripleStore one(1, 1, {{0, 0, 0}}, {}, {});
  Rng rng(6);
  EXPECT_THROW((void)sample_negatives(one, {0, 0, 0}, 1, SamplingMode::Uniform, rng), SamplingError);
  const TripleStore two(2, 1, {{0, 0, 1}}, {}, {});
  EXPECT_THROW((void)sample_negatives(two, {0, 0, 1}, 0, SamplingMode::Uniform, rng), ParameterError);
  EXPECT_THROW((void)sample_negatives(two, {0, 0, 5}, 1, SamplingMode::Uniform, rng), BoundsError);
}

TEST(Loss, MarginExamples) {
  // scores are negated distances
  EXPECT_EQ(run(LossKind::Margin, v({-0.2}), v({-1.5})).value, 0.0);
  const auto r = run(LossKind::Margin, v({-1.0}), v({-1.2}));
  EXPECT_NEAR(r.value, 0.8, 1e-15);
  EXPECT_EQ(r.pos_grad[0], -1.0);
  EXPECT_EQ(r.neg_grad[0], 1.0);
}

TEST(Loss, MarginZeroWhenAllPairsSeparated) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> pos{-rng.uniform(0, 2)}, neg;
    for (int j = 0; j < 4; ++j) neg.push_back(pos[0] - 1.0 - rng.uniform(0, 1));
    EXPECT_EQ(run(LossKind::Margin, pos, neg).value, 0.0);
  }
}

TEST(Loss, SelfAdversarialExample) {
  const auto r = run(LossKind::SelfAdversarial, v({-1.0}), v({-1.0}));
  EXPECT_NEAR(r.value, 2 * std::numbers::ln2, 1e-12);
}

TEST(Loss, SelfAdversarialWeightsAreDetached) {
  LossParams p;
  p.margin = 2.0;
  const auto r = run(LossKind::SelfAdversarial, v({-1.0}), v({-0.5, -3.0}), p);
  const auto w = adversarial_weights(v({-0.5, -3.0}), 1.0);
  EXPECT_NEAR(r.neg_grad[0], w[0] * sigmoid(2.0 - 0.5), 1e-15);
  EXPECT_NEAR(r.neg_grad[1], w[1] * sigmoid(2.0 - 3.0), 1e-15);
}

TEST(Loss, AdversarialWeights) {
  const auto w = adversarial_weights(v({0.0, std::log(3.0)}), 1.0);
  EXPECT_NEAR(w[0], 0.25, 1e-15);
  EXPECT_NEAR(w[1], 0.75, 1e-15);
  const auto u = adversarial_weights(v({1.0, 7.0, -2.0}), 0.0);
  for (double x : u) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(adversarial_weights(v({5.0}), 2.0)[0], 1.0);
  EXPECT_THROW((void)adversarial_weights({}, 1.0), ParameterError);
  EXPECT_THROW((void)adversarial_weights(v({1.0}), -1.0), ParameterError);
}

TEST(Loss, AdversarialWeightsShiftInvariantAndNormalized) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> s(8), t(8);
    const double c = rng.uniform(-50, 50);
    for (std::size_t j = 0; j < 8; ++j) s[j] = rng.uniform(-5, 5), t[j] = s[j] + c;
    const auto a = adversarial_weights(s, 1.3), b = adversarial_weights(t, 1.3);
    double total = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(a[j], b[j], 1e-12);
      total += a[j];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Loss, BceFromProbabilities) {
  EXPECT_EQ(bce_from_probabilities(v({1, 0}), v({1, 0})), 0.0);
  EXPECT_NEAR(bce_from_probabilities(v({1}), v({0.5})), std::numbers::ln2, 1e-15);
  EXPECT_THROW((void)bce_from_probabilities(v({1}), v({1.5})), ParameterError);
}

TEST(Loss, BceOnScoresMatchesProbabilityForm) {
  const auto r = run(LossKind::BCE, v({0.3}), v({-1.2, 2.0}));
  const double want = bce_from_probabilities(v({1, 0, 0}), v({sigmoid(0.3), sigmoid(-1.2), sigmoid(2.0)}));
  EXPECT_NEAR(r.value, want, 1e-12);
}

TEST(Loss, NllForms) {
  const auto s = run(LossKind::NLL, v({0.0}), v({0.0}));
  EXPECT_NEAR(s.value, 2 * std::numbers::ln2, 1e-15);
  LossParams p;
  p.nll_form = NllForm::Literal;
  EXPECT_NEAR(run(LossKind::NLL, v({0.0}), v({0.0}), p).value, 4.0, 1e-15);
}

TEST(Loss, LimitAndDoubleLimit) {
  LossParams p;
  p.margin = 1.0;
  p.limit_mu = 0.5;
  p.limit_lambda = 2.0;
  // d_p = 1, d_n = 1.2: hinge 0.8, limit 2 * 0.5
  EXPECT_NEAR(run(LossKind::Limit, v({-1.0}), v({-1.2}), p).value, 1.8, 1e-15);
  p.mu_pos = 0.5;
  p.mu_neg = 2.0;
  p.double_limit_lambda = 3.0;
  // [1 - 0.5]+ + 3 [2 - 1.2]+
  EXPECT_NEAR(run(LossKind::DoubleLimit, v({-1.0}), v({-1.2}), p).value, 0.5 + 2.4, 1e-12);
}

TEST(Loss, ParameterValidation) {
  LossParams p;
  p.margin = 0.0;
  EXPECT_THROW(run(LossKind::Margin, v({0}), v({0}), p), ParameterError);
  LossParams q;
  q.mu_pos = 2.0;
  q.mu_neg = 1.0;
  EXPECT_THROW(run(LossKind::DoubleLimit, v({0}), v({0}), q), ParameterError);
  EXPECT_THROW(run(LossKind::NLL, v({std::nan("")}), v({0}), {}), ParameterError);
  EXPECT_THROW(run(LossKind::NLL, v({0, 1}), v({0, 1, 2}), {}), ParameterError);
  EXPECT_THROW(run(LossKind::NLL, {}, v({0}), {}), ParameterError);
}

TEST(Loss, NamesRoundTrip) {
  for (auto k : {LossKind::Margin, LossKind::Limit, LossKind::DoubleLimit, LossKind::SelfAdversarial, LossKind::NLL,
                 LossKind::BCE}) {
    EXPECT_EQ(loss_from_string(to_string(k)), k);
  }
  EXPECT_FALSE(loss_from_string("hinge").has_value());
}

TEST(Loss, MonotoneInScores) {
  Rng rng(3);
  LossParams p;
  p.margin = 1.0;
  p.limit_mu = 0.5;
  p.mu_pos = 0.5;
  p.mu_neg = 1.5;
  for (auto k : {LossKind::Margin, LossKind::Limit, LossKind::DoubleLimit, LossKind::SelfAdversarial, LossKind::NLL,
                 LossKind::BCE}) {
    for (int i = 0; i < 100; ++i) {
      std::vector<double> pos{rng.uniform(-3, 0)}, neg{rng.uniform(-3, 0), rng.uniform(-3, 0)};
      const auto r = loss(k, pos, neg, p);
      EXPECT_LE(r.pos_grad[0], 0.0) << to_string(k);
      for (double g : r.neg_grad) EXPECT_GE(g, 0.0) << to_string(k);
      if (k == LossKind::Margin || k == LossKind::Limit || k == LossKind::DoubleLimit) {
        EXPECT_GE(r.value, 0.0);
      }
    }
  }
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  for (auto k : {LossKind::Margin, LossKind::Limit, LossKind::DoubleLimit, LossKind::SelfAdversarial, LossKind::NLL,
                 LossKind::BCE}) {
    const auto e = loss_gradient_check(k, 100, 1e-6, 9);
    EXPECT_TRUE(e.pass) << e.name << " " << e.max_rel_error;
  }
}
