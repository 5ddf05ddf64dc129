#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mvpcbm/bundle.hpp"
#include "mvpcbm/error.hpp"
#include "mvpcbm/head.hpp"
#include "mvpcbm/icpm.hpp"
#include "mvpcbm/mcsaf.hpp"

namespace {

#include "oracle_values.inc"

using namespace mvpcbm;
using namespace mvpcbm::ad;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// ---- preference -----------------------------------------------------------------------

TEST(Preference, ClassTokenEqualToAttributeGivesSigmoidOne) {
  Tape t;
  auto T = t.constant(Tensor({1, 3}, {0.3, -0.4, 1.2}));
  auto raw = icpm::raw_preference(t.constant(Tensor({3}, {0.3, -0.4, 1.2})), T);
  EXPECT_NEAR(raw.value()[0], kSigmoidOne, 1e-15);
}

TEST(Preference, NormalizationExample) {
  Tape t;
  auto p = icpm::normalize_preference(t.constant(Tensor({2}, {0.7311, 0.5})), t.scalar(0.2));
  EXPECT_NEAR(p.value()[0], kSoftmaxTemp0, 1e-14);
  EXPECT_NEAR(p.value()[1], kSoftmaxTemp1, 1e-14);
}

TEST(Preference, RowsSumToOne) {
  std::mt19937_64 rng(1);
  Tape t;
  auto p = icpm::preference_matrix(t.constant(random_tensor({5, 8}, rng)), t.constant(random_tensor({4, 8}, rng)),
                                   t.scalar(0.2));
  ASSERT_EQ(p.shape(), (Shape{5, 4}));
  for (std::size_t l = 0; l < 5; ++l) {
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) s += p.value()[l * 4 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Preference, UniformIsOneOverM) {
  Tape t;
  auto p = icpm::uniform_preference(t, 3, 4);
  for (double v : p.value()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Preference, NonPositiveTemperatureRejected) {
  Tape t;
  auto raw = t.constant(Tensor({2}, {0.1, 0.2}));
  EXPECT_THROW(icpm::normalize_preference(raw, t.scalar(0.0)), Error);
}

TEST(Preference, NoiselessSampleFavoursPlantedAttribute) {
  SynthConfig c;
  c.n_samples = 5;
  c.n_layers = 4;
  c.n_attributes = 3;
  c.planted_layer = {0, 1, 2};
  c.noise_scale = 0.0;
  const auto b = generate_synthetic(c);
  for (std::size_t s = 0; s < b.n_samples; ++s) {
    Tape t;
    auto sv = sample_vars(t, b, s, false);
    auto p = icpm::preference_matrix(sv.cls_tokens, sv.attribute_embeddings, t.scalar(0.2));
    for (std::size_t i = 0; i < 3; ++i) {
      const auto row = p.value().subspan(c.planted_layer[i] * 3, 3);
      EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(), static_cast<std::ptrdiff_t>(i));
    }
  }
}

// ---- pooling --------------------------------------------------------------------------

TEST(Pooling, FivePatchesTwoAttributes) {
  const auto plan = mcsaf::PoolingPlan::make(5, 2);
  EXPECT_EQ(plan.bounds, (std::vector<std::size_t>{0, 2, 5}));
  std::mt19937_64 rng(2);
  Tape t;
  auto x = random_tensor({5, 3}, rng);
  auto pooled = mcsaf::attribute_pool(t.constant(x), plan);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(pooled.value()[c], (x.data[c] + x.data[3 + c]) / 2, 1e-15);
    EXPECT_NEAR(pooled.value()[3 + c], (x.data[6 + c] + x.data[9 + c] + x.data[12 + c]) / 3, 1e-15);
  }
}

TEST(Pooling, SegmentsAreContiguousAndCover) {
  for (std::size_t np = 1; np <= 20; ++np)
    for (std::size_t m = 1; m <= np; ++m) {
      const auto plan = mcsaf::PoolingPlan::make(np, m);
      ASSERT_EQ(plan.bounds.front(), 0u);
      ASSERT_EQ(plan.bounds.back(), np);
      for (std::size_t i = 0; i < m; ++i) ASSERT_LT(plan.bounds[i], plan.bounds[i + 1]) << np << " " << m;
    }
}

TEST(Pooling, TooFewPatches) {
  try {
    mcsaf::PoolingPlan::make(2, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewPatches);
  }
}

TEST(Pooling, LayerBatchedMatchesPerLayer) {
  std::mt19937_64 rng(3);
  const auto plan = mcsaf::PoolingPlan::make(7, 3);
  Tape t;
  auto x = random_tensor({4, 7, 5}, rng);
  auto all = mcsaf::attribute_pool_layers(t.constant(x), plan);
  for (std::size_t l = 0; l < 4; ++l) {
    Tensor layer({7, 5}, std::vector<double>(x.data.begin() + l * 35, x.data.begin() + (l + 1) * 35));
    auto one = mcsaf::attribute_pool(t.constant(layer), plan);
    for (std::size_t r = 0; r < 15; ++r) EXPECT_NEAR(all.value()[l * 15 + r], one.value()[r], 1e-15);
  }
}

// ---- fusion ---------------------------------------------------------------------------

TEST(Fusion, LayerSoftmaxOfOneTwoThree) {
  Tape t;
  auto w = mcsaf::layer_softmax(t.constant(Tensor({3, 1, 1}, {1, 2, 3})));
  EXPECT_NEAR(w.value()[0], kSoftmax123_0, 1e-15);
  EXPECT_NEAR(w.value()[1], kSoftmax123_1, 1e-15);
  EXPECT_NEAR(w.value()[2], kSoftmax123_2, 1e-15);
}

TEST(Fusion, AdjustWeightExample) {
  Tape t;
  auto adj = mcsaf::adjust_weights(t.constant(Tensor({1, 1}, {0.3})), t.constant(Tensor({1}, {0.2})), t.scalar(0.2));
  EXPECT_NEAR(adj.item(), kAdjusted, 1e-15);
}

TEST(Fusion, AdjustClampsExponent) {
  Tape t;
  auto adj = mcsaf::adjust_weights(t.constant(Tensor({1, 2}, {0.9, 0.1})), t.constant(Tensor({1}, {0.1})),
                                   t.scalar(1000.0));
  EXPECT_NEAR(adj.value()[0], 0.9 * std::exp(30.0), 1e-3);
  EXPECT_EQ(t.clamp_events(), 1u);
}

TEST(Fusion, SoftMaskExample) {
  Tape t;
  auto m = mcsaf::soft_mask(t.constant(Tensor({1, 1}, {0.3})), t.constant(Tensor({1}, {0.2})), 50.0);
  EXPECT_NEAR(m.item(), kSoftMaskBeta50, 1e-15);
}

TEST(Fusion, ThresholdEndpoints) {
  Tape t;
  auto w = t.constant(Tensor({2, 3}, {0.1, 0.5, 0.3, 0.2, 0.2, 0.6}));
  auto lo = mcsaf::adaptive_threshold(w, t.scalar(-1000.0));
  auto hi = mcsaf::adaptive_threshold(w, t.scalar(1000.0));
  EXPECT_NEAR(lo.value()[0], 0.1, 1e-12);
  EXPECT_NEAR(hi.value()[0], 0.5, 1e-12);
  EXPECT_NEAR(lo.value()[1], 0.2, 1e-12);
  EXPECT_NEAR(hi.value()[1], 0.6, 1e-12);
}

TEST(Fusion, HardMaskKeepsLayerMaximum) {
  const Tensor w({2, 3}, {0.1, 0.5, 0.3, 0.2, 0.2, 0.6});
  const std::vector<double> theta{0.55, 0.7};  // both above the layer maximum
  const auto m = mcsaf::hard_mask(w, theta);
  EXPECT_EQ(m.data, (std::vector<double>{0, 1, 0, 0, 0, 1}));
}

TEST(Fusion, AllOnesMaskSparsityIsOne) {
  EXPECT_DOUBLE_EQ(mcsaf::sparsity_fraction(Tensor({2, 3}, std::vector<double>(6, 1.0))), 1.0);
}

TEST(Fusion, AggregateSumsOverLayers) {
  std::mt19937_64 rng(4);
  Tape t;
  auto mask = Tensor({2, 1, 2}, {1, 0, 1, 1});
  auto adj = random_tensor({2, 1, 2}, rng), s = random_tensor({2, 1, 2}, rng);
  auto agg = mcsaf::sparse_aggregate(t.constant(mask), t.constant(adj), t.constant(s));
  ASSERT_EQ(agg.shape(), (Shape{1, 2}));
  EXPECT_NEAR(agg.value()[0], adj.data[0] * s.data[0] + adj.data[2] * s.data[2], 1e-15);
  EXPECT_NEAR(agg.value()[1], adj.data[3] * s.data[3], 1e-15);
}

TEST(Fusion, RaisingKNeverIncreasesSparsity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Tape t;
    auto w = mcsaf::layer_softmax(t.constant(random_tensor({4, 3, 3}, rng, -2, 2)));
    const Tensor wt(w.shape(), {w.value().begin(), w.value().end()});
    double prev = 2.0;
    for (double K = -6.0; K <= 6.0; K += 0.5) {
      auto theta = mcsaf::adaptive_threshold(w, t.scalar(K));
      const double frac = mcsaf::sparsity_fraction(mcsaf::hard_mask(wt, theta.value()));
      EXPECT_LE(frac, prev);
      prev = frac;
    }
  }
}

TEST(Fusion, NoiselessTrueConceptPeaksAtPlantedLayer) {
  SynthConfig c;
  c.n_samples = 4;
  c.n_layers = 5;
  c.n_attributes = 2;
  c.planted_layer = {1, 3};
  c.noise_scale = 0.0;
  const auto b = generate_synthetic(c);
  const HeadParams params = HeadParams::init(c.n_classes, c.n_attributes * c.n_concepts, TrainConfig{});
  for (std::size_t s = 0; s < b.n_samples; ++s) {
    Tape t;
    auto p = bind_params(t, params, false);
    auto f = forward_prepared(t, p, prepare_sample(b, s), TrainConfig{});
    const auto cl = b.sample_concept_labels(s);
    const auto k = c.n_concepts, m = c.n_attributes;
    for (std::size_t i = 0; i < m; ++i) {
      const double at_planted = f.scores.value()[(c.planted_layer[i] * m + i) * k + cl[i]];
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        if (l == c.planted_layer[i]) continue;
        EXPECT_GT(at_planted, f.scores.value()[(l * m + i) * k + cl[i]]);
      }
    }
  }
}

}  // namespace
