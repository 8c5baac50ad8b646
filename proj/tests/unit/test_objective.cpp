#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "emphseg/errors.hpp"
#include "emphseg/objective.hpp"
#include "test_support.hpp"

using namespace emphseg;

namespace {

Tensor<double> probs_from_fg(const std::vector<double>& fg, std::size_t n, std::size_t h, std::size_t w) {
  Tensor<double> p(n, 2, h, w);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < h * w; ++i) {
      p.channel(s, 1)[i] = fg[s * h * w + i];
      p.channel(s, 0)[i] = 1.0 - fg[s * h * w + i];
    }
  }
  return p;
}

std::vector<std::uint8_t> half_mask(std::size_t size) {
  std::vector<std::uint8_t> m(size);
  for (std::size_t i = 0; i < size; ++i) m[i] = i % 2;
  return m;
}

}  // namespace

TEST(Loss, PerfectPredictionIsMinusOne) {
  for (std::size_t n : {1u, 3u}) {
    const auto mask = half_mask(n * 16);
    const auto y = one_hot<double>(mask, n, 4, 4);
    const auto l = segmentation_loss(y, y);
    EXPECT_NEAR(l.total, -1.0, 1e-6);
    EXPECT_EQ(l.ce_term, 0.0);
    // saturated logits approach the same value
    Tensor<double> logits(n, 2, 4, 4);
    for (std::size_t i = 0; i < y.size(); ++i) logits.data()[i] = y.data()[i] > 0.5 ? 40.0 : -40.0;
    EXPECT_NEAR(segmentation_loss_from_logits(y, logits).total, -1.0, 1e-6);
  }
}

TEST(Loss, EmptyForegroundPredictedEmptyIsMinusOne) {
  // no foreground anywhere: dice = eps / eps, so the smoothing term keeps it at 1
  const std::vector<std::uint8_t> mask(2 * 9, 0);
  const auto y = one_hot<double>(mask, 2, 3, 3);
  const auto l = segmentation_loss(y, y);
  EXPECT_EQ(l.dice_term, 1.0);
  EXPECT_NEAR(l.total, -1.0, 1e-6);
}

TEST(Loss, UniformPredictionOnHalfForeground) {
  const std::size_t n = 2, h = 8, w = 8, pixels = n * h * w;
  const auto y = one_hot<double>(half_mask(pixels), n, h, w);
  const auto p = probs_from_fg(std::vector<double>(pixels, 0.5), n, h, w);
  const auto l = segmentation_loss(y, p);
  EXPECT_NEAR(l.ce_term, std::numbers::ln2, 1e-9);
  // |Y| = pixels/2, sum(P) = pixels/2, |Y.P| = pixels/4
  const double fg = pixels / 2.0;
  const double oracle = (2.0 * (fg / 2.0) + kLossEps) / (fg + fg + kLossEps);
  EXPECT_NEAR(l.dice_term, oracle, 1e-12);
  EXPECT_NEAR(l.dice_term, 0.5, 1e-6);

  Tensor<double> zero_logits(n, 2, h, w);
  const auto lz = segmentation_loss_from_logits(y, zero_logits);
  EXPECT_NEAR(lz.ce_term, std::numbers::ln2, 1e-12);
  EXPECT_NEAR(lz.dice_term, oracle, 1e-12);
}

TEST(Loss, DiceIsBatchGlobal) {
  // sample 0 is perfect, sample 1 predicts nothing for its single foreground pixel
  std::vector<std::uint8_t> mask{1, 0, 0, 0, 1, 0, 0, 0};
  const auto y = one_hot<double>(mask, 2, 2, 2);
  const auto p = probs_from_fg({1, 0, 0, 0, 0, 0, 0, 0}, 2, 2, 2);
  const double oracle = (2.0 * 1.0 + kLossEps) / (2.0 + 1.0 + kLossEps);
  EXPECT_NEAR(segmentation_loss(y, p).dice_term, oracle, 1e-12);
}

TEST(Loss, ProbabilityGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::bernoulli_distribution b(0.3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2, h = 3, w = 3;
    std::vector<std::uint8_t> mask(n * h * w);
    for (auto& m : mask) m = b(rng);
    const auto y = one_hot<double>(mask, n, h, w);
    Tensor<double> p(n, 2, h, w);
    for (auto& v : p.values()) v = u(rng);  // independent entries: the loss is defined on any yhat
    Tensor<double> g;
    segmentation_loss(y, p, &g);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto q = p;
      const double eps = 1e-6;
      q.data()[i] += eps;
      const double up = segmentation_loss(y, q).total;
      q.data()[i] -= 2 * eps;
      const double down = segmentation_loss(y, q).total;
      EXPECT_NEAR(g.data()[i], (up - down) / (2 * eps), 1e-6) << "trial " << trial << " index " << i;
    }
  }
}

TEST(Loss, LogitGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z(0.0, 3.0);
  std::bernoulli_distribution b(0.4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3, h = 2, w = 3;
    std::vector<std::uint8_t> mask(n * h * w);
    for (auto& m : mask) m = b(rng);
    const auto y = one_hot<double>(mask, n, h, w);
    Tensor<double> logits(n, 2, h, w);
    for (auto& v : logits.values()) v = z(rng);
    Tensor<double> g;
    segmentation_loss_from_logits(y, logits, &g);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      auto q = logits;
      const double eps = 1e-6;
      q.data()[i] += eps;
      const double up = segmentation_loss_from_logits(y, q).total;
      q.data()[i] -= 2 * eps;
      const double down = segmentation_loss_from_logits(y, q).total;
      EXPECT_NEAR(g.data()[i], (up - down) / (2 * eps), 1e-7);
    }
  }
}

TEST(Loss, LogitAndProbabilityFormsAgree) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z(0.0, 2.0);
  const auto y = one_hot<double>(half_mask(32), 2, 4, 4);
  Tensor<double> logits(2, 2, 4, 4);
  for (auto& v : logits.values()) v = z(rng);
  const auto a = segmentation_loss_from_logits(y, logits);
  const auto b = segmentation_loss(y, net::softmax_channels(logits));
  EXPECT_NEAR(a.total, b.total, 1e-12);
  EXPECT_NEAR(a.dice_term, b.dice_term, 1e-15);
}

TEST(Loss, ShapeMismatchIsContractError) {
  Tensor<double> a(1, 2, 2, 2), b(1, 2, 2, 3), c(1, 3, 2, 2);
  EXPECT_THROW(segmentation_loss(a, b), ContractError);
  EXPECT_THROW(segmentation_loss(c, c), ContractError);
  EXPECT_THROW(one_hot<float>(std::vector<std::uint8_t>(3), 1, 2, 2), ContractError);
}

TEST(Dsc, ConfusionAndEdgeCases) {
  std::vector<std::uint8_t> pred{1, 1, 0, 0, 1}, ref{1, 0, 1, 0, 1};
  const auto c = confusion(pred, ref);
  EXPECT_EQ(c.tp, 2u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_EQ(c.tn, 1u);
  EXPECT_DOUBLE_EQ(dsc(pred, ref), 4.0 / 6.0);
  std::vector<std::uint8_t> empty(5, 0);
  EXPECT_EQ(dsc(empty, empty), 1.0);
  EXPECT_EQ(dsc(empty, ref), 0.0);
  EXPECT_THROW(confusion(pred, std::vector<std::uint8_t>(4)), ContractError);
}

TEST(Dsc, SymmetricAndBounded) {
  std::mt19937_64 rng(14);
  std::bernoulli_distribution b(0.3);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint8_t> p(40), r(40);
    for (auto& v : p) v = b(rng);
    for (auto& v : r) v = b(rng);
    const double d = dsc(p, r);
    EXPECT_EQ(d, dsc(r, p));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
    EXPECT_EQ(dsc(p, p), 1.0);
  }
}

TEST(EvalScan, SignedErrorIsRefMinusPred) {
  CtVolume v("s", ScannerTag("A"), {1, 2, 2}, {-1000, -990, -900, -800}, {1, 1, 1, 0}, {1, 1, 0, 0});
  Mask3 pred(v.dims(), {1, 0, 0, 0});
  const auto e = eval_scan(pred, v);
  EXPECT_DOUBLE_EQ(e.pct_emph_ref, 200.0 / 3.0);
  EXPECT_DOUBLE_EQ(e.pct_emph_pred, 100.0 / 3.0);
  EXPECT_DOUBLE_EQ(e.signed_error, e.pct_emph_ref - e.pct_emph_pred);
  EXPECT_DOUBLE_EQ(e.dsc, 2.0 / 3.0);
  EXPECT_EQ(e.scanner.id, "A");
  EXPECT_THROW(eval_scan(Mask3::zeros({1, 1, 4}), v), ContractError);
}

TEST(Predict, TiesGoToBackgroundAndLungBoundsPrediction) {
  net::NetworkConfig c;
  c.input_size = 16;
  c.base_channels = 4;
  c.n_down_stages = 2;
  c.gn_groups = 2;
  c.variant = net::Variant::kPlainUnet;
  Model m{c, net::init_params<float>(c)};
  auto& hw = m.params.at("head.conv.w").values;
  auto& hb = m.params.at("head.conv.b").values;
  std::fill(hw.begin(), hw.end(), 0.0f);
  hb = {0.25f, 0.25f};

  std::mt19937_64 rng(15);
  auto v = emphseg::testing::random_volume(rng, {3, 16, 16}, "p", "A", 0.5, -1024, -500);
  DomainContext ctx;
  EXPECT_EQ(predict_scan(m, v, ctx).count(), 0u);

  hb = {0.0f, 1.0f};
  const auto all = predict_scan(m, v, ctx);
  EXPECT_EQ(all.count(), v.lung_voxels());
  for (std::size_t i = 0; i < all.data.size(); ++i) EXPECT_LE(all.data[i], v.lung_mask()[i]);
}

TEST(DomainContext, FeatureDependsOnVariant) {
  std::mt19937_64 rng(16);
  auto v = emphseg::testing::random_volume(rng, {2, 4, 4}, "a", "A", 0.9, -1024, -700);
  const std::vector<CtVolume> refs{v};
  DomainContext ctx;
  ctx.priors[ScannerTag("A")] = cdf::cdf_of_scanner(refs);
  EXPECT_FALSE(ctx.feature_for(v).has_value());
  ctx.variant = net::Variant::kDattnScanner;
  const auto scanner = *ctx.feature_for(v);
  EXPECT_EQ(scanner.size(), cdf::BinEdges{}.bins);
  EXPECT_EQ(scanner.back(), 1.0f);
  ctx.variant = net::Variant::kDattnDiff;
  const auto diff = *ctx.feature_for(v);
  for (float x : diff) EXPECT_EQ(x, 0.0f);
  auto other = emphseg::testing::random_volume(rng, {2, 4, 4}, "b", "B", 0.9, -1024, -700);
  EXPECT_THROW(ctx.feature_for(other), ConfigError);
}
