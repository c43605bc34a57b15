#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "gem/metrics.hpp"
#include "oracles.hpp"

using gem::Tensor;

namespace {

constexpr std::int32_t kIgnore = 65535;

std::vector<std::int32_t> random_labels(std::mt19937_64& rng, std::size_t n, int classes, bool with_ignore) {
  std::uniform_int_distribution<int> d(with_ignore ? -1 : 0, classes - 1);
  std::vector<std::int32_t> out(n);
  for (auto& v : out) {
    const int x = d(rng);
    v = x < 0 ? kIgnore : x;
  }
  return out;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor(rng, {r, c}, 1.0);
}

std::vector<double> row(const Tensor& t, std::size_t i) { return {t.row(i).begin(), t.row(i).end()}; }

double cos_pos(const std::vector<double>& a, const std::vector<double>& b) {
  return std::max(0.0, oracle::dot(a, b) / (oracle::norm(a) * oracle::norm(b)));
}

gem::PointPrediction mask_of(std::size_t h, std::size_t w, std::vector<std::uint8_t> m) {
  return {h, w, std::move(m), 0.0, 1.0, false};
}

}  // namespace

// mIoU

TEST(Miou, IdenticalIsOne) {
  const std::vector<std::int32_t> a = {0, 1, 2, 2, 1, 0};
  const auto s = gem::miou(a, a, 3, kIgnore);
  EXPECT_EQ(s.mean_iou, 1.0);
  EXPECT_EQ(s.classes_counted, 3u);
}

TEST(Miou, DisjointSingleClassIsZero) {
  const std::vector<std::int32_t> pred = {0, 0, -1, -1}, gt = {-1, -1, 0, 0};
  // Ground truth uses -1 as the ignore value here: only pixels 2 and 3 count.
  const auto s = gem::miou(pred, gt, 1, -1);
  EXPECT_EQ(s.iou[0], 0.0);
  const std::vector<std::int32_t> gt2 = {1, 1, 0, 0};
  EXPECT_EQ(gem::miou(pred, gt2, 2, kIgnore).iou[0], 0.0);
}

TEST(Miou, AbsentClassesExcludedFromMean) {
  const std::vector<std::int32_t> pred = {0, 0, 1, 1}, gt = {0, 0, 1, 0};
  const auto s = gem::miou(pred, gt, 4, kIgnore);
  EXPECT_TRUE(std::isnan(s.iou[2]));
  EXPECT_TRUE(std::isnan(s.iou[3]));
  EXPECT_EQ(s.classes_counted, 2u);
  EXPECT_DOUBLE_EQ(s.mean_iou, (2.0 / 3.0 + 0.5) / 2.0);
}

TEST(Miou, MatchesCountingOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto gt = random_labels(rng, 64, 3, true);
    auto pred = random_labels(rng, 64, 3, false);
    if (trial % 4 == 0) pred[trial % 64] = -1;  // background predictions count as no class
    const auto s = gem::miou(pred, gt, 3, kIgnore);
    const auto ref = oracle::iou_counts({pred.begin(), pred.end()}, {gt.begin(), gt.end()}, 3, kIgnore);
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(s.intersection[c], ref.inter[c]);
      EXPECT_EQ(s.union_[c], ref.uni[c]);
      EXPECT_LE(s.intersection[c], s.union_[c]);
    }
  }
}

TEST(Miou, SymmetricInPredictionAndTruth) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_labels(rng, 64, 4, false), b = random_labels(rng, 64, 4, false);
    const auto ab = gem::miou(a, b, 4, kIgnore), ba = gem::miou(b, a, 4, kIgnore);
    for (int c = 0; c < 4; ++c) {
      if (std::isnan(ab.iou[c])) EXPECT_TRUE(std::isnan(ba.iou[c]));
      else EXPECT_EQ(ab.iou[c], ba.iou[c]);
    }
  }
}

TEST(Miou, AccumulationOrderIndependent) {
  std::mt19937_64 rng(9);
  std::vector<std::vector<std::int32_t>> preds, gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(random_labels(rng, 30, 5, false));
    gts.push_back(random_labels(rng, 30, 5, true));
  }
  gem::IoUAccumulator fwd(5), rev(5);
  for (int i = 0; i < 6; ++i) fwd.add(preds[i], gts[i], kIgnore);
  for (int i = 5; i >= 0; --i) rev.add(preds[i], gts[i], kIgnore);
  EXPECT_EQ(fwd.stats().intersection, rev.stats().intersection);
  EXPECT_EQ(fwd.stats().union_, rev.stats().union_);
  EXPECT_EQ(fwd.stats().mean_iou, rev.stats().mean_iou);
}

TEST(Miou, Errors) {
  const std::vector<std::int32_t> a = {0, 1}, b = {0}, bad = {0, 7};
  EXPECT_THROW(gem::miou(a, b, 2, kIgnore), gem::DimensionError);
  EXPECT_THROW(gem::miou(a, bad, 2, kIgnore), gem::ParameterError);
}

// point mIoU

TEST(PointMiou, PerfectSeparationIsOne) {
  std::map<gem::PointKey, gem::PointPrediction> preds;
  preds[{"img", "cat"}] = mask_of(2, 2, {1, 0, 0, 0});
  const std::vector<gem::PointAnnotation> pts = {{"img", "cat", 0.1, 0.1, true}, {"img", "cat", 0.9, 0.9, false}};
  const auto r = gem::point_miou(preds, pts);
  EXPECT_EQ(r.mean_iou, 1.0);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0].tp, 1u);
}

TEST(PointMiou, EmptyMaskIsZero) {
  std::map<gem::PointKey, gem::PointPrediction> preds;
  preds[{"img", "cat"}] = mask_of(2, 2, {0, 0, 0, 0});
  const std::vector<gem::PointAnnotation> pts = {{"img", "cat", 0.1, 0.1, true}, {"img", "cat", 0.6, 0.1, false}};
  EXPECT_EQ(gem::point_miou(preds, pts).mean_iou, 0.0);
}

TEST(PointMiou, PairsWithoutPositivesExcluded) {
  std::map<gem::PointKey, gem::PointPrediction> preds;
  preds[{"a", "cat"}] = mask_of(1, 1, {1});
  const std::vector<gem::PointAnnotation> pts = {{"a", "cat", 0.5, 0.5, true}, {"a", "dog", 0.5, 0.5, false}};
  const auto r = gem::point_miou(preds, pts);
  EXPECT_EQ(r.pairs.size(), 1u);
  ASSERT_EQ(r.excluded_no_positive.size(), 1u);
  EXPECT_EQ(r.excluded_no_positive[0], (gem::PointKey{"a", "dog"}));
}

TEST(PointMiou, MissingPredictionRejected) {
  const std::vector<gem::PointAnnotation> pts = {{"a", "cat", 0.5, 0.5, true}};
  EXPECT_THROW(gem::point_miou({}, pts), gem::ParameterError);
}

TEST(PointMiou, MatchesCountingOracleAndIgnoresOrder) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 30; ++trial) {
    std::map<gem::PointKey, gem::PointPrediction> preds;
    std::vector<gem::PointAnnotation> pts;
    const std::vector<std::string> images = {"i0", "i1", "i2"}, classes = {"a", "b"};
    for (const auto& im : images)
      for (const auto& c : classes) {
        std::vector<std::uint8_t> m(6 * 5);
        for (auto& v : m) v = coin(rng);
        preds[{im, c}] = mask_of(6, 5, m);
        pts.push_back({im, c, u(rng), u(rng), true});
        for (int k = 0; k < 6; ++k) pts.push_back({im, c, u(rng), u(rng), coin(rng)});
      }
    const auto r = gem::point_miou(preds, pts);
    double sum = 0.0;
    std::size_t pairs = 0;
    for (const auto& [key, pred] : preds) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (const auto& p : pts) {
        if (p.image_id != key.first || p.class_name != key.second) continue;
        const auto x = std::min<std::size_t>(static_cast<std::size_t>(p.x_rel * 5), 4);
        const auto y = std::min<std::size_t>(static_cast<std::size_t>(p.y_rel * 6), 5);
        const bool on = pred.mask[y * 5 + x];
        if (p.positive && on) ++tp;
        else if (p.positive) ++fn;
        else if (on) ++fp;
      }
      sum += double(tp) / double(tp + fp + fn);
      ++pairs;
    }
    EXPECT_DOUBLE_EQ(r.mean_iou, sum / double(pairs));
    auto shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_DOUBLE_EQ(gem::point_miou(preds, shuffled).mean_iou, r.mean_iou);
  }
}

// patch-patch similarity

TEST(PatchPatchSimilarity, Examples) {
  EXPECT_NEAR(gem::patch_patch_similarity(Tensor::matrix(2, 2, {0.6f, 0.8f, 0.6f, 0.8f})), 1.0, 1e-7);
  EXPECT_EQ(gem::patch_patch_similarity(Tensor::matrix(2, 2, {1, 0, 0, 3})), 0.0);
  EXPECT_THROW(gem::patch_patch_similarity(Tensor::matrix(1, 2, {1, 0})), gem::ParameterError);
}

TEST(PatchPatchSimilarity, MatchesDoubleLoop) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_matrix(6, 4, seed);
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        if (i != j) s += oracle::dot(row(x, i), row(x, j));
    EXPECT_NEAR(gem::patch_patch_similarity(x), s / 30.0, 1e-6);
    const double c = gem::patch_patch_similarity(x, true);
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
}

// contrast

TEST(Contrast, IdenticalInsideOrthogonalOutside) {
  const Tensor x = Tensor::matrix(4, 3, {1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0};
  const auto t = gem::object_background_contrast(x, mask);
  EXPECT_NEAR(t.inside, 1.0, 1e-7);
  EXPECT_EQ(t.outside, 0.0);
  EXPECT_NEAR(t.contrast, 1.0, 1e-7);
}

TEST(Contrast, AllTokensIdenticalIsZero) {
  const Tensor x = Tensor::filled({5, 3}, 0.5f);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0};
  EXPECT_NEAR(gem::object_background_contrast(x, mask).contrast, 0.0, 1e-7);
}

TEST(Contrast, ZeroOverZeroIsZero) {
  const Tensor x = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<std::uint8_t> mask = {1, 1, 0};
  EXPECT_EQ(gem::object_background_contrast(x, mask).contrast, 0.0);
}

TEST(Contrast, MatchesScalarOracleAndBounded) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Tensor x = random_matrix(9, 4, seed);
    std::vector<std::uint8_t> mask(9);
    for (auto& v : mask) v = coin(rng);
    mask[0] = 1;
    mask[8] = 0;
    double in_in = 0.0, in_out = 0.0;
    std::size_t m = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      if (!mask[i]) continue;
      ++m;
      for (std::size_t j = 0; j < 9; ++j)
        if (j != i) (mask[j] ? in_in : in_out) += cos_pos(row(x, i), row(x, j));
    }
    const double a = m > 1 ? in_in / double(m * (m - 1)) : 0.0, b = in_out / double(m * (9 - m));
    const double ref = a + b == 0.0 ? 0.0 : (a - b) / (a + b);
    const auto t = gem::object_background_contrast(x, mask);
    EXPECT_NEAR(t.contrast, ref, 1e-6);
    EXPECT_GE(t.contrast, -1.0);
    EXPECT_LE(t.contrast, 1.0);

    const Tensor txt = random_matrix(1, 4, seed + 1000);
    double obj = 0.0, bg = 0.0;
    for (std::size_t i = 0; i < 9; ++i) (mask[i] ? obj : bg) += cos_pos(row(x, i), row(txt, 0));
    obj /= double(m);
    bg /= double(9 - m);
    const double tref = obj + bg == 0.0 ? 0.0 : (obj - bg) / (obj + bg);
    const auto tc = gem::text_object_background_contrast(x, txt.row(0), mask);
    EXPECT_NEAR(tc.contrast, tref, 1e-6);
    EXPECT_GE(tc.contrast, -1.0);
    EXPECT_LE(tc.contrast, 1.0);
  }
}

TEST(Contrast, MaskMustSplitTokens) {
  const Tensor x = random_matrix(3, 2, 1);
  const std::vector<std::uint8_t> all = {1, 1, 1}, none = {0, 0, 0}, short_mask = {1, 0};
  EXPECT_THROW(gem::object_background_contrast(x, all), gem::ParameterError);
  EXPECT_THROW(gem::object_background_contrast(x, none), gem::ParameterError);
  EXPECT_THROW(gem::object_background_contrast(x, short_mask), gem::DimensionError);
  const std::vector<float> t = {1, 0};
  EXPECT_THROW(gem::text_object_background_contrast(x, t, all), gem::ParameterError);
}

TEST(TextContrast, ObjectOnTextIsOne) {
  const Tensor x = Tensor::matrix(4, 2, {1, 0, 2, 0, 0, 1, 0, 3});
  const std::vector<float> t = {1, 0};
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0};
  EXPECT_NEAR(gem::text_object_background_contrast(x, t, mask).contrast, 1.0, 1e-7);
}

TEST(TextContrast, BackgroundCloserIsNegative) {
  const Tensor x = Tensor::matrix(4, 2, {0.2f, 1, 0.1f, 1, 1, 0.1f, 1, 0});
  const std::vector<float> t = {1, 0};
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0};
  EXPECT_LT(gem::text_object_background_contrast(x, t, mask).contrast, 0.0);
}

TEST(TextContrast, WidthMismatch) {
  const std::vector<float> t = {1, 0, 0};
  const std::vector<std::uint8_t> mask = {1, 0};
  EXPECT_THROW(gem::text_object_background_contrast(random_matrix(2, 2, 1), t, mask), gem::DimensionError);
}

// Lipschitz constants

TEST(Lipschitz, ScaledIdentityProjections) {
  for (float scale : {1.0f, 0.5f}) {
    gem::WeightBundle b = oracle::random_bundle(oracle::tiny_config(3, 8, 2), 1);
    for (auto& l : b.layers)
      for (Tensor* w : {&l.wq, &l.wk, &l.wv}) {
        *w = Tensor({8, 8});
        for (std::size_t i = 0; i < 8; ++i) (*w)(i, i) = scale;
      }
    const auto r = gem::lipschitz_constants(b);
    ASSERT_EQ(r.entries.size(), 9u);
    for (const auto& e : r.entries) {
      EXPECT_NEAR(e.full, scale, 1e-6);
      ASSERT_EQ(e.per_head.size(), 2u);
      for (double v : e.per_head) EXPECT_NEAR(v, scale, 1e-6);
    }
    for (const char* k : {"q", "k", "v"}) {
      EXPECT_NEAR(r.per_head_summary.at(k).mean, scale, 1e-6);
      EXPECT_NEAR(r.full_summary.at(k).stddev, 0.0, 1e-6);
    }
  }
}

TEST(Lipschitz, MatchesSingularValues) {
  const gem::WeightBundle b = oracle::random_bundle(oracle::tiny_config(2, 8, 2), 4);
  const auto r = gem::lipschitz_constants(b);
  for (const auto& e : r.entries) {
    const Tensor& w = gem::projection_weight(b.layers[e.layer], e.projection);
    EXPECT_NEAR(e.full, oracle::singular_values(w)[0], 1e-5);
    EXPECT_GE(e.full + 1e-9, *std::max_element(e.per_head.begin(), e.per_head.end()));
  }
}
