#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "xgram/analysis.hpp"
#include "xgram/error.hpp"
#include "xgram/rng.hpp"

using namespace xgram;
using namespace xgram::analysis;
using injection::Site;

TEST(ActivationMagnitude, ThreeFourFive) {
  ActivationMagnitude am;
  Mat d(1, 2);
  d << 3, 4;
  const std::vector<TokenId> t{7};
  am.add(t, d);
  const auto r = am.result();
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.at(7).mean_norm, 5.0);
  EXPECT_EQ(r.count(3), 0u);
}

TEST(ActivationMagnitude, ZeroAndMean) {
  ActivationMagnitude am;
  const std::vector<TokenId> t{1, 2, 2};
  Mat d(3, 2);
  d << 0, 0, 1, 0, 0, 3;
  am.add(t, d);
  const auto r = am.result();
  EXPECT_EQ(r.at(1).mean_norm, 0.0);
  EXPECT_EQ(r.at(2).mean_norm, 2.0);
  EXPECT_EQ(r.at(2).samples, 2u);
}

TEST(LayerSimilarity, SignCases) {
  Mat e(2, 3);
  e << 1, 2, 3, -1, 0.5, 2;
  EXPECT_NEAR(layer_similarity(e, e).mean, 1.0, 1e-15);
  EXPECT_NEAR(layer_similarity(-e, e).mean, -1.0, 1e-15);
  Mat a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 2;
  EXPECT_EQ(layer_similarity(a, b).mean, 0.0);
  Mat h = e;
  h.row(1).setZero();
  const auto s = layer_similarity(h, e);
  EXPECT_EQ(s.used, 1u);
  EXPECT_EQ(s.skipped, 1u);
}

TEST(SlotCosine, IdenticalAndOrthogonal) {
  SplitMix64 rng(1);
  Mat v(5, 4);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
  const std::vector<Mat> same{v, v, v};
  const Mat m = slot_cosine(same);
  EXPECT_LT((m - Mat::Ones(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
  Mat a = Mat::Zero(5, 4), b = Mat::Zero(5, 4);
  a.col(0).setOnes();
  b.col(1).setOnes();
  const std::vector<Mat> orth{a, b};
  const Mat o = slot_cosine(orth);
  EXPECT_EQ(o(0, 1), 0.0);
  EXPECT_EQ(o(1, 0), 0.0);
  EXPECT_EQ(o(0, 0), 1.0);
  EXPECT_THROW(slot_cosine(std::vector<Mat>{a}), ValidationError);
}

TEST(SlotCosine, IndependentViewsNearZero) {
  SplitMix64 rng(2);
  std::vector<Mat> views;
  for (int m = 0; m < 3; ++m) {
    Mat v(10000, 128);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
    views.push_back(std::move(v));
  }
  const Mat c = slot_cosine(views);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i != j) EXPECT_LT(std::abs(c(i, j)), 0.05);
      EXPECT_EQ(c(i, j), c(j, i));
    }
}

TEST(HitConcentration, AllOnOneRow) {
  std::vector<double> h(500, 0.0);
  h[17] = 9;
  const auto r = hit_concentration(h);
  EXPECT_EQ(r[0], 1.0);
}

TEST(HitConcentration, UniformHits) {
  const std::vector<double> h(1000, 3.0);
  const auto r = hit_concentration(h);
  EXPECT_EQ(r[2], 0.1);
  EXPECT_EQ(r[1], 0.01);
  EXPECT_EQ(r[0], 0.001);
  EXPECT_THROW(hit_concentration(std::vector<double>(10, 0.0)), ValidationError);
}

TEST(HitConcentration, MonotoneInFraction) {
  SplitMix64 rng(3);
  std::vector<double> h(3000);
  for (auto& x : h) x = std::floor(100 * std::pow(rng.uniform(), 6));
  h[0] += 1;
  const auto r = hit_concentration(h);
  EXPECT_LE(r[0], r[1]);
  EXPECT_LE(r[1], r[2]);
  EXPECT_LE(r[2], 1.0);
}

TEST(Percentile, LinearInterpolation) {
  const std::vector<double> v{4, 1, 3, 2};
  EXPECT_EQ(percentile(v, 0.25), 1.75);
  EXPECT_EQ(percentile(v, 0.75), 3.25);
  EXPECT_EQ(median(v), 2.5);
}

namespace {

// Rows of `init` are unit vectors; `values` moves row j by m[j].
std::pair<Mat, Mat> moved(const std::vector<double>& m) {
  Mat init = Mat::Zero(m.size(), 2), values = Mat::Zero(m.size(), 2);
  for (std::size_t j = 0; j < m.size(); ++j) {
    init(j, 0) = 1.0;
    values(j, 0) = 1.0;
    values(j, 1) = m[j];
  }
  return {values, init};
}

}  // namespace

TEST(MovementStats, HandComputedOneToFour) {
  const auto [values, init] = moved({1, 2, 3, 4});
  const std::vector<routing::RowIndex> rows{0, 1, 2, 3};
  const auto s = movement_stats(values, init, rows);
  EXPECT_EQ(s.movement, (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, 1.11803, 5e-6);
  EXPECT_NEAR(s.cv, 0.44721, 5e-6);
  EXPECT_EQ(s.p25, 1.75);
  EXPECT_EQ(s.p75, 3.25);
  EXPECT_NEAR(s.gap, 1.85714, 5e-6);
}

TEST(MovementStats, EqualMovement) {
  const auto [values, init] = moved({0.5, 0.5, 0.5});
  const std::vector<routing::RowIndex> rows{0, 1, 2};
  const auto s = movement_stats(values, init, rows);
  EXPECT_EQ(s.cv, 0.0);
  EXPECT_EQ(s.gap, 1.0);
}

TEST(MovementStats, ScaleCovariant) {
  SplitMix64 rng(4);
  Mat init(20, 3), step(20, 3);
  for (Eigen::Index i = 0; i < init.size(); ++i) {
    init.data()[i] = rng.normal();
    step.data()[i] = rng.normal();
  }
  std::vector<routing::RowIndex> rows;
  for (routing::RowIndex r = 0; r < 20; r += 2) rows.push_back(r);
  const auto a = movement_stats(init + step, init, rows);
  const auto b = movement_stats(init + 3.0 * step, init, rows);
  for (std::size_t j = 0; j < rows.size(); ++j) EXPECT_NEAR(b.movement[j], 3 * a.movement[j], 1e-12);
  EXPECT_NEAR(a.cv, b.cv, 1e-12);
  EXPECT_NEAR(a.gap, b.gap, 1e-12);
}

TEST(MovementStats, RejectsZeroInitRowAndEmptySet) {
  const Mat z = Mat::Zero(2, 2);
  const std::vector<routing::RowIndex> rows{0};
  EXPECT_THROW(movement_stats(z, z, rows), ValidationError);
  EXPECT_THROW(movement_stats(z, z, std::vector<routing::RowIndex>{}), ValidationError);
}

TEST(Budget, Kappa) { EXPECT_EQ(kappa(1, 3), 8u); }

TEST(Budget, ReferenceScaleVHash) {
  const std::uint64_t V = 151936, d = 1536, dkv = 768;  // h = 12, h_kv = 6
  const auto b = site_budget(Site::kV, V, d, dkv, 0.5, 2, 3);
  EXPECT_EQ(b.params, 58343424u);
  EXPECT_EQ(b.dims, 768u);
  EXPECT_EQ(b.flops, kappa(2, 3) * 768);
}

TEST(Budget, FullRhoEqualsPlain) {
  const auto hashed = site_budget(Site::kV, 1000, 64, 32, 1.0, 1, 3);
  EXPECT_EQ(hashed.params, 1000u * 32);
  EXPECT_EQ(hashed.dims, 32u);
}

TEST(Budget, ReferenceTableRows) {
  const std::uint64_t V = 151936, d = 1536, dkv = 768, K = 2, k = 3;
  const auto rows = budget_table(V, d, dkv, 0.5, K, k);
  ASSERT_EQ(rows.size(), 7u);
  const std::uint64_t kf = K + 2 * k + 1;
  const std::vector<std::tuple<std::uint64_t, std::uint64_t, std::uint64_t>> expect{
      {V * dkv, dkv, kf * dkv},  {V * dkv, dkv, kf * dkv}, {V * dkv, dkv, kf * dkv},
      {V * d, d, kf * d},        {V * d, d, kf * d},
      {V / 2 * dkv, dkv, kf * dkv}, {V / 2 * d, d, kf * d}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].budget.params, std::get<0>(expect[i])) << rows[i].label;
    EXPECT_EQ(rows[i].budget.dims, std::get<1>(expect[i])) << rows[i].label;
    EXPECT_EQ(rows[i].budget.flops, std::get<2>(expect[i])) << rows[i].label;
  }
}

TEST(Offload, HandExampleAndLinearity) {
  EXPECT_EQ(offload_time(std::vector<std::uint64_t>{0}, 768, 2, 16e9), 0.0);
  const double t = offload_time(std::vector<std::uint64_t>{1000}, 768, 2, 16e9);
  EXPECT_DOUBLE_EQ(t, 9.6e-5);
  EXPECT_DOUBLE_EQ(offload_time(std::vector<std::uint64_t>{1000}, 768, 2, 32e9), t / 2);
  EXPECT_THROW(offload_time(std::vector<std::uint64_t>{1}, 768, 2, 0.0), ValidationError);
}

TEST(Offload, BoundEnforced) {
  train::AccessRecord r;
  r.width = 768;
  r.rows = 5000;
  r.max_paths = 2;
  r.unique_tokens = 500;
  r.unique_rows = 1000;
  const std::vector<train::AccessRecord> ok{r};
  EXPECT_DOUBLE_EQ(offload_time(ok, 2, 16e9), 9.6e-5);
  r.unique_rows = 1001;  // > K * U
  EXPECT_THROW(offload_time(std::vector<train::AccessRecord>{r}, 2, 16e9), ValidationError);
  r.unique_tokens = 10000;
  r.unique_rows = 5001;  // > S
  EXPECT_THROW(offload_time(std::vector<train::AccessRecord>{r}, 2, 16e9), ValidationError);
}

TEST(LinearStacking, SumOfMapsIsOneMap) {
  SplitMix64 rng(5);
  for (int K = 1; K <= 8; ++K) {
    const int d = 16;
    Mat sum = Mat::Zero(d, d);
    Vec z(d), stacked = Vec::Zero(d);
    for (int i = 0; i < d; ++i) z(i) = rng.normal();
    for (int k = 0; k < K; ++k) {
      Mat W(d, d);
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
      stacked += W * z;
      sum += W;
    }
    const Vec single = sum * z;
    const double scale = single.cwiseAbs().maxCoeff() + stacked.cwiseAbs().maxCoeff();
    EXPECT_LE((stacked - single).cwiseAbs().maxCoeff(), 8 * K * d * std::numeric_limits<double>::epsilon() * scale);
  }
}
