#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "xgram/error.hpp"
#include "xgram/rng.hpp"
#include "xgram/shortconv.hpp"

using namespace xgram;
using namespace xgram::shortconv;
using xgram::testing::central_difference;
using xgram::testing::rel_error;

namespace {

Mat random_mat(SplitMix64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

Params random_params(SplitMix64& rng, std::size_t d, std::size_t k) {
  Params p;
  p.kernel_size = k;
  p.content = random_mat(rng, d, k, 0.7);
  p.gate = random_mat(rng, d, k, 0.7);
  p.bias = random_mat(rng, d, 1, 0.5).col(0);
  return p;
}

Params closed_gate(std::size_t d, std::size_t k, SplitMix64& rng) {
  Params p = random_params(rng, d, k);
  p.gate.setZero();
  p.bias.setZero();
  return p;
}

// Position-by-position reimplementation of E + C(rmsnorm(E)).
Mat naive_extract(const Mat& E, const Params& p) {
  const auto T = E.rows(), d = E.cols();
  const auto k = static_cast<Eigen::Index>(p.kernel_size);
  Mat n(T, d), out(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    double ms = 0;
    for (Eigen::Index c = 0; c < d; ++c) ms += E(t, c) * E(t, c);
    const double inv = 1.0 / std::sqrt(ms / d + p.rms_eps);
    for (Eigen::Index c = 0; c < d; ++c) n(t, c) = E(t, c) * inv;
  }
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index c = 0; c < d; ++c) {
      double a = 0, g = p.bias(c);
      for (Eigen::Index i = 0; i < k; ++i) {
        const Eigen::Index src = t - (k - 1) + i;
        if (src < 0) continue;
        a += p.content(c, i) * n(src, c);
        g += p.gate(c, i) * n(src, c);
      }
      out(t, c) = E(t, c) + a * g / (1.0 + std::exp(-g));
    }
  return out;
}

}  // namespace

TEST(RmsNorm, ConstantRow) {
  Mat x(1, 4);
  x << 2, 2, 2, 2;
  const Mat y = rmsnorm(x);
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(y(0, c), 1.0, 1e-6);
}

TEST(RmsNorm, ZeroRowStaysZero) {
  const Mat y = rmsnorm(Mat::Zero(2, 5));
  EXPECT_EQ(y, Mat::Zero(2, 5));
}

TEST(RmsNorm, UnitRmsRows) {
  SplitMix64 rng(1);
  const Mat y = rmsnorm(random_mat(rng, 50, 16, 3.0));
  for (Eigen::Index t = 0; t < y.rows(); ++t)
    EXPECT_NEAR(std::sqrt(y.row(t).squaredNorm() / 16), 1.0, 1e-6);
}

TEST(GatedDwConv, ClosedGateGivesZero) {
  SplitMix64 rng(2);
  const Params p = closed_gate(4, 3, rng);
  const Mat E = random_mat(rng, 6, 4);
  EXPECT_EQ(gated_dwconv(rmsnorm(E), p), Mat::Zero(6, 4));
  EXPECT_EQ(extract(E, p), E);
}

TEST(GatedDwConv, DeltaKernelUnitBias) {
  SplitMix64 rng(3);
  Params p = closed_gate(4, 3, rng);
  p.content.setZero();
  p.content.col(2).setOnes();  // current position
  p.bias.setOnes();
  const Mat n = rmsnorm(random_mat(rng, 5, 4));
  const double silu1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(silu1, 0.731059, 5e-7);
  EXPECT_LT((gated_dwconv(n, p) - silu1 * n).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GatedDwConv, KernelWidthMismatch) {
  SplitMix64 rng(4);
  Params p = random_params(rng, 4, 3);
  EXPECT_THROW(gated_dwconv(Mat::Zero(5, 3), p), ValidationError);
  p.gate = Mat::Zero(4, 2);
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(GatedDwConv, CausalForEveryKernel) {
  SplitMix64 rng(5);
  for (std::size_t k : {1, 3, 5, 7, 9}) {
    const Params p = random_params(rng, 4, k);
    const Mat E = random_mat(rng, 12, 4);
    const Mat base = extract(E, p);
    for (Eigen::Index t = 0; t + 1 < 12; ++t) {
      Mat E2 = E;
      E2.row(t + 1).array() += 1.7;
      const Mat out = extract(E2, p);
      EXPECT_TRUE(out.topRows(t + 1) == base.topRows(t + 1));
    }
  }
}

TEST(Extract, ZeroInputZeroBias) {
  SplitMix64 rng(6);
  Params p = random_params(rng, 4, 3);
  p.bias.setZero();
  EXPECT_EQ(extract(Mat::Zero(6, 4), p), Mat::Zero(6, 4));
}

TEST(Extract, MatchesNaiveOracle) {
  SplitMix64 rng(7);
  for (std::size_t k : {1, 3, 5, 7, 9}) {
    const Params p = random_params(rng, 4, k);
    const Mat E = random_mat(rng, 6, 4);
    EXPECT_LT((extract(E, p) - naive_extract(E, p)).cwiseAbs().maxCoeff(), 1e-13) << "k=" << k;
  }
}

TEST(Extract, InitIsNearClosed) {
  SplitMix64 rng(8);
  const Params p = init_params(16, 5, 9);
  EXPECT_EQ(p.bias, Vec::Zero(16));
  const Mat E = random_mat(rng, 32, 16);
  const Mat C = extract(E, p) - E;
  EXPECT_LT(C.norm(), 0.05 * E.norm());
}

TEST(ExtractBackward, ZeroUpstream) {
  SplitMix64 rng(9);
  const Params p = random_params(rng, 4, 3);
  const auto g = extract_backward(random_mat(rng, 6, 4), p, Mat::Zero(6, 4));
  EXPECT_EQ(g.input.norm(), 0.0);
  EXPECT_EQ(g.params.content.norm() + g.params.gate.norm() + g.params.bias.norm(), 0.0);
}

TEST(ExtractBackward, ClosedGateIsPureResidual) {
  SplitMix64 rng(10);
  const Params p = closed_gate(4, 3, rng);
  const Mat up = random_mat(rng, 6, 4);
  EXPECT_EQ(extract_backward(random_mat(rng, 6, 4), p, up).input, up);
}

TEST(ExtractBackward, MatchesFiniteDifferences) {
  SplitMix64 rng(11);
  for (std::size_t k : {1, 3, 5}) {
    Params p = random_params(rng, 4, k);
    Mat E = random_mat(rng, 6, 4);
    const Mat up = random_mat(rng, 6, 4);
    auto objective = [&] { return extract(E, p).cwiseProduct(up).sum(); };
    const auto g = extract_backward(E, p, up);
    double worst = 0;
    for (Eigen::Index i = 0; i < E.size(); ++i)
      worst = std::max(worst, rel_error(g.input.data()[i], central_difference(E.data()[i], objective)));
    for (Eigen::Index i = 0; i < p.content.size(); ++i) {
      worst = std::max(worst, rel_error(g.params.content.data()[i], central_difference(p.content.data()[i], objective)));
      worst = std::max(worst, rel_error(g.params.gate.data()[i], central_difference(p.gate.data()[i], objective)));
    }
    for (Eigen::Index i = 0; i < p.bias.size(); ++i)
      worst = std::max(worst, rel_error(g.params.bias(i), central_difference(p.bias(i), objective)));
    EXPECT_LT(worst, 1e-6) << "k=" << k;
  }
}

TEST(ExtractBackward, CachedFormMatchesConvenience) {
  SplitMix64 rng(12);
  const Params p = random_params(rng, 3, 3);
  const Mat E = random_mat(rng, 5, 3), up = random_mat(rng, 5, 3);
  Cache cache;
  EXPECT_EQ(extract_forward(E, p, cache), extract(E, p));
  Grads g = Grads::zeros_like(p);
  const Mat dE = extract_backward(cache, p, up, g);
  const auto ref = extract_backward(E, p, up);
  EXPECT_EQ(dE, ref.input);
  EXPECT_EQ(g.content, ref.params.content);
}
