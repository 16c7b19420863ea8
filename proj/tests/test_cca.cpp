#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "dcca/cca.hpp"
#include "test_util.hpp"

namespace dcca {
namespace {

using testing::random_matrix;
using testing::random_spd;

Matrix column_variances_as_row(const Matrix& p) {
  const Matrix c = center(p).centered;
  const Matrix cov = covariance(c, 0.0);
  Matrix out(1, cov.rows());
  for (std::size_t i = 0; i < cov.rows(); ++i) out(0, i) = cov(i, i);
  return out;
}

TEST(Center, HandExample) {
  const auto [centered, mean] = center(Matrix{{1, 0}, {3, 0}});
  EXPECT_EQ(mean, (Vector{2, 0}));
  EXPECT_EQ(centered, (Matrix{{-1, 0}, {1, 0}}));
}

TEST(Center, ZeroMeanInputUnchanged) {
  const Matrix f{{1, -2}, {-1, 2}};
  const auto [centered, mean] = center(f);
  EXPECT_EQ(centered, f);
  EXPECT_EQ(mean, (Vector{0, 0}));
}

TEST(Center, RandomColumnSumsVanish) {
  const Matrix c = center(random_matrix(100, 8, 1, 3.0)).centered;
  for (double s : column_means(c)) EXPECT_LT(std::abs(s) * 100.0, 1e-10);
}

TEST(Center, NeedsTwoSamples) {
  try {
    center(Matrix(1, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientSamples);
  }
}

TEST(Covariance, HandExampleAndRidge) {
  const Matrix c{{1, 0}, {-1, 0}};
  EXPECT_EQ(covariance(c, 0.0), (Matrix{{2, 0}, {0, 0}}));
  const Matrix f = center(random_matrix(20, 4, 2)).centered;
  const Matrix diff = covariance(f, 0.1) - covariance(f, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(diff(i, j), i == j ? 0.1 : 0.0, 1e-15);
}

TEST(Covariance, MonteCarloStandardNormalIsIdentity) {
  const Matrix f = center(random_matrix(10000, 4, 3)).centered;
  const Matrix s = covariance(f, 0.0);
  EXPECT_LT(max_abs(s - Matrix::identity(4)), 0.05);
  EXPECT_LT(max_abs(s - s.transpose()), 1e-12);
}

TEST(Covariance, RejectsUncenteredInput) {
  try {
    covariance(Matrix{{1, 1}, {2, 2}}, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPrecondition);
  }
}

TEST(CrossCovariance, SelfAndSignFlip) {
  const Matrix c = center(random_matrix(50, 3, 4)).centered;
  EXPECT_LT(max_abs(cross_covariance(c, c) - covariance(c, 0.0)), 1e-14);
  EXPECT_LT(max_abs(cross_covariance(c, -c) + covariance(c, 0.0)), 1e-14);
}

TEST(CrossCovariance, IndependentViewsNearZero) {
  const Matrix cx = center(random_matrix(10000, 4, 5)).centered;
  const Matrix cy = center(random_matrix(10000, 4, 6)).centered;
  EXPECT_LT(max_abs(cross_covariance(cx, cy)), 0.05);
}

TEST(CrossCovariance, MismatchedN) {
  try {
    cross_covariance(Matrix(3, 2), Matrix(4, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimension);
  }
}

TEST(ComputeT, IdentityZeroAndSelf) {
  const Matrix i3 = Matrix::identity(3);
  const Matrix t = compute_t(i3, i3, i3);
  EXPECT_LT(max_abs(t - i3), 1e-15);
  EXPECT_EQ(max_abs(compute_t(i3, Matrix(3, 3), i3)), 0.0);
  const Matrix sigma = random_spd(5, 7);
  const Matrix t_self = compute_t(sigma, sigma, sigma, 1e-15);
  EXPECT_LT(max_abs(t_self - Matrix::identity(5)), 1e-9);
  for (double d : singular_values(t_self)) EXPECT_LE(d, 1.0 + 1e-6);
}

TEST(TotalCorrelation, IdentityZeroAndTraceNorm) {
  EXPECT_NEAR(total_correlation(Matrix::identity(6)), 6.0, 1e-12);
  EXPECT_EQ(total_correlation(Matrix(4, 4)), 0.0);
}

TEST(TotalCorrelation, MatchesTraceNormThroughEigendecomposition) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t rows = 1 + seed % 8, cols = 1 + (seed * 5) % 8;
    const Matrix t = random_matrix(rows, cols, 11 + seed, 0.4);
    // TTᵀ shares the nonzero spectrum of TᵀT; the smaller Gram avoids sqrt of round-off zeros.
    const auto eig = sym_eig(rows < cols ? matmul_nt(t, t) : matmul_tn(t, t));
    double trace_norm = 0.0;
    for (double l : eig.eigenvalues) trace_norm += std::sqrt(std::max(l, 0.0));
    EXPECT_NEAR(total_correlation(t), trace_norm, 1e-8) << rows << "x" << cols;
  }
}

TEST(FitCca, IdenticalViewsSaturate) {
  const Matrix f = random_matrix(1000, 4, 12);
  const CcaModel m = fit_cca(f, f, 1e-6);
  ASSERT_EQ(m.corrs.size(), 4u);
  for (double c : m.corrs) EXPECT_GE(c, 0.999);
}

TEST(FitCca, IndependentViewsNearZero) {
  const CcaModel m = fit_cca(random_matrix(10000, 4, 13), random_matrix(10000, 4, 14), 1e-3);
  for (double c : m.corrs) EXPECT_LT(c, 0.1);
}

TEST(FitCca, InsufficientSamples) {
  try {
    fit_cca(random_matrix(4, 4, 1), random_matrix(4, 4, 2), 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInsufficientSamples);
  }
}

class FittedPair : public ::testing::Test {
 protected:
  void SetUp() override {
    const Matrix z = random_matrix(2000, 3, 20);
    fx = matmul(z, random_matrix(3, 5, 21)) + random_matrix(2000, 5, 22, 0.5);
    gy = matmul(z, random_matrix(3, 5, 23)) + random_matrix(2000, 5, 24, 0.8);
    for (double& v : fx.data()) v += 3.0;
    model = fit_cca(fx, gy, 1e-9);
  }
  Matrix fx, gy;
  CcaModel model;
};

TEST_F(FittedPair, InvariantsHold) {
  for (std::size_t i = 0; i < model.corrs.size(); ++i) {
    EXPECT_GE(model.corrs[i], 0.0);
    EXPECT_LE(model.corrs[i], 1.0 + 1e-6);
    if (i + 1 < model.corrs.size()) {
      EXPECT_GE(model.corrs[i], model.corrs[i + 1]);
    }
  }
}

TEST_F(FittedPair, ProjectionWhitensAndDiagonalizes) {
  const Matrix px = project_x(model, fx);
  const Matrix py = project_y(model, gy);
  const Matrix vx = column_variances_as_row(px);
  const Matrix vy = column_variances_as_row(py);
  for (double v : vx.data()) EXPECT_NEAR(v, 1.0, 1e-3);
  for (double v : vy.data()) EXPECT_NEAR(v, 1.0, 1e-3);
  const Matrix cross = cross_covariance(center(px).centered, center(py).centered);
  EXPECT_LT(max_abs(cross - Matrix::diagonal(model.corrs)), 1e-3);
}

TEST_F(FittedPair, MeanRowProjectsToZero) {
  Matrix row(1, fx.cols());
  for (std::size_t c = 0; c < fx.cols(); ++c) row(0, c) = model.mean_x[c];
  const Matrix projected = project_x(model, row);
  for (double v : projected.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(project_x(model, Matrix(2, 3)), Error);
}

TEST_F(FittedPair, ScaleInvariance) {
  const CcaModel scaled = fit_cca(fx * 7.5, gy, 1e-9);
  for (std::size_t i = 0; i < model.corrs.size(); ++i)
    EXPECT_NEAR(scaled.corrs[i], model.corrs[i], 1e-8);
}

TEST_F(FittedPair, PermutationInvariance) {
  std::vector<std::size_t> perm(fx.rows());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(5));
  const CcaModel p = fit_cca(fx.gather_rows(perm), gy.gather_rows(perm), 1e-9);
  for (std::size_t i = 0; i < model.corrs.size(); ++i)
    EXPECT_NEAR(p.corrs[i], model.corrs[i], 1e-10);
  EXPECT_LT(max_abs(p.proj_x - model.proj_x), 1e-8);
  EXPECT_LT(max_abs(p.proj_y - model.proj_y), 1e-8);
}

TEST_F(FittedPair, ViewSwapSymmetry) {
  const CcaModel swapped = fit_cca(gy, fx, 1e-9);
  for (std::size_t i = 0; i < model.corrs.size(); ++i)
    EXPECT_NEAR(swapped.corrs[i], model.corrs[i], 1e-10);
  // Singular vectors are unique up to a joint sign flip.
  for (std::size_t c = 0; c < model.corrs.size(); ++c) {
    double same = 0.0, flipped = 0.0;
    for (std::size_t r = 0; r < model.proj_x.rows(); ++r) {
      same = std::max(same, std::abs(swapped.proj_y(r, c) - model.proj_x(r, c)));
      flipped = std::max(flipped, std::abs(swapped.proj_y(r, c) + model.proj_x(r, c)));
    }
    EXPECT_LT(std::min(same, flipped), 1e-6);
  }
}

TEST_F(FittedPair, ComponentTruncation) {
  const CcaModel two = fit_cca(fx, gy, 1e-9, 2);
  EXPECT_EQ(two.corrs.size(), 2u);
  EXPECT_EQ(two.proj_x.cols(), 2u);
  EXPECT_NEAR(two.corrs[0], model.corrs[0], 1e-12);
}

}  // namespace
}  // namespace dcca
