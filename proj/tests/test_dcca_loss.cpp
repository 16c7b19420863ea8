#include <gtest/gtest.h>

#include <limits>

#include "dcca/dcca_loss.hpp"
#include "test_util.hpp"

namespace dcca {
namespace {

using testing::central_difference;
using testing::random_matrix;

double max_relative_error(const Matrix& analytic, const Matrix& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / (std::abs(a) + 1e-8));
  }
  return worst;
}

TEST(DccaLoss, IdenticalViewsSaturate) {
  for (std::size_t h = 1; h <= 8; ++h) {
    const Matrix f = random_matrix(50 * h, h, h);
    const auto r = dcca_loss(f, f, 1e-6);
    EXPECT_NEAR(r.loss, -static_cast<double>(h), 1e-3) << "h=" << h;
  }
}

TEST(DccaLoss, IndependentNoiseNearZero) {
  const auto r = dcca_loss(random_matrix(5000, 4, 2), random_matrix(5000, 4, 3), 1e-3);
  EXPECT_LT(std::abs(r.loss), 0.2);
}

TEST(DccaLoss, GradientMatchesCentralDifferences) {
  constexpr double kEps = 1e-3;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix fx = random_matrix(32, 4, 1000 + seed);
    Matrix gy = random_matrix(32, 4, 2000 + seed);
    gy += fx * 0.7;  // non-trivial correlation structure
    const auto r = dcca_loss(fx, gy, kEps);
    const Matrix num_fx = central_difference(
        [&](const Matrix& x) { return dcca_loss(x, gy, kEps).loss; }, fx, 1e-5);
    const Matrix num_gy = central_difference(
        [&](const Matrix& y) { return dcca_loss(fx, y, kEps).loss; }, gy, 1e-5);
    EXPECT_LT(max_relative_error(r.grad_fx, num_fx), 1e-4) << "seed " << seed;
    EXPECT_LT(max_relative_error(r.grad_gy, num_gy), 1e-4) << "seed " << seed;
  }
}

TEST(DccaLoss, RectangularViewsGradient) {
  const Matrix fx = random_matrix(40, 5, 77);
  const Matrix gy = random_matrix(40, 3, 78) + matmul(fx, random_matrix(5, 3, 79));
  const auto r = dcca_loss(fx, gy, 1e-3);
  const Matrix num = central_difference(
      [&](const Matrix& x) { return dcca_loss(x, gy, 1e-3).loss; }, fx, 1e-5);
  EXPECT_LT(max_relative_error(r.grad_fx, num), 1e-4);
}

TEST(DccaLoss, ResultInvariants) {
  const auto r = dcca_loss(random_matrix(64, 6, 5), random_matrix(64, 6, 6), 1e-3);
  EXPECT_LE(r.loss, 1e-6);
  EXPECT_GE(r.loss, -6.0 - 1e-6);
  for (const Matrix* g : {&r.grad_fx, &r.grad_gy})
    for (double m : column_means(*g)) EXPECT_LT(std::abs(m), 1e-8);
}

TEST(DccaLoss, ViewSwapSymmetry) {
  const Matrix fx = random_matrix(50, 4, 7);
  const Matrix gy = random_matrix(50, 4, 8) + fx;
  const auto a = dcca_loss(fx, gy);
  const auto b = dcca_loss(gy, fx);
  EXPECT_NEAR(a.loss, b.loss, 1e-10);
  EXPECT_LT(max_abs(a.grad_fx - b.grad_gy), 1e-10);
  EXPECT_LT(max_abs(a.grad_gy - b.grad_fx), 1e-10);
}

TEST(DccaLoss, MeanShiftInvariance) {
  const Matrix fx = random_matrix(50, 4, 9);
  const Matrix gy = random_matrix(50, 4, 10) + fx;
  Matrix shifted = fx;
  for (std::size_t r = 0; r < shifted.rows(); ++r)
    for (std::size_t c = 0; c < shifted.cols(); ++c) shifted(r, c) += 0.25 * (c + 1.0);
  EXPECT_NEAR(dcca_loss(fx, gy).loss, dcca_loss(shifted, gy).loss, 1e-10);
}

TEST(DccaLoss, DescentStepReducesLoss) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix fx = random_matrix(40, 4, 300 + seed);
    const Matrix gy = random_matrix(40, 4, 400 + seed) + fx * 0.3;
    const auto r = dcca_loss(fx, gy);
    const auto stepped = dcca_loss(fx - r.grad_fx * 1e-3, gy - r.grad_gy * 1e-3);
    EXPECT_LT(stepped.loss, r.loss) << "seed " << seed;
  }
}

TEST(DccaLoss, ErrorPaths) {
  auto code_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  EXPECT_EQ(code_of([] { dcca_loss(Matrix(10, 2, 1.0), random_matrix(10, 2, 1)); }),
            ErrorCode::kDegenerateBatch);
  Matrix bad = random_matrix(10, 2, 2);
  bad(3, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { dcca_loss(bad, random_matrix(10, 2, 3)); }), ErrorCode::kNumeric);
  EXPECT_EQ(code_of([] { dcca_loss(random_matrix(4, 4, 1), random_matrix(4, 4, 2)); }),
            ErrorCode::kInsufficientSamples);
  EXPECT_EQ(code_of([] { dcca_loss(random_matrix(9, 2, 1), random_matrix(8, 2, 2)); }),
            ErrorCode::kDimension);
}

}  // namespace
}  // namespace dcca
