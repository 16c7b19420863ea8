#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "dcca/linalg.hpp"
#include "dcca/matrix.hpp"

namespace dcca {

/// Ridge added to both view covariances unless a caller overrides it.
inline constexpr double kDefaultRegularizer = 1e-3;
/// Eigenvalue floor used when whitening ridge-regularized covariances.
inline constexpr double kWhiteningFloor = 1e-12;

struct CenteredBatch {
  Matrix centered;
  Vector mean;
};

inline Vector column_means(const Matrix& f) {
  Vector mean(f.cols(), 0.0);
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c) mean[c] += f(r, c);
  for (double& m : mean) m /= static_cast<double>(f.rows());
  return mean;
}

inline CenteredBatch center(const Matrix& f) {
  require(f.rows() >= 2, ErrorCode::kInsufficientSamples,
          "centering needs at least 2 samples, got " + std::to_string(f.rows()));
  CenteredBatch out{f, column_means(f)};
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c) out.centered(r, c) -= out.mean[c];
  return out;
}

namespace detail {

inline void require_centered(const Matrix& f, const char* what) {
  const Vector mean = column_means(f);
  const double tol = 1e-8 * std::max(1.0, max_abs(f));
  for (double m : mean)
    require(std::abs(m) < tol, ErrorCode::kPrecondition, std::string(what) + " is not centered");
}

}  // namespace detail

/// (1/(N-1)) f̄ᵀ f̄ + eps·I
inline Matrix covariance(const Matrix& centered, double eps) {
  require(centered.rows() >= 2, ErrorCode::kInsufficientSamples, "covariance needs N >= 2");
  require(eps >= 0.0, ErrorCode::kPrecondition, "covariance ridge must be nonnegative");
  detail::require_centered(centered, "covariance input");
  Matrix s = matmul_tn(centered, centered);
  s *= 1.0 / static_cast<double>(centered.rows() - 1);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = i + 1; j < s.cols(); ++j) s(j, i) = s(i, j);
    s(i, i) += eps;
  }
  return s;
}

/// (1/(N-1)) c_xᵀ c_y
inline Matrix cross_covariance(const Matrix& cx, const Matrix& cy) {
  require(cx.rows() == cy.rows(), ErrorCode::kDimension,
          "cross_covariance views have different sample counts");
  require(cx.rows() >= 2, ErrorCode::kInsufficientSamples, "cross_covariance needs N >= 2");
  detail::require_centered(cx, "cross_covariance view x");
  detail::require_centered(cy, "cross_covariance view y");
  Matrix s = matmul_tn(cx, cy);
  s *= 1.0 / static_cast<double>(cx.rows() - 1);
  return s;
}

/// T = Σx^{-1/2} Σxy Σy^{-1/2}
inline Matrix compute_t(const Matrix& sx, const Matrix& sxy, const Matrix& sy,
                        double floor = kWhiteningFloor) {
  require(sxy.rows() == sx.rows() && sxy.cols() == sy.rows(), ErrorCode::kDimension,
          "compute_t shape mismatch");
  return matmul(matmul(inv_sqrt_spd(sx, floor), sxy), inv_sqrt_spd(sy, floor));
}

/// Sum of singular values (the trace norm).
inline double total_correlation(const Matrix& t) {
  const Vector d = singular_values(t);
  double s = 0.0;
  for (double v : d) s += v;
  return s;
}

/// Fitted linear CCA. proj_x and proj_y already include the whitening
/// factor, so (f - mean_x)·proj_x lands directly in the shared space.
struct CcaModel {
  Vector mean_x;
  Vector mean_y;
  Matrix proj_x;  // Σx^{-1/2} U
  Matrix proj_y;  // Σy^{-1/2} V
  Vector corrs;   // descending
  double regularizer = kDefaultRegularizer;

  std::size_t components() const noexcept { return corrs.size(); }
  friend bool operator==(const CcaModel&, const CcaModel&) = default;
};

/// Fits CCA on paired features. `components` = 0 keeps min(h_x, h_y).
inline CcaModel fit_cca(const Matrix& fx, const Matrix& gy, double eps = kDefaultRegularizer,
                        std::size_t components = 0) {
  require(fx.rows() == gy.rows(), ErrorCode::kDimension, "fit_cca views have different N");
  require(eps > 0.0, ErrorCode::kPrecondition, "fit_cca regularizer must be positive");
  const std::size_t h = std::max(fx.cols(), gy.cols());
  require(fx.rows() >= h + 1, ErrorCode::kInsufficientSamples,
          "fit_cca needs N >= h + 1 (N=" + std::to_string(fx.rows()) +
              ", h=" + std::to_string(h) + ")");
  require(all_finite(fx) && all_finite(gy), ErrorCode::kNumeric, "fit_cca inputs not finite");

  auto [cx, mean_x] = center(fx);
  auto [cy, mean_y] = center(gy);
  const Matrix sx = covariance(cx, eps);
  const Matrix sy = covariance(cy, eps);
  const Matrix sxy = cross_covariance(cx, cy);
  const Matrix wx = inv_sqrt_spd(sx, kWhiteningFloor);
  const Matrix wy = inv_sqrt_spd(sy, kWhiteningFloor);
  const SvdResult t = svd(matmul(matmul(wx, sxy), wy));

  const std::size_t k = components == 0 ? t.d.size() : std::min(components, t.d.size());
  CcaModel model;
  model.mean_x = std::move(mean_x);
  model.mean_y = std::move(mean_y);
  model.regularizer = eps;
  Matrix px = matmul(wx, t.u);
  Matrix py = matmul(wy, t.v);
  model.proj_x = Matrix(px.rows(), k);
  model.proj_y = Matrix(py.rows(), k);
  for (std::size_t r = 0; r < px.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) model.proj_x(r, c) = px(r, c);
  for (std::size_t r = 0; r < py.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) model.proj_y(r, c) = py(r, c);
  model.corrs.assign(t.d.begin(), t.d.begin() + static_cast<std::ptrdiff_t>(k));
  return model;
}

namespace detail {

inline Matrix project(const Matrix& f, const Vector& mean, const Matrix& proj) {
  require(f.cols() == mean.size() && proj.rows() == mean.size(), ErrorCode::kDimension,
          "projection input has " + std::to_string(f.cols()) + " columns, model expects " +
              std::to_string(mean.size()));
  Matrix centered = f;
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c) centered(r, c) -= mean[c];
  return matmul(centered, proj);
}

}  // namespace detail

inline Matrix project_x(const CcaModel& model, const Matrix& fx) {
  return detail::project(fx, model.mean_x, model.proj_x);
}

inline Matrix project_y(const CcaModel& model, const Matrix& gy) {
  return detail::project(gy, model.mean_y, model.proj_y);
}

}  // namespace dcca
