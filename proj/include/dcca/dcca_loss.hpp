#pragma once

#include <cmath>
#include <string>

#include "dcca/cca.hpp"

namespace dcca {

struct DccaLossResult {
  double loss = 0.0;  // -Σ d_i
  Matrix grad_fx;     // ∂loss/∂fx
  Matrix grad_gy;     // ∂loss/∂gy
  Vector corrs;
  /// Set when two neighbouring singular values are within 1e-10; the trace
  /// norm is not differentiable there, so the gradient is one subgradient.
  bool repeated_singular_values = false;
};

namespace detail {

inline bool rows_all_identical(const Matrix& f) {
  for (std::size_t r = 1; r < f.rows(); ++r)
    for (std::size_t c = 0; c < f.cols(); ++c)
      if (f(r, c) != f(0, c)) return false;
  return true;
}

}  // namespace detail

/// Negative total canonical correlation of a minibatch and its exact gradient
/// with respect to both feature batches.
///
/// With centered F, G, ridge-regularized Σx, Σy, T = Σx^{-1/2} Σxy Σy^{-1/2}
/// = U diag(d) Vᵀ, and
///   Δxy = Σx^{-1/2} U Vᵀ Σy^{-1/2}
///   Δxx = -½ Σx^{-1/2} U diag(d) Uᵀ Σx^{-1/2}   (Δyy likewise with V)
/// the gradient of Σd is (2 F Δxx + G Δxyᵀ)/(N-1) for fx and
/// (2 G Δyy + F Δxy)/(N-1) for gy. Both are already column-centered, so the
/// centering step needs no extra term.
inline DccaLossResult dcca_loss(const Matrix& fx, const Matrix& gy,
                                double eps = kDefaultRegularizer) {
  require(fx.rows() == gy.rows(), ErrorCode::kDimension, "dcca_loss views have different N");
  require(eps > 0.0, ErrorCode::kPrecondition, "dcca_loss regularizer must be positive");
  const std::size_t n = fx.rows();
  const std::size_t h = std::max(fx.cols(), gy.cols());
  require(n >= h + 1, ErrorCode::kInsufficientSamples,
          "dcca_loss needs N >= h + 1 (N=" + std::to_string(n) + ", h=" + std::to_string(h) +
              ")");
  require(all_finite(fx) && all_finite(gy), ErrorCode::kNumeric,
          "dcca_loss received non-finite features");
  require(!detail::rows_all_identical(fx) && !detail::rows_all_identical(gy),
          ErrorCode::kDegenerateBatch, "all rows of a view are identical");

  const Matrix f = center(fx).centered;
  const Matrix g = center(gy).centered;
  const Matrix sx = covariance(f, eps);
  const Matrix sy = covariance(g, eps);
  const Matrix sxy = cross_covariance(f, g);
  const Matrix wx = inv_sqrt_spd(sx, kWhiteningFloor);
  const Matrix wy = inv_sqrt_spd(sy, kWhiteningFloor);
  const SvdResult t = svd(matmul(matmul(wx, sxy), wy));

  DccaLossResult out;
  out.corrs = t.d;
  double total = 0.0;
  for (double d : t.d) total += d;
  out.loss = -total;
  for (std::size_t i = 0; i + 1 < t.d.size(); ++i)
    if (std::abs(t.d[i] - t.d[i + 1]) < 1e-10) out.repeated_singular_values = true;

  const Matrix wx_u = matmul(wx, t.u);
  const Matrix wy_v = matmul(wy, t.v);
  const Matrix delta_xy = matmul_nt(wx_u, wy_v);
  Matrix delta_xx = matmul_nt(scale_columns(wx_u, t.d), wx_u);
  delta_xx *= -0.5;
  Matrix delta_yy = matmul_nt(scale_columns(wy_v, t.d), wy_v);
  delta_yy *= -0.5;

  const double inv = 1.0 / static_cast<double>(n - 1);
  out.grad_fx = matmul(f, delta_xx) * 2.0 + matmul_nt(g, delta_xy);
  out.grad_fx *= -inv;
  out.grad_gy = matmul(g, delta_yy) * 2.0 + matmul(f, delta_xy);
  out.grad_gy *= -inv;

  require(std::isfinite(out.loss) && all_finite(out.grad_fx) && all_finite(out.grad_gy),
          ErrorCode::kNumeric, "dcca_loss produced non-finite values");
  return out;
}

}  // namespace dcca
