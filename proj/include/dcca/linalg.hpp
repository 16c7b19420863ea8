#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dcca/matrix.hpp"

namespace dcca {

struct EigDecomposition {
  Vector eigenvalues;  // descending
  Matrix eigenvectors;  // column i pairs with eigenvalues[i]
};

struct SvdResult {
  Matrix u;  // m x k, orthonormal columns
  Vector d;  // k = min(m, n), descending, nonnegative
  Matrix v;  // n x k, orthonormal columns; a = u diag(d) vᵀ
};

namespace detail {

inline constexpr int kMaxJacobiSweeps = 100;

// Flip column c of `m` (and of `partner`, if given) so its largest-magnitude
// entry is nonnegative. The first index wins among equal magnitudes.
inline void fix_column_sign(Matrix& m, std::size_t c, Matrix* partner = nullptr) {
  std::size_t best = 0;
  double best_abs = -1.0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(m(r, c)) > best_abs) {
      best_abs = std::abs(m(r, c));
      best = r;
    }
  }
  if (m.rows() == 0 || m(best, c) >= 0.0) return;
  for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = -m(r, c);
  if (partner != nullptr)
    for (std::size_t r = 0; r < partner->rows(); ++r) (*partner)(r, c) = -(*partner)(r, c);
}

inline std::vector<std::size_t> descending_order(const Vector& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

inline Matrix permute_columns(const Matrix& m, const std::vector<std::size_t>& order) {
  Matrix out(m.rows(), order.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < order.size(); ++c) out(r, c) = m(r, order[c]);
  return out;
}

// One-sided (Hestenes) Jacobi for a tall or square matrix.
inline SvdResult svd_tall(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix w = a;
  Matrix v = Matrix::identity(n);
  constexpr double kTol = 1e-15;

  bool converged = n < 2;
  for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          const double wi = w(k, i), wj = w(k, j);
          alpha += wi * wi;
          beta += wj * wj;
          gamma += wi * wj;
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t =
            (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double wi = w(k, i), wj = w(k, j);
          w(k, i) = c * wi - s * wj;
          w(k, j) = s * wi + c * wj;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vi = v(k, i), vj = v(k, j);
          v(k, i) = c * vi - s * vj;
          v(k, j) = s * vi + c * vj;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) fail(ErrorCode::kConvergence, "one-sided Jacobi SVD did not converge");

  Vector d(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += w(k, j) * w(k, j);
    d[j] = std::sqrt(s);
  }
  const auto order = descending_order(d);
  w = permute_columns(w, order);
  v = permute_columns(v, order);
  Vector sorted(n);
  for (std::size_t j = 0; j < n; ++j) sorted[j] = d[order[j]];

  const double cutoff = (sorted.empty() ? 0.0 : sorted[0]) * 1e-14 * static_cast<double>(m);
  Matrix u(m, n);
  std::vector<bool> have(n, false);
  for (std::size_t j = 0; j < n; ++j) {
    if (sorted[j] > cutoff && sorted[j] > 0.0) {
      for (std::size_t k = 0; k < m; ++k) u(k, j) = w(k, j) / sorted[j];
      have[j] = true;
    }
  }
  // Complete u with an orthonormal basis for columns whose singular value is
  // numerically zero.
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (have[j]) continue;
    for (; candidate < m; ++candidate) {
      Vector e(m, 0.0);
      e[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < n; ++q) {
          if (!have[q]) continue;
          double proj = 0.0;
          for (std::size_t k = 0; k < m; ++k) proj += u(k, q) * e[k];
          for (std::size_t k = 0; k < m; ++k) e[k] -= proj * u(k, q);
        }
      }
      const double nrm = norm2(e);
      if (nrm > 0.5) {
        for (std::size_t k = 0; k < m; ++k) u(k, j) = e[k] / nrm;
        have[j] = true;
        ++candidate;
        break;
      }
    }
    if (!have[j]) fail(ErrorCode::kConvergence, "could not complete singular basis");
    sorted[j] = 0.0;
  }

  for (std::size_t j = 0; j < n; ++j) fix_column_sign(u, j, &v);
  return {std::move(u), std::move(sorted), std::move(v)};
}

}  // namespace detail

/// Symmetric eigendecomposition by cyclic Jacobi rotations. The input is
/// symmetrized as (a + aᵀ)/2 first; eigenvalues come back descending and each
/// eigenvector has a nonnegative largest-magnitude entry.
inline EigDecomposition sym_eig(const Matrix& a) {
  require(a.is_square(), ErrorCode::kDimension, "sym_eig needs a square matrix");
  const std::size_t n = a.rows();
  const double scale = std::max(1.0, max_abs(a));
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      require(std::abs(a(i, j) - a(j, i)) < 1e-8 * scale, ErrorCode::kPrecondition,
              "sym_eig input is not symmetric");
      s(i, j) = 0.5 * (a(i, j) + a(j, i));
    }
  }
  require(all_finite(s), ErrorCode::kNumeric, "sym_eig input has non-finite entries");

  Matrix v = Matrix::identity(n);
  const double total = frobenius_norm(s);
  const double threshold = 1e-15 * total;
  bool converged = false;
  for (int sweep = 0; sweep <= detail::kMaxJacobiSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += s(p, q) * s(p, q);
    if (std::sqrt(off) <= threshold) {
      converged = true;
      break;
    }
    if (sweep == detail::kMaxJacobiSweeps) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = s(p, q);
        if (apq == 0.0) continue;
        const double tau = (s(q, q) - s(p, p)) / (2.0 * apq);
        const double t =
            (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - sn * skq;
          s(k, q) = sn * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - sn * sqk;
          s(q, k) = sn * spk + c * sqk;
        }
        s(p, q) = 0.0;
        s(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) fail(ErrorCode::kConvergence, "Jacobi eigensolver hit the sweep cap");

  Vector values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = s(i, i);
  const auto order = detail::descending_order(values);
  EigDecomposition out;
  out.eigenvalues.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.eigenvalues[i] = values[order[i]];
  out.eigenvectors = detail::permute_columns(v, order);
  for (std::size_t c = 0; c < n; ++c) detail::fix_column_sign(out.eigenvectors, c);
  return out;
}

/// Q diag(max(λ, floor)^{-1/2}) Qᵀ for a symmetric positive semidefinite input.
/// Eigenvalues between -10·floor and floor are clamped; anything more negative
/// means the input is genuinely indefinite.
inline Matrix inv_sqrt_spd(const Matrix& a, double floor) {
  require(floor > 0.0, ErrorCode::kPrecondition, "inv_sqrt_spd floor must be positive");
  const EigDecomposition eig = sym_eig(a);
  const std::size_t n = a.rows();
  Vector scale(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = eig.eigenvalues[i];
    if (lambda < -10.0 * floor)
      fail(ErrorCode::kNotPositiveSemidefinite,
           "eigenvalue " + std::to_string(lambda) + " below -10*floor");
    scale[i] = 1.0 / std::sqrt(std::max(lambda, floor));
  }
  const Matrix& q = eig.eigenvectors;
  Matrix out = matmul_nt(scale_columns(q, scale), q);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (out(i, j) + out(j, i));
      out(i, j) = avg;
      out(j, i) = avg;
    }
  }
  return out;
}

/// Thin SVD: a (m x n) = u diag(d) vᵀ with k = min(m, n) singular triplets.
inline SvdResult svd(const Matrix& a) {
  require(all_finite(a), ErrorCode::kNumeric, "svd input has non-finite entries");
  if (a.rows() >= a.cols()) return detail::svd_tall(a);
  SvdResult t = detail::svd_tall(a.transpose());
  SvdResult out{std::move(t.v), std::move(t.d), std::move(t.u)};
  for (std::size_t j = 0; j < out.d.size(); ++j) detail::fix_column_sign(out.u, j, &out.v);
  return out;
}

inline Vector singular_values(const Matrix& a) { return svd(a).d; }

}  // namespace dcca
