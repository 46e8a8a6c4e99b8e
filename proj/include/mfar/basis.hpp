#pragma once

#include <unsupported/Eigen/KroneckerProduct>
#include <vector>

#include "mfar/numeric.hpp"

namespace mfar {

enum class BasisKind { thin_plate_low_rank, cubic_bspline };

/// A basis over one series' grid. `evaluation` is M x J; `penalty` is square
/// with side equal to the coefficient dimension (J for curve bases, J^2 for
/// the kernel tensor basis).
struct BasisSet {
  BasisKind kind;
  Matrix evaluation;
  Matrix penalty;
  Vector knots;

  Eigen::Index order() const { return evaluation.cols(); }
  Eigen::Index grid_size() const { return evaluation.rows(); }
};

namespace detail {

/// |lambda|^{-1/2} pseudo-factor; near-zero eigenvalues get factor 1 so the
/// design keeps full column rank even with a single knot.
inline Matrix abs_inv_sqrt(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a));
  require(es.info() == Eigen::Success, ErrorCode::NumericalBreakdown, "abs_inv_sqrt",
          "eigendecomposition failed");
  Vector d = es.eigenvalues().cwiseAbs();
  const double tol = 1e-12 * std::max(1.0, d.maxCoeff());
  Vector f(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) f[i] = d[i] <= tol ? 1.0 : 1.0 / std::sqrt(d[i]);
  return es.eigenvectors() * f.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Low-rank thin plate basis: columns [1, tau, |tau - knot|^3 * Omega^{-1/2}]
/// with knots at interior quantiles. Penalty is identity on the radial block,
/// zero on the affine block.
inline BasisSet thin_plate_basis(const Vector& pts, Eigen::Index J) {
  const Eigen::Index m = pts.size();
  require(J >= 3, ErrorCode::BadBasisOrder, "thin_plate_basis", "need J >= 3");
  require(J <= m, ErrorCode::BadBasisOrder, "thin_plate_basis",
          "J exceeds the number of grid points");
  const Eigen::Index nk = J - 2;
  std::vector<double> sorted(pts.data(), pts.data() + m);
  Vector knots(nk);
  for (Eigen::Index k = 0; k < nk; ++k) {
    knots[k] = quantile(sorted, static_cast<double>(k + 1) / static_cast<double>(J - 1));
  }
  for (Eigen::Index k = 1; k < nk; ++k) {
    require(knots[k] > knots[k - 1], ErrorCode::BadBasisOrder, "thin_plate_basis",
            "quantile knots collide; reduce J");
  }
  Matrix omega(nk, nk);
  for (Eigen::Index i = 0; i < nk; ++i) {
    for (Eigen::Index j = 0; j < nk; ++j) {
      omega(i, j) = std::pow(std::abs(knots[i] - knots[j]), 3.0);
    }
  }
  Matrix radial(m, nk);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index k = 0; k < nk; ++k) {
      radial(i, k) = std::pow(std::abs(pts[i] - knots[k]), 3.0);
    }
  }
  BasisSet b;
  b.kind = BasisKind::thin_plate_low_rank;
  b.evaluation.resize(m, J);
  b.evaluation.col(0).setOnes();
  b.evaluation.col(1) = pts;
  b.evaluation.rightCols(nk) = radial * detail::abs_inv_sqrt(omega);
  b.penalty = Matrix::Zero(J, J);
  b.penalty.diagonal().tail(nk).setOnes();
  b.knots = knots;
  return b;
}

/// Clamped cubic B-spline basis on [lo, hi] with equally spaced interior
/// knots. Gram matrices of derivatives use 5-point Gauss-Legendre per span,
/// exact for the piecewise-polynomial integrands.
class BsplineBasis1d {
 public:
  BsplineBasis1d(double lo, double hi, Eigen::Index J) : lo_(lo), hi_(hi), size_(J) {
    require(J >= 4, ErrorCode::BadBasisOrder, "BsplineBasis1d", "cubic splines need J >= 4");
    require(hi > lo, ErrorCode::InvalidGrid, "BsplineBasis1d", "empty domain");
    const Eigen::Index interior = J - 4;
    knots_.assign(4, lo);
    for (Eigen::Index i = 1; i <= interior; ++i) {
      knots_.push_back(lo + (hi - lo) * static_cast<double>(i) /
                                static_cast<double>(interior + 1));
    }
    knots_.insert(knots_.end(), 4, hi);
  }

  Eigen::Index size() const { return size_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  /// Values (deriv = 0) or derivatives of all J basis functions at x.
  Vector eval(double x, int deriv = 0) const {
    require(deriv >= 0 && deriv <= 2, ErrorCode::BadBasisOrder, "BsplineBasis1d::eval",
            "only derivatives up to 2 supported");
    require(x >= lo_ - 1e-12 && x <= hi_ + 1e-12, ErrorCode::PointNotOnGrid,
            "BsplineBasis1d::eval", "point outside the spline domain");
    const int p = 3;
    const auto nt = static_cast<Eigen::Index>(knots_.size());
    // indicator level (degree 0)
    std::vector<double> cur(nt - 1, 0.0);
    Eigen::Index span = nt - 5;  // last positive-length span start
    for (Eigen::Index i = 3; i + 4 < nt; ++i) {
      if (x < knots_[i + 1]) {
        span = i;
        break;
      }
    }
    cur[span] = 1.0;
    const int base_degree = p - deriv;
    for (int d = 1; d <= base_degree; ++d) cur = raise_degree(cur, d, x);
    for (int d = base_degree + 1; d <= p; ++d) cur = differentiate(cur, d);
    Vector out(size_);
    for (Eigen::Index i = 0; i < size_; ++i) out[i] = cur[i];
    return out;
  }

  Matrix evaluate(const Vector& pts, int deriv = 0) const {
    Matrix e(pts.size(), size_);
    for (Eigen::Index i = 0; i < pts.size(); ++i) e.row(i) = eval(pts[i], deriv).transpose();
    return e;
  }

  /// integral of B^(dr)(x) B^(dc)(x)' over the domain.
  Matrix gram(int dr, int dc) const {
    static const double gl_x[5] = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                   0.5384693101056831, 0.9061798459386640};
    static const double gl_w[5] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                   0.4786286704993665, 0.2369268850561891};
    Matrix g = Matrix::Zero(size_, size_);
    for (size_t i = 3; i + 4 < knots_.size(); ++i) {
      const double a = knots_[i], b = knots_[i + 1];
      if (b <= a) continue;
      const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
      for (int q = 0; q < 5; ++q) {
        const double x = mid + half * gl_x[q];
        const Vector br = eval(x, dr), bc = eval(x, dc);
        g.noalias() += (half * gl_w[q]) * br * bc.transpose();
      }
    }
    return symmetrize(g);
  }

  /// Greville abscissae: coefficients reproducing f(x) = x.
  Vector greville() const {
    Vector g(size_);
    for (Eigen::Index i = 0; i < size_; ++i) {
      g[i] = (knots_[i + 1] + knots_[i + 2] + knots_[i + 3]) / 3.0;
    }
    return g;
  }

 private:
  std::vector<double> raise_degree(const std::vector<double>& prev, int d, double x) const {
    std::vector<double> next(prev.size() - 1, 0.0);
    for (size_t i = 0; i < next.size(); ++i) {
      double v = 0.0;
      const double den1 = knots_[i + d] - knots_[i];
      if (den1 > 0.0) v += (x - knots_[i]) / den1 * prev[i];
      const double den2 = knots_[i + d + 1] - knots_[i + 1];
      if (den2 > 0.0) v += (knots_[i + d + 1] - x) / den2 * prev[i + 1];
      next[i] = v;
    }
    return next;
  }

  /// derivative recurrence: values of degree d-1 (already differentiated
  /// r times) -> r+1-times differentiated values of degree d.
  std::vector<double> differentiate(const std::vector<double>& prev, int d) const {
    std::vector<double> next(prev.size() - 1, 0.0);
    for (size_t i = 0; i < next.size(); ++i) {
      double v = 0.0;
      const double den1 = knots_[i + d] - knots_[i];
      if (den1 > 0.0) v += static_cast<double>(d) / den1 * prev[i];
      const double den2 = knots_[i + d + 1] - knots_[i + 1];
      if (den2 > 0.0) v -= static_cast<double>(d) / den2 * prev[i + 1];
      next[i] = v;
    }
    return next;
  }

  double lo_, hi_;
  Eigen::Index size_;
  std::vector<double> knots_;
};

/// Roughness penalty for kernel surfaces K(tau, u) = b_tau(tau)' C b_u(u),
/// flattened column-major (vec C, so the u-index is the Kronecker-major
/// factor): Omega_2 = G0_u (x) V2_tau + V1_u (x) V1_tau + V2_u (x) G0_tau,
/// Omega_0 = G0_u (x) G0_tau, returned as Omega_2 + kappa * Omega_0.
inline Matrix tensor_penalty(const BsplineBasis1d& tau_basis, const BsplineBasis1d& u_basis,
                             double kappa) {
  const Matrix g0_t = tau_basis.gram(0, 0), v1_t = tau_basis.gram(1, 1),
               v2_t = tau_basis.gram(2, 2);
  const Matrix g0_u = u_basis.gram(0, 0), v1_u = u_basis.gram(1, 1), v2_u = u_basis.gram(2, 2);
  Matrix omega2 = Eigen::kroneckerProduct(g0_u, v2_t).eval();
  omega2 += Eigen::kroneckerProduct(v1_u, v1_t);
  omega2 += Eigen::kroneckerProduct(v2_u, g0_t);
  Matrix omega0 = Eigen::kroneckerProduct(g0_u, g0_t).eval();
  return symmetrize(omega2 + kappa * omega0);
}

/// Kernel basis over one series' grid: evaluation is the 1-D spline design,
/// penalty is the same-series tensor penalty (side J^2).
inline BasisSet bspline_tensor_basis(const Vector& pts, Eigen::Index J, double kappa = 1.0) {
  require(pts.size() >= 2, ErrorCode::GridTooSmall, "bspline_tensor_basis", "need >= 2 points");
  BsplineBasis1d b(pts.minCoeff(), pts.maxCoeff(), J);
  BasisSet out;
  out.kind = BasisKind::cubic_bspline;
  out.evaluation = b.evaluate(pts);
  out.penalty = tensor_penalty(b, b, kappa);
  out.knots = b.greville();
  return out;
}

}  // namespace mfar
