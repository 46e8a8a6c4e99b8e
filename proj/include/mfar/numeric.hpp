#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "mfar/error.hpp"

namespace mfar {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kLogTwoPi = 1.8378770664093454836;
inline constexpr double kCholJitter = 1e-10;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// Cholesky with symmetrization and a fixed 1e-10 diagonal jitter.
/// Throws NumericalBreakdown if the factorization still fails.
inline Eigen::LLT<Matrix> safe_llt(const Matrix& a, const std::string& where) {
  require(a.rows() == a.cols(), ErrorCode::ShapeError, where, "matrix not square");
  Matrix s = symmetrize(a);
  s.diagonal().array() += kCholJitter;
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::NumericalBreakdown, where, "Cholesky failed after jitter");
  }
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// log N(x; mean, cov) with cov supplied as its Cholesky factorization.
inline double mvn_logpdf(const Vector& x, const Vector& mean, const Eigen::LLT<Matrix>& cov_llt) {
  const auto d = static_cast<double>(x.size());
  Vector r = x - mean;
  Vector z = cov_llt.matrixL().solve(r);
  return -0.5 * (d * kLogTwoPi + logdet_from_llt(cov_llt) + z.squaredNorm());
}

/// log N(x; mean, P^-1) with the precision matrix P supplied via its Cholesky.
inline double mvn_logpdf_prec(const Vector& x, const Vector& mean,
                              const Eigen::LLT<Matrix>& prec_llt) {
  const auto d = static_cast<double>(x.size());
  Vector r = x - mean;
  Vector z = prec_llt.matrixL().transpose() * r;
  return -0.5 * (d * kLogTwoPi - logdet_from_llt(prec_llt) + z.squaredNorm());
}

inline double normal_logpdf(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (kLogTwoPi + std::log(var) + r * r / var);
}

/// log Gamma(x; shape, rate) density.
inline double gamma_logpdf(double x, double shape, double rate) {
  if (x <= 0.0) return kNegInf;
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

/// Density of v = 1/x where x ~ Gamma(shape, rate); v is a variance coordinate.
inline double inverse_gamma_logpdf(double v, double shape, double rate) {
  if (v <= 0.0) return kNegInf;
  return gamma_logpdf(1.0 / v, shape, rate) - 2.0 * std::log(v);
}

/// logsumexp with ascending sorted accumulation so the result does not depend
/// on the order terms were produced in.
inline double logsumexp(std::vector<double> terms) {
  terms.erase(std::remove_if(terms.begin(), terms.end(),
                             [](double t) { return t == kNegInf; }),
              terms.end());
  if (terms.empty()) return kNegInf;
  const double m = *std::max_element(terms.begin(), terms.end());
  if (!std::isfinite(m)) return m;
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

/// Trapezoid-rule quadrature weights for sorted, strictly increasing points.
inline Vector trapezoid_weights(const Vector& pts) {
  const auto m = pts.size();
  require(m >= 2, ErrorCode::GridTooSmall, "trapezoid_weights", "need at least 2 points");
  for (Eigen::Index i = 1; i < m; ++i) {
    require(pts[i] > pts[i - 1], ErrorCode::InvalidGrid, "trapezoid_weights",
            "points must be strictly increasing");
  }
  Vector w(m);
  w[0] = 0.5 * (pts[1] - pts[0]);
  for (Eigen::Index i = 1; i + 1 < m; ++i) w[i] = 0.5 * (pts[i + 1] - pts[i - 1]);
  w[m - 1] = 0.5 * (pts[m - 1] - pts[m - 2]);
  return w;
}

/// Linear-interpolation quantile (R type 7) of an unsorted sample.
inline double quantile(std::vector<double> v, double p) {
  require(!v.empty(), ErrorCode::DegenerateInput, "quantile", "empty sample");
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double h = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

}  // namespace mfar
