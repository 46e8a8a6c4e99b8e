#pragma once

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mfar/model.hpp"

namespace mfar {

/// P(sum_i w_i chi^2_1 <= x) for positive weights, by Imhof's inversion
/// formula. The integrand decays like u^{-1 - d/2}, so the adaptive
/// Gauss-Kronrod rule converges quickly even for a handful of weights.
inline double weighted_chisq_cdf(const Vector& w, double x) {
  require(w.size() > 0 && w.minCoeff() > 0.0, ErrorCode::DegenerateInput, "weighted_chisq_cdf",
          "weights must be positive");
  if (x <= 0.0) return 0.0;
  const auto integrand = [&](double u) {
    if (u <= 0.0) return 0.5 * (w.sum() - x);  // limit of sin(theta)/ (u rho)
    double theta = -0.5 * x * u;
    double log_rho = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double wu = w[i] * u;
      theta += 0.5 * std::atan(wu);
      log_rho += 0.25 * std::log1p(wu * wu);
    }
    return std::sin(theta) * std::exp(-std::log(u) - log_rho);
  };
  const double integral = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      integrand, 0.0, std::numeric_limits<double>::infinity(), 12, 1e-10);
  return std::min(1.0, std::max(0.0, 0.5 - integral / kPi));
}

/// Per-block weights of the prior quadratic form that measures the squared
/// kernel surface norm: eigenvalues of penalty^{-1} gram. A coefficient block
/// drawn from N(0, (lambda Omega)^{-1}) has squared surface norm distributed
/// as (1/lambda) sum_i w_i chi^2_1.
inline std::vector<Vector> stationarity_weights(const ModelLayout& lay) {
  std::vector<Vector> out;
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(symmetrize(lay.block_gram[b]),
                                                        symmetrize(lay.block_penalty[b]));
    require(es.info() == Eigen::Success, ErrorCode::NumericalBreakdown, "stationarity_weights",
            "generalized eigensolve failed");
    out.push_back(es.eigenvalues().cwiseMax(1e-14));
  }
  return out;
}

/// Log prior mass of the kernel stationarity region (every free block's
/// squared surface norm below the bound), under the joint hyperprior of the
/// expansion scale (normal) and smoothing (gamma). The block norms are
/// conditionally independent given the hyperparameters, and their CDFs only
/// depend on lambda_Psi = smoothing / scale^2; those CDFs are tabulated on a
/// log grid once and the hyperprior expectation is a tensor Gauss rule in
/// probability coordinates.
inline double log_stationary_prior_mass(const ModelLayout& lay, double scale_prior_var,
                                        double smooth_shape = 0.5, double smooth_rate = 0.5) {
  const auto weights = stationarity_weights(lay);
  // tabulate log F_b on a log-spaced lambda_Psi grid
  const double lo = 1e-12, hi = 1e14;
  const int grid_n = 261;
  const double step = std::log(hi / lo) / (grid_n - 1);
  std::vector<std::vector<double>> table(weights.size(), std::vector<double>(grid_n));
  for (size_t b = 0; b < weights.size(); ++b) {
    for (int g = 0; g < grid_n; ++g) {
      const double t = lo * std::exp(step * g);
      table[b][g] = weighted_chisq_cdf(weights[b], kKernelSqNormBound * t);
    }
    // enforce monotonicity against quadrature jitter
    for (int g = 1; g < grid_n; ++g) table[b][g] = std::max(table[b][g], table[b][g - 1]);
  }
  const auto cdf_at = [&](size_t b, double t) {
    if (t <= lo) return table[b].front();
    if (t >= hi) return table[b].back();
    const double pos = std::log(t / lo) / step;
    const int g = std::min(grid_n - 2, static_cast<int>(pos));
    const double f = pos - g;
    return (1.0 - f) * table[b][g] + f * table[b][g + 1];
  };

  // expectation over the hyperpriors in probability coordinates
  const boost::math::normal_distribution<double> zeta_dist(0.0, std::sqrt(scale_prior_var));
  const boost::math::gamma_distribution<double> lam_dist(smooth_shape, 1.0 / smooth_rate);
  const auto& rule = boost::math::quadrature::gauss<double, 128>::abscissa();
  const auto& wt = boost::math::quadrature::gauss<double, 128>::weights();
  // build symmetric nodes on (0,1): gauss<> gives the positive half for [-1,1]
  std::vector<double> nodes, nw;
  for (size_t i = 0; i < rule.size(); ++i) {
    nodes.push_back(0.5 * (1.0 + rule[i]));
    nw.push_back(0.5 * wt[i]);
    if (rule[i] > 0.0) {
      nodes.push_back(0.5 * (1.0 - rule[i]));
      nw.push_back(0.5 * wt[i]);
    }
  }
  double z = 0.0;
  for (size_t a = 0; a < nodes.size(); ++a) {
    const double zeta = boost::math::quantile(zeta_dist, nodes[a]);
    const double zeta_sq = std::max(zeta * zeta, 1e-300);
    for (size_t c = 0; c < nodes.size(); ++c) {
      const double lam = boost::math::quantile(lam_dist, nodes[c]);
      const double t = lam / zeta_sq;
      double prod = 1.0;
      for (size_t b = 0; b < weights.size(); ++b) prod *= cdf_at(b, t);
      z += nw[a] * nw[c] * prod;
    }
  }
  require(z > 0.0 && z <= 1.0 + 1e-9, ErrorCode::NumericalBreakdown, "log_stationary_prior_mass",
          "prior mass outside (0, 1]");
  return std::log(std::min(z, 1.0));
}

}  // namespace mfar
