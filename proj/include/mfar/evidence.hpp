#pragma once

#include <boost/math/distributions/chi_squared.hpp>
#include <string>

#include "mfar/gibbs.hpp"

namespace mfar {

struct EvidenceConfig {
  double coverage = 0.95;        // chi-square mass of the truncation ellipsoid
  double ridge = 1e-8;           // relative floor on the weighting spectrum
  double bulk_inflation = -1.0;  // widens the noise subspace of the weighting
                                 // covariance; negative selects the smallest
                                 // ladder value that keeps the truncation
                                 // region populated
};

struct EvidenceDiagnostics {
  Eigen::Index total = 0;      // posterior draws supplied
  Eigen::Index evaluated = 0;  // draws the harmonic mean was taken over
  Eigen::Index inside = 0;     // evaluated draws inside the truncation region
  Eigen::Index spikes = 0;     // correlation directions kept from the sample
  double bulk_inflation = 0.0;
  double radius_sq = 0.0;
  double log_truncation_mass = 0.0;
};

/// Modified harmonic mean estimate of the log marginal likelihood. The
/// weighting density h is a normal at posterior draw moments truncated to the
/// ellipsoid holding `coverage` of its mass; draws outside contribute zero.
/// Draw i divides by its own conditional prior, which makes the estimator
/// exact under hyperpriors that integrate to one.
///
/// Two safeguards keep the estimator usable when the parameter dimension is
/// within an order of magnitude of the draw count:
///
/// - The moments (and with them the truncation region) are fitted on the
///   first half of the draws and the harmonic mean runs over the second
///   half. In-sample evaluation makes every draw's Mahalanobis distance
///   shrink as the dimension approaches the draw count, inflating h on the
///   sample and biasing the estimate downward by hundreds of log units.
/// - The fitted covariance uses only the reliably estimated part of the
///   draw correlation: eigendirections above the Marchenko-Pastur bulk edge
///   keep their sample eigenvalues, the rest are replaced by their average
///   (a spiked-covariance fit in the standardized scale). The raw sample
///   covariance is singular in this regime, and shrinking correlations
///   toward zero instead distorts h badly whenever a few principal
///   components carry most of the posterior variance.
inline double mhm_log_marginal(const Matrix& thetas, const std::vector<double>& logliks,
                               const std::vector<double>& logpriors,
                               const EvidenceConfig& cfg = {},
                               EvidenceDiagnostics* diag = nullptr) {
  const Eigen::Index d = thetas.rows();
  const Eigen::Index s = thetas.cols();
  require(s == static_cast<Eigen::Index>(logliks.size()) &&
              s == static_cast<Eigen::Index>(logpriors.size()),
          ErrorCode::ShapeError, "mhm_log_marginal", "draw count mismatch");
  require(s >= 10, ErrorCode::EvidenceFailure, "mhm_log_marginal",
          "need at least 10 draws, got " + std::to_string(s));
  require(cfg.coverage > 0.0 && cfg.coverage < 1.0, ErrorCode::ConfigError, "mhm_log_marginal",
          "coverage must lie in (0, 1)");
  require(cfg.bulk_inflation < 0.0 || cfg.bulk_inflation > 0.0, ErrorCode::ConfigError,
          "mhm_log_marginal", "bulk inflation must be positive (negative selects automatically)");

  const Eigen::Index s_fit = s / 2;
  const Eigen::Index s_eval = s - s_fit;
  Vector mean = Vector::Zero(d);
  for (Eigen::Index i = 0; i < s_fit; ++i) mean += thetas.col(i);
  mean /= static_cast<double>(s_fit);

  // Standardize by the per-coordinate draw spread so the spike/bulk split
  // happens on the correlation scale.
  Vector var = Vector::Zero(d);
  for (Eigen::Index i = 0; i < s_fit; ++i) {
    var += (thetas.col(i) - mean).cwiseAbs2();
  }
  var /= static_cast<double>(s_fit);
  const double var_floor = cfg.ridge * var.mean() + 1e-300;
  const Vector sd = var.cwiseMax(var_floor).cwiseSqrt();

  Matrix x_fit(d, s_fit);
  for (Eigen::Index i = 0; i < s_fit; ++i) {
    x_fit.col(i) = (thetas.col(i) - mean).cwiseQuotient(sd);
  }
  Matrix corr = Matrix::Zero(d, d);
  corr.selfadjointView<Eigen::Lower>().rankUpdate(x_fit, 1.0 / static_cast<double>(s_fit));
  corr.triangularView<Eigen::StrictlyUpper>() = corr.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
  require(eig.info() == Eigen::Success, ErrorCode::NumericalBreakdown, "mhm_log_marginal",
          "eigendecomposition of the draw correlation failed");
  const Vector evals = eig.eigenvalues();  // ascending

  // Directions whose eigenvalue clears the Marchenko-Pastur bulk edge carry
  // estimable correlation signal; a 5% margin absorbs edge fluctuation.
  const double edge =
      std::pow(1.0 + std::sqrt(static_cast<double>(d) / static_cast<double>(s_fit)), 2.0) * 1.05;
  Eigen::Index spikes = 0;
  double spike_sum = 0.0;
  while (spikes < d && evals[d - 1 - spikes] > edge) {
    spike_sum += evals[d - 1 - spikes];
    ++spikes;
  }
  const double bulk_base =
      spikes == d ? 1.0
                  : std::max((static_cast<double>(d) - spike_sum) / static_cast<double>(d - spikes),
                             cfg.ridge);
  Matrix spike_vecs(d, spikes);
  Vector spike_vals(spikes);
  for (Eigen::Index k = 0; k < spikes; ++k) {
    spike_vecs.col(k) = eig.eigenvectors().col(d - 1 - k);
    spike_vals[k] = evals[d - 1 - k];
  }
  double logdet_base = 2.0 * sd.array().log().sum();
  for (Eigen::Index k = 0; k < spikes; ++k) logdet_base += std::log(spike_vals[k]);

  const boost::math::chi_squared chi2(static_cast<double>(d));
  const double radius_sq = boost::math::quantile(chi2, cfg.coverage);

  // Standardized evaluation draws and their spike-subspace coordinates.
  Matrix x_eval(d, s_eval);
  for (Eigen::Index i = 0; i < s_eval; ++i) {
    x_eval.col(i) = (thetas.col(s_fit + i) - mean).cwiseQuotient(sd);
  }
  const Matrix proj = spike_vecs.transpose() * x_eval;  // spikes x s_eval
  Vector spike_quad(s_eval), bulk_quad(s_eval);
  for (Eigen::Index i = 0; i < s_eval; ++i) {
    double sq = 0.0;
    for (Eigen::Index k = 0; k < spikes; ++k) sq += proj(k, i) * proj(k, i) / spike_vals[k];
    spike_quad[i] = sq;
    bulk_quad[i] = x_eval.col(i).squaredNorm() - proj.col(i).squaredNorm();
  }

  std::vector<double> ladder;
  if (cfg.bulk_inflation > 0.0) {
    ladder = {cfg.bulk_inflation};
  } else {
    ladder = {1.0, 1.5, 2.5, 4.0, 8.0};
  }
  // Too few captured draws makes the harmonic mean depend on a handful of
  // terms; widen the bulk until a tenth of the evaluation half lands inside
  // the region (or take the best ladder entry when none reaches it).
  const Eigen::Index inside_floor = std::max<Eigen::Index>(10, s_eval / 10);
  std::vector<double> terms;
  std::vector<double> best_terms;
  double used_inflation = ladder.front();
  for (const double beta : ladder) {
    const double bulk = bulk_base * beta;
    const double logdet = logdet_base + static_cast<double>(d - spikes) * std::log(bulk);
    terms.clear();
    terms.reserve(s_eval);
    for (Eigen::Index i = 0; i < s_eval; ++i) {
      const double maha = spike_quad[i] + bulk_quad[i] / bulk;
      if (maha > radius_sq) continue;
      const double log_h =
          -0.5 * (static_cast<double>(d) * std::log(2.0 * kPi) + logdet + maha);
      terms.push_back(log_h - logliks[s_fit + i] - logpriors[s_fit + i]);
    }
    if (terms.size() > best_terms.size()) {
      best_terms = terms;
      used_inflation = beta;
    }
    if (static_cast<Eigen::Index>(terms.size()) >= inside_floor) break;
  }

  // The weighting density is normalized by the truncation region's mass,
  // estimated empirically as the fraction of draws landing inside (floored at
  // one draw so the estimator stays finite).
  const double inside = static_cast<double>(best_terms.size());
  const double log_mass = std::log(std::max(inside, 1.0) / static_cast<double>(s_eval));
  if (diag != nullptr) {
    diag->total = s;
    diag->evaluated = s_eval;
    diag->inside = static_cast<Eigen::Index>(best_terms.size());
    diag->spikes = spikes;
    diag->bulk_inflation = used_inflation;
    diag->radius_sq = radius_sq;
    diag->log_truncation_mass = log_mass;
  }
  require(!best_terms.empty(), ErrorCode::EvidenceFailure, "mhm_log_marginal",
          "no draws inside the truncation ellipsoid");
  return std::log(static_cast<double>(s_eval)) + log_mass - logsumexp(best_terms);
}

inline double mhm_log_marginal(const PosteriorSample& p, const EvidenceConfig& cfg = {},
                               EvidenceDiagnostics* diag = nullptr) {
  return mhm_log_marginal(p.theta_matrix(), p.logliks(), p.log_priors(), cfg, diag);
}

/// Strength-of-evidence bands for the log Bayes factor, half-open on the
/// left: [0,1) not worth more than a bare mention, [1,3) substantial,
/// [3,5) strong, [5,inf) decisive; negative favors the restricted model.
enum class EvidenceCategory {
  favors_restricted,
  not_worth_mention,
  substantial,
  strong,
  decisive,
};

inline EvidenceCategory categorize(double log_bf) {
  if (log_bf < 0.0) return EvidenceCategory::favors_restricted;
  if (log_bf < 1.0) return EvidenceCategory::not_worth_mention;
  if (log_bf < 3.0) return EvidenceCategory::substantial;
  if (log_bf < 5.0) return EvidenceCategory::strong;
  return EvidenceCategory::decisive;
}

inline std::string to_string(EvidenceCategory c) {
  switch (c) {
    case EvidenceCategory::favors_restricted: return "favors restricted model";
    case EvidenceCategory::not_worth_mention: return "not worth more than a bare mention";
    case EvidenceCategory::substantial: return "substantial";
    case EvidenceCategory::strong: return "strong";
    case EvidenceCategory::decisive: return "decisive";
  }
  return "unknown";
}

inline double saturated_exp(double log_x) {
  if (log_x > 709.0) return 1e308;
  if (log_x < -709.0) return 0.0;
  return std::exp(log_x);
}

struct CausalityTest {
  double log_marginal_unrestricted = 0.0;
  double log_marginal_restricted = 0.0;
  double log_bayes_factor = 0.0;
  double bayes_factor = 1.0;
  EvidenceCategory category = EvidenceCategory::not_worth_mention;
  EvidenceDiagnostics diag_unrestricted;
  EvidenceDiagnostics diag_restricted;
};

/// Compares the evidence for the model with a response<-cause coupling
/// against the model without it.
inline CausalityTest test_causality(const PosteriorSample& unrestricted,
                                    const PosteriorSample& restricted,
                                    const EvidenceConfig& cfg = {}) {
  require(unrestricted.spec.hypothesis == Hypothesis::unrestricted &&
              restricted.spec.hypothesis == Hypothesis::restricted,
          ErrorCode::EvidenceFailure, "test_causality",
          "samples must come from the unrestricted and restricted hypotheses");
  CausalityTest r;
  r.log_marginal_unrestricted = mhm_log_marginal(unrestricted, cfg, &r.diag_unrestricted);
  r.log_marginal_restricted = mhm_log_marginal(restricted, cfg, &r.diag_restricted);
  r.log_bayes_factor = r.log_marginal_unrestricted - r.log_marginal_restricted;
  r.bayes_factor = saturated_exp(r.log_bayes_factor);
  r.category = categorize(r.log_bayes_factor);
  return r;
}

}  // namespace mfar
