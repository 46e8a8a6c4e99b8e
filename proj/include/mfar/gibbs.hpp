#pragma once

#include <boost/math/special_functions/expint.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <chrono>
#include <cstdint>
#include <vector>

#include "mfar/statespace.hpp"
#include "mfar/truncation.hpp"

namespace mfar {

struct GibbsConfig {
  Eigen::Index iterations = 1000;
  Eigen::Index burn_in = -1;  // -1 selects iterations / 2
  Eigen::Index thin = 1;
  std::uint64_t seed = 0;
  LayoutConfig layout;

  Eigen::Index resolved_burn_in() const { return burn_in < 0 ? iterations / 2 : burn_in; }
  void validate() const {
    require(iterations >= 1, ErrorCode::ConfigError, "GibbsConfig", "iterations must be >= 1");
    require(thin >= 1, ErrorCode::ConfigError, "GibbsConfig", "thin must be >= 1");
    require(resolved_burn_in() >= 0 && resolved_burn_in() < iterations, ErrorCode::ConfigError,
            "GibbsConfig", "burn-in must lie in [0, iterations)");
  }
};

/// One stored posterior draw: the parameters in the evidence parametrization
/// (log-scale positive coordinates plus the smoothing hyperparameters), the
/// final latent state (enough to forecast), and cached densities for the
/// evidence estimator. `log_prior` is the joint prior ordinate in the same
/// parametrization, i.e. including the log-transform Jacobians.
struct Draw {
  Vector theta;
  Vector alpha_last;
  double loglik = 0.0;
  double log_prior = 0.0;
  Eigen::Index iteration = 0;
};

struct PosteriorSample {
  std::vector<Draw> draws;
  ModelSpec spec;
  GibbsConfig config;
  double seconds = 0.0;

  Matrix theta_matrix() const {
    require(!draws.empty(), ErrorCode::EvidenceFailure, "theta_matrix", "no stored draws");
    Matrix th(draws.front().theta.size(), static_cast<Eigen::Index>(draws.size()));
    for (size_t i = 0; i < draws.size(); ++i) th.col(static_cast<Eigen::Index>(i)) = draws[i].theta;
    return th;
  }
  std::vector<double> logliks() const {
    std::vector<double> v;
    v.reserve(draws.size());
    for (const auto& d : draws) v.push_back(d.loglik);
    return v;
  }
  std::vector<double> log_priors() const {
    std::vector<double> v;
    v.reserve(draws.size());
    for (const auto& d : draws) v.push_back(d.log_prior);
    return v;
  }
};

/// Gaussian full conditional in precision form.
struct GaussianConditional {
  Eigen::LLT<Matrix> prec_llt;
  Vector shift;  // precision * mean

  Vector mean() const { return prec_llt.solve(shift); }
  Vector draw(Rng& rng) const {
    Vector z = rng.normal_vector(shift.size());
    return mean() + prec_llt.matrixU().solve(z);
  }
  double logpdf(const Vector& x) const { return mvn_logpdf_prec(x, mean(), prec_llt); }
};

struct ScalarGaussianConditional {
  double precision = 1.0;
  double shift = 0.0;

  double mean() const { return shift / precision; }
  double draw(Rng& rng) const { return mean() + rng.normal() / std::sqrt(precision); }
  double logpdf(double x) const { return normal_logpdf(x, mean(), 1.0 / precision); }
};

/// Gamma full conditional, possibly truncated to (lo, hi); shape 0 selects
/// the x^-1 e^{-rate x} chain edge case.
struct GammaConditional {
  double shape = 1.0;
  double rate = 1.0;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();

  bool truncated() const { return lo > 0.0 || std::isfinite(hi); }
  double draw(Rng& rng) const {
    if (!truncated() && shape > 0.0) return rng.gamma(shape, rate);
    return rng.truncated_gamma(shape, rate, lo, hi);
  }
  double log_mass() const {
    if (shape <= 0.0) {
      const double e_lo = boost::math::expint(1, rate * lo);
      const double e_hi = std::isfinite(hi) ? boost::math::expint(1, rate * hi) : 0.0;
      return std::log(e_lo - e_hi);
    }
    const double p_lo = lo > 0.0 ? boost::math::gamma_p(shape, rate * lo) : 0.0;
    const double p_hi = std::isfinite(hi) ? boost::math::gamma_p(shape, rate * hi) : 1.0;
    return std::log(p_hi - p_lo);
  }
  double logpdf(double x) const {
    if (x <= lo || x >= hi) return kNegInf;
    if (shape <= 0.0) return -std::log(x) - rate * x - log_mass();
    // unnormalized gamma kernel with the exact truncation normalizer
    return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) -
           rate * x - log_mass();
  }
};

struct ChainState {
  ParameterState state;
  Rng rng;
  Eigen::Index completed = 0;
  std::vector<Draw> stored;
};

/// Prior variance of the kernel expansion scale. Kept order one on purpose:
/// the autoregression is only meaningful for kernel operators with squared
/// integral below one, and a diffuse scale lets the sampler drift into a
/// non-stationary regime (operator norm ~3) where both hypotheses overfit
/// the sample path and evidence comparisons lose their meaning.
inline constexpr double kKernelScalePriorVar = 1.0;

/// Blocked Gibbs sampler for the functional AR DLM. Sweep order: kernel
/// coefficients with their expansion scale and smoothing, innovation
/// recomputation, factor scores, factor precisions (ordered chain),
/// approximation-error precision, loading coefficients, observation
/// precisions, latent states by FFBS, then mean coefficients and their
/// smoothing parameters.
class Sampler {
 public:
  Sampler(const FunctionalSample& data, const EvaluationGrid& grid, const ModelSpec& spec,
          const GibbsConfig& cfg)
      : data_(&data), cfg_(cfg), lay_(make_layout(grid, spec, cfg.layout)) {
    cfg_.validate();
    data.validate(grid);
    t_count_ = data.time_count();
    const Eigen::Index k = lay_.grid.series_count();
    for (Eigen::Index m = 0; m < k; ++m) {
      wt_kernel_.push_back(lay_.kernel_eval[m].transpose() *
                           lay_.grid.weights[m].asDiagonal());
    }
    btb_phi_ = lay_.loading_design.transpose() * lay_.loading_design;
    btb_mu_.resize(k);
    by_mu_.resize(k);
    nobs_.assign(k, 0);
    for (Eigen::Index n = 0; n < k; ++n) {
      const Eigen::Index jmu = lay_.mean_order(n);
      btb_mu_[n] = Matrix::Zero(jmu, jmu);
      by_mu_[n] = Vector::Zero(jmu);
      const Matrix& bmu = lay_.mean_basis[n].evaluation;
      for (Eigen::Index t = 0; t < t_count_; ++t) {
        const ObsBlock& b = data.obs[t][n];
        for (Eigen::Index i = 0; i < b.count(); ++i) {
          btb_mu_[n].noalias() += bmu.row(b.indices[i]).transpose() * bmu.row(b.indices[i]);
          by_mu_[n].noalias() += bmu.row(b.indices[i]).transpose() * b.values[i];
          ++nobs_[n];
        }
      }
      require(nobs_[n] > 0, ErrorCode::DegenerateInput, "Sampler",
              "series " + std::to_string(n) + " has no observations");
    }
    for (const Matrix& om : lay_.block_penalty) {
      penalty_logdet_.push_back(logdet_from_llt(safe_llt(om, "Sampler penalty")));
    }
  }

  const ModelLayout& layout() const { return lay_; }
  long truncation_fallbacks() const { return truncation_fallbacks_; }
  const GibbsConfig& config() const { return cfg_; }
  Eigen::Index time_count() const { return t_count_; }

  /// Guards against states shaped for a different layout; Eigen would
  /// otherwise compute garbage silently in release builds.
  void require_shapes(const ParameterState& s) const {
    require(s.latent_states.rows() == lay_.grid.total() && s.latent_states.cols() == t_count_,
            ErrorCode::ShapeError, "Sampler", "latent state shape does not match layout");
    require(s.innovation.loading_coeffs.rows() == lay_.loading_dim() &&
                s.innovation.loading_coeffs.cols() == lay_.factors &&
                s.innovation.factors.rows() == lay_.factors &&
                s.innovation.factors.cols() == t_count_ &&
                s.innovation.factor_variances.size() == lay_.factors,
            ErrorCode::ShapeError, "Sampler", "innovation shape does not match layout");
    require(s.kernel.coeff.size() == lay_.free_blocks.size(), ErrorCode::ShapeError, "Sampler",
            "kernel block count does not match hypothesis");
    for (size_t b = 0; b < lay_.free_blocks.size(); ++b) {
      const auto [n, m] = lay_.free_blocks[b];
      require(s.kernel.coeff[b].rows() == lay_.kernel_order(n) &&
                  s.kernel.coeff[b].cols() == lay_.kernel_order(m),
              ErrorCode::ShapeError, "Sampler", "kernel coefficient shape mismatch");
    }
    require(s.mean_coeffs.size() == static_cast<size_t>(lay_.grid.series_count()) &&
                s.mean_smoothing.size() == lay_.grid.series_count() &&
                s.obs_variances.size() == lay_.grid.series_count(),
            ErrorCode::ShapeError, "Sampler", "mean or variance shape mismatch");
    for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
      require(s.mean_coeffs[n].size() == lay_.mean_order(n), ErrorCode::ShapeError, "Sampler",
              "mean coefficient shape mismatch");
    }
  }

  // ----------------------------------------------------------------- init

  /// Deterministic starting point: ridge-smoothed means and states, a ridge
  /// kernel regression without the GLS weights, and an SVD-based FDLM init.
  ParameterState initialize() const {
    ParameterState s;
    const Eigen::Index k = lay_.grid.series_count();
    s.mean_coeffs.resize(k);
    s.mean_smoothing = Vector::Ones(k);
    s.obs_variances = Vector::Zero(k);

    // per-series time means, ridge-smoothed onto the mean basis
    for (Eigen::Index n = 0; n < k; ++n) {
      const Matrix& bmu = lay_.mean_basis[n].evaluation;
      Vector sum = Vector::Zero(lay_.grid.size(n));
      Vector cnt = Vector::Zero(lay_.grid.size(n));
      for (Eigen::Index t = 0; t < t_count_; ++t) {
        const ObsBlock& b = data_->obs[t][n];
        for (Eigen::Index i = 0; i < b.count(); ++i) {
          sum[b.indices[i]] += b.values[i];
          cnt[b.indices[i]] += 1.0;
        }
      }
      const Eigen::Index jmu = lay_.mean_order(n);
      Matrix ata = Matrix::Identity(jmu, jmu);
      Vector atb = Vector::Zero(jmu);
      for (Eigen::Index i = 0; i < lay_.grid.size(n); ++i) {
        if (cnt[i] > 0.0) {
          ata.noalias() += bmu.row(i).transpose() * bmu.row(i);
          atb.noalias() += bmu.row(i).transpose() * (sum[i] / cnt[i]);
        }
      }
      s.mean_coeffs[n] = safe_llt(ata, "initialize mean").solve(atb);
    }
    const Vector mu = mean_curve(s, lay_);

    // per-time ridge fits of the centered data give starting states
    s.latent_states = Matrix::Zero(lay_.grid.total(), t_count_);
    for (Eigen::Index n = 0; n < k; ++n) {
      const Matrix& bmu = lay_.mean_basis[n].evaluation;
      const Eigen::Index jmu = lay_.mean_order(n);
      for (Eigen::Index t = 0; t < t_count_; ++t) {
        const ObsBlock& b = data_->obs[t][n];
        if (b.count() == 0) continue;
        // light ridge: heavy shrinkage here would bleed curve signal into the
        // fit residuals and grossly inflate the observation-variance start
        Matrix ata = 1e-4 * Matrix::Identity(jmu, jmu);
        Vector atb = Vector::Zero(jmu);
        for (Eigen::Index i = 0; i < b.count(); ++i) {
          const Eigen::Index row = b.indices[i];
          ata.noalias() += bmu.row(row).transpose() * bmu.row(row);
          atb.noalias() += bmu.row(row).transpose() *
                           (b.values[i] - mu[lay_.grid.offset(n) + row]);
        }
        s.latent_states.col(t).segment(lay_.grid.offset(n), lay_.grid.size(n)).noalias() =
            bmu * safe_llt(ata, "initialize states").solve(atb);
      }
    }

    // observation variances from the fit residuals, scaled by the residual
    // degrees of freedom left over after the per-time fits
    for (Eigen::Index n = 0; n < k; ++n) {
      const Eigen::Index jmu = lay_.mean_order(n);
      double ss = 0.0;
      double dof = 0.0;
      for (Eigen::Index t = 0; t < t_count_; ++t) {
        const ObsBlock& b = data_->obs[t][n];
        dof += std::max<double>(static_cast<double>(b.count() - jmu), 0.0);
        for (Eigen::Index i = 0; i < b.count(); ++i) {
          const Eigen::Index row = lay_.grid.offset(n) + b.indices[i];
          const double r = b.values[i] - mu[row] - s.latent_states(row, t);
          ss += r * r;
        }
      }
      const double denom = std::max({dof, static_cast<double>(nobs_[n]) / 4.0, 1.0});
      s.obs_variances[n] = std::max(ss / denom, 1e-8);
    }

    // ridge kernel regression: penalties plus an unweighted LS data term
    s.kernel.scale = 1.0;
    s.kernel.smoothing = 1.0;
    {
      const auto& blocks = lay_.free_blocks;
      const Eigen::Index dk = lay_.kernel_dim();
      std::vector<Matrix> xs(k);  // Jpsi_m x (T-1), columns B' alpha_{t-1}
      for (Eigen::Index m = 0; m < k; ++m) {
        xs[m] = lay_.kernel_eval[m].transpose() *
                s.latent_states.block(lay_.grid.offset(m), 0, lay_.grid.size(m), t_count_ - 1);
      }
      Matrix a_mat = Matrix::Zero(dk, dk);
      Vector a_vec = Vector::Zero(dk);
      std::vector<Eigen::Index> off(blocks.size() + 1, 0);
      for (size_t b = 0; b < blocks.size(); ++b) {
        off[b + 1] = off[b] + lay_.kernel_order(blocks[b].first) *
                                  lay_.kernel_order(blocks[b].second);
        a_mat.block(off[b], off[b], off[b + 1] - off[b], off[b + 1] - off[b]) =
            lay_.block_penalty[b];
      }
      for (size_t b = 0; b < blocks.size(); ++b) {
        const auto [n, m] = blocks[b];
        for (size_t b2 = 0; b2 < blocks.size(); ++b2) {
          const auto [n2, m2] = blocks[b2];
          if (n != n2) continue;
          const Matrix sxx = xs[m] * xs[m2].transpose();
          const Matrix cnn = lay_.kernel_eval[n].transpose() * lay_.kernel_eval[n];
          add_kron(a_mat, off[b], off[b2], sxx, cnn);
        }
        const Matrix resp = lay_.kernel_eval[n].transpose() *
                            s.latent_states.block(lay_.grid.offset(n), 1, lay_.grid.size(n),
                                                  t_count_ - 1) *
                            xs[m].transpose();
        a_vec.segment(off[b], resp.size()) = Eigen::Map<const Vector>(resp.data(), resp.size());
      }
      Vector theta = safe_llt(a_mat, "initialize kernel").solve(a_vec);
      require(theta.allFinite(), ErrorCode::InitFailure, "initialize", "kernel init not finite");
      s.kernel.coeff.resize(blocks.size());
      for (size_t b = 0; b < blocks.size(); ++b) {
        const auto [n, m] = blocks[b];
        s.kernel.coeff[b] = Eigen::Map<const Matrix>(theta.segment(off[b], off[b + 1] - off[b]).data(),
                                                     lay_.kernel_order(n), lay_.kernel_order(m));
      }
    }

    // FDLM init from the SVD of fitted innovations
    const Eigen::Index total = lay_.grid.total();
    const Eigen::Index jeps = lay_.factors;
    require(jeps <= std::min(total, t_count_), ErrorCode::InitFailure, "initialize",
            "factor count exceeds min(grid size, time count)");
    Matrix g = transition_matrix(s, lay_);
    Matrix eps(total, t_count_);
    eps.col(0) = s.latent_states.col(0);
    eps.rightCols(t_count_ - 1) =
        s.latent_states.rightCols(t_count_ - 1) - g * s.latent_states.leftCols(t_count_ - 1);
    Eigen::JacobiSVD<Matrix> svd(eps.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    require(svd.info() == Eigen::Success, ErrorCode::InitFailure, "initialize", "SVD failed");
    Matrix phi_raw = svd.matrixV().leftCols(jeps);
    s.innovation.factors =
        (svd.matrixU().leftCols(jeps) * svd.singularValues().head(jeps).asDiagonal()).transpose();
    s.innovation.loading_coeffs =
        safe_llt(btb_phi_, "initialize loadings").solve(lay_.loading_design.transpose() * phi_raw);
    const Matrix phi = lay_.loading_design * s.innovation.loading_coeffs;

    s.innovation.factor_variances = Vector(jeps);
    for (Eigen::Index j = 0; j < jeps; ++j) {
      const double v = s.innovation.factors.row(j).squaredNorm() / t_count_;
      s.innovation.factor_variances[j] = std::max(v, 1e-8);
      if (j > 0) {
        s.innovation.factor_variances[j] =
            std::min(s.innovation.factor_variances[j],
                     s.innovation.factor_variances[j - 1] * (1.0 - 1e-6));
      }
    }
    const double resid = (eps - phi * s.innovation.factors).squaredNorm() /
                         static_cast<double>(total * t_count_);
    s.innovation.approx_error_variance = std::max(resid, 1e-8);
    require(theta_pack(s, lay_).allFinite(), ErrorCode::InitFailure, "initialize",
            "non-finite starting state");
    return s;
  }

  // --------------------------------------------------- full conditionals

  /// Kernel coefficients (unscaled): N(mean, P^{-1}) with
  /// P = lambda_tilde Omega + xi^2 sum_t X_t' K_eps^{-1} X_t.
  GaussianConditional cond_kernel(const ParameterState& s) const {
    require_shapes(s);
    KernelCommon kc = kernel_common(s);
    GaussianConditional g;
    Matrix prec = kc.data_prec * (s.kernel.scale * s.kernel.scale);
    const auto& blocks = lay_.free_blocks;
    for (size_t b = 0; b < blocks.size(); ++b) {
      prec.block(kc.off[b], kc.off[b], kc.off[b + 1] - kc.off[b], kc.off[b + 1] - kc.off[b]) +=
          s.kernel.smoothing * lay_.block_penalty[b];
    }
    g.prec_llt = safe_llt(prec, "cond_kernel");
    g.shift = s.kernel.scale * kc.data_shift;
    return g;
  }

  ScalarGaussianConditional cond_kernel_scale(const ParameterState& s,
                                              const Vector& theta_tilde) const {
    require_shapes(s);
    KernelCommon kc = kernel_common(s);
    ScalarGaussianConditional g;
    g.precision = 1.0 / kKernelScalePriorVar + theta_tilde.dot(kc.data_prec * theta_tilde);
    g.shift = theta_tilde.dot(kc.data_shift);
    return g;
  }

  GammaConditional cond_kernel_smoothing(const Vector& theta_tilde) const {
    GammaConditional g;
    g.shape = 0.5 + 0.5 * static_cast<double>(lay_.kernel_dim());
    g.rate = 0.5 + 0.5 * penalty_quadform(theta_tilde);
    return g;
  }

  /// Factor scores e_t: N with precision Sigma_e^{-1} + sigma_eta^{-2} Phi'Phi.
  GaussianConditional cond_factor(const ParameterState& s, Eigen::Index t) const {
    require_shapes(s);
    const Matrix phi = loading_curves(s, lay_);
    const double se_inv = 1.0 / s.innovation.approx_error_variance;
    Matrix prec = se_inv * (phi.transpose() * phi);
    prec.diagonal() += s.innovation.factor_variances.cwiseInverse();
    GaussianConditional g;
    g.prec_llt = safe_llt(prec, "cond_factor");
    g.shift = se_inv * (phi.transpose() * innovations(s).col(t));
    return g;
  }

  /// Ordered-chain conditional for the precision sigma_j^{-2}.
  GammaConditional cond_factor_precision(const ParameterState& s, Eigen::Index j) const {
    require_shapes(s);
    const Eigen::Index jeps = lay_.factors;
    const double b = 0.5 * s.innovation.factors.row(j).squaredNorm();
    const double t_half = 0.5 * static_cast<double>(t_count_);
    GammaConditional g;
    g.rate = b;
    if (jeps == 1) {
      g.shape = 1e-3 + t_half;
      g.rate += 1e-3;
      return g;
    }
    if (j == 0) {
      g.shape = t_half + 1.0;
      g.hi = 1.0 / s.innovation.factor_variances[1];
    } else if (j + 1 < jeps) {
      g.shape = t_half;
      g.lo = 1.0 / s.innovation.factor_variances[j - 1];
      g.hi = 1.0 / s.innovation.factor_variances[j + 1];
    } else {
      g.shape = 1e-3 + t_half - 1.0;
      g.rate += 1e-3;
      g.lo = 1.0 / s.innovation.factor_variances[j - 1];
    }
    return g;
  }

  GammaConditional cond_approx_precision(const ParameterState& s) const {
    require_shapes(s);
    const Matrix phi = loading_curves(s, lay_);
    GammaConditional g;
    g.shape = 1e-3 + 0.5 * static_cast<double>(lay_.grid.total() * t_count_);
    g.rate = 1e-3 + 0.5 * (innovations(s) - phi * s.innovation.factors).squaredNorm();
    return g;
  }

  /// Loading coefficient column j given the others.
  GaussianConditional cond_loading(const ParameterState& s, Eigen::Index j) const {
    require_shapes(s);
    const Matrix phi = loading_curves(s, lay_);
    const Matrix eps = innovations(s);
    const Matrix m1 = eps * s.innovation.factors.transpose();
    const Matrix gram = s.innovation.factors * s.innovation.factors.transpose();
    return loading_conditional(s, j, phi, m1, gram);
  }

  GammaConditional cond_obs_precision(const ParameterState& s, Eigen::Index n) const {
    require_shapes(s);
    const Vector mu = mean_curve(s, lay_);
    double ss = 0.0;
    for (Eigen::Index t = 0; t < t_count_; ++t) {
      const ObsBlock& b = data_->obs[t][n];
      for (Eigen::Index i = 0; i < b.count(); ++i) {
        const Eigen::Index row = lay_.grid.offset(n) + b.indices[i];
        const double r = b.values[i] - mu[row] - s.latent_states(row, t);
        ss += r * r;
      }
    }
    GammaConditional g;
    g.shape = 1e-3 + 0.5 * static_cast<double>(nobs_[n]);
    g.rate = 1e-3 + 0.5 * ss;
    return g;
  }

  /// Joint conditional of all mean coefficients (block-diagonal by series).
  GaussianConditional cond_mean(const ParameterState& s) const {
    require_shapes(s);
    const Eigen::Index k = lay_.grid.series_count();
    Matrix prec = Matrix::Zero(lay_.mean_dim(), lay_.mean_dim());
    Vector shift = Vector::Zero(lay_.mean_dim());
    Eigen::Index o = 0;
    for (Eigen::Index n = 0; n < k; ++n) {
      const Eigen::Index jmu = lay_.mean_order(n);
      const double prec_obs = 1.0 / s.obs_variances[n];
      Matrix block = prec_obs * btb_mu_[n];
      block.diagonal().head(2).array() += 1e-8;
      block.diagonal().tail(jmu - 2).array() += s.mean_smoothing[n];
      prec.block(o, o, jmu, jmu) = block;

      Vector balpha = Vector::Zero(jmu);
      const Matrix& bmu = lay_.mean_basis[n].evaluation;
      for (Eigen::Index t = 0; t < t_count_; ++t) {
        const ObsBlock& b = data_->obs[t][n];
        for (Eigen::Index i = 0; i < b.count(); ++i) {
          balpha.noalias() += bmu.row(b.indices[i]).transpose() *
                              s.latent_states(lay_.grid.offset(n) + b.indices[i], t);
        }
      }
      shift.segment(o, jmu) = prec_obs * (by_mu_[n] - balpha);
      o += jmu;
    }
    GaussianConditional g;
    g.prec_llt = safe_llt(prec, "cond_mean");
    g.shift = shift;
    return g;
  }

  /// Mean smoothing: Gamma((J-3)/2 + 1, ...) style exact conditional under
  /// the uniform-on-sd prior, truncated to lambda > 1e-8.
  GammaConditional cond_mean_smoothing(const ParameterState& s, Eigen::Index n) const {
    const Eigen::Index jmu = lay_.mean_order(n);
    GammaConditional g;
    g.shape = 0.5 * static_cast<double>(jmu - 3);
    g.rate = std::max(0.5 * s.mean_coeffs[n].tail(jmu - 2).squaredNorm(), 1e-300);
    g.lo = 1e-8;
    return g;
  }

  // -------------------------------------------------------------- sweep

  void sweep(ParameterState& s, Rng& rng) const {
    require_shapes(s);
    // Kernel block with parameter expansion, under the prior truncated to the
    // stationarity region. The coefficient draw is rejection-sampled against
    // the region at the current scale (exact: the indicator only involves
    // this block), and the scale draw is a truncated normal on the interval
    // the region leaves open given the drawn coefficients.
    {
      KernelCommon kc = kernel_common(s);
      GaussianConditional gtheta;
      {
        Matrix prec = kc.data_prec * (s.kernel.scale * s.kernel.scale);
        const auto& blocks = lay_.free_blocks;
        for (size_t b = 0; b < blocks.size(); ++b) {
          prec.block(kc.off[b], kc.off[b], kc.off[b + 1] - kc.off[b],
                     kc.off[b + 1] - kc.off[b]) += s.kernel.smoothing * lay_.block_penalty[b];
        }
        gtheta.prec_llt = safe_llt(prec, "sweep kernel");
        gtheta.shift = s.kernel.scale * kc.data_shift;
      }
      // squared L2 norms of the scaled surface, per block, for a candidate
      auto block_quads = [&](const Vector& tt) {
        Vector q(static_cast<Eigen::Index>(lay_.free_blocks.size()));
        for (size_t b = 0; b < lay_.free_blocks.size(); ++b) {
          const auto seg = tt.segment(kc.off[b], kc.off[b + 1] - kc.off[b]);
          q[static_cast<Eigen::Index>(b)] = seg.dot(lay_.block_gram[b] * seg);
        }
        return q;
      };
      Vector theta_tilde;
      Vector quads;
      bool inside = false;
      for (int attempt = 0; attempt < 256 && !inside; ++attempt) {
        theta_tilde = gtheta.draw(rng);
        quads = block_quads(theta_tilde);
        inside = (quads.array() * (s.kernel.scale * s.kernel.scale) < kKernelSqNormBound).all();
      }
      if (!inside) {
        // keep the previous block state for this sweep rather than loop forever
        ++truncation_fallbacks_;
        Vector prev(lay_.kernel_dim());
        for (size_t b = 0; b < lay_.free_blocks.size(); ++b) {
          prev.segment(kc.off[b], kc.off[b + 1] - kc.off[b]) =
              Eigen::Map<const Vector>(s.kernel.coeff[b].data(), s.kernel.coeff[b].size());
        }
        theta_tilde = prev / s.kernel.scale;
        quads = block_quads(theta_tilde);
      }
      ScalarGaussianConditional gscale;
      gscale.precision = 1.0 / kKernelScalePriorVar + theta_tilde.dot(kc.data_prec * theta_tilde);
      gscale.shift = theta_tilde.dot(kc.data_shift);
      const double limit = std::sqrt(kKernelSqNormBound / std::max(quads.maxCoeff(), 1e-300));
      const double scale = rng.truncated_normal(gscale.mean(), 1.0 / std::sqrt(gscale.precision),
                                                -limit, limit);
      GammaConditional gsmooth = cond_kernel_smoothing(theta_tilde);
      const double smoothing = gsmooth.draw(rng);
      check_finite(scale + smoothing + theta_tilde.sum(), "kernel block");
      const auto& blocks = lay_.free_blocks;
      for (size_t b = 0; b < blocks.size(); ++b) {
        const auto [n, m] = blocks[b];
        s.kernel.coeff[b] =
            scale * Eigen::Map<const Matrix>(theta_tilde.segment(kc.off[b],
                                                                 kc.off[b + 1] - kc.off[b]).data(),
                                             lay_.kernel_order(n), lay_.kernel_order(m));
      }
      s.kernel.scale = scale;
      s.kernel.smoothing = smoothing;
    }

    // FDLM block on the recomputed innovations
    {
      const Matrix eps = innovations(s);
      Matrix phi = loading_curves(s, lay_);
      const double se_inv = 1.0 / s.innovation.approx_error_variance;
      {
        Matrix prec = se_inv * (phi.transpose() * phi);
        prec.diagonal() += s.innovation.factor_variances.cwiseInverse();
        auto llt = safe_llt(prec, "sweep factors");
        Matrix means = llt.solve(se_inv * (phi.transpose() * eps));
        for (Eigen::Index t = 0; t < t_count_; ++t) {
          s.innovation.factors.col(t) =
              means.col(t) + llt.matrixU().solve(rng.normal_vector(lay_.factors));
        }
      }
      for (Eigen::Index j = 0; j < lay_.factors; ++j) {
        GammaConditional g = cond_factor_precision(s, j);
        s.innovation.factor_variances[j] = 1.0 / g.draw(rng);
      }
      {
        GammaConditional g;
        g.shape = 1e-3 + 0.5 * static_cast<double>(lay_.grid.total() * t_count_);
        g.rate = 1e-3 + 0.5 * (eps - phi * s.innovation.factors).squaredNorm();
        s.innovation.approx_error_variance = 1.0 / g.draw(rng);
      }
      {
        const Matrix m1 = eps * s.innovation.factors.transpose();
        const Matrix gram = s.innovation.factors * s.innovation.factors.transpose();
        for (Eigen::Index j = 0; j < lay_.factors; ++j) {
          GaussianConditional g = loading_conditional(s, j, phi, m1, gram);
          s.innovation.loading_coeffs.col(j) = g.draw(rng);
          phi.col(j).noalias() = lay_.loading_design * s.innovation.loading_coeffs.col(j);
        }
      }
      check_finite(s.innovation.approx_error_variance +
                       s.innovation.factor_variances.sum() +
                       s.innovation.loading_coeffs.sum() + s.innovation.factors.sum(),
                   "innovation block");
    }

    // observation precisions
    for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
      GammaConditional g = cond_obs_precision(s, n);
      s.obs_variances[n] = 1.0 / g.draw(rng);
    }

    // latent states by FFBS
    {
      Dlm dlm = assemble_dlm(s, lay_);
      StateSpace ss(dlm, *data_, lay_.grid);
      s.latent_states = ss.ffbs(rng);
    }

    // mean coefficients and their smoothing
    {
      GaussianConditional g = cond_mean(s);
      Vector all = g.draw(rng);
      Eigen::Index o = 0;
      for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
        s.mean_coeffs[n] = all.segment(o, lay_.mean_order(n));
        o += lay_.mean_order(n);
      }
      for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
        GammaConditional gl = cond_mean_smoothing(s, n);
        s.mean_smoothing[n] = gl.draw(rng);
      }
      check_finite(all.sum() + s.mean_smoothing.sum(), "mean block");
    }
  }

  // ------------------------------------------------------------ densities

  double loglik(const ParameterState& s) const {
    require_shapes(s);
    Dlm dlm = assemble_dlm(s, lay_);
    StateSpace ss(dlm, *data_, lay_.grid);
    return ss.loglik();
  }

  /// Joint prior density of Theta and hyperparameters (variance coordinates
  /// carry the Jacobians). Latent alpha and factor scores are excluded. The
  /// kernel part is the truncated-to-stationarity prior, so the ordinate is
  /// -inf outside the region and carries the region's log mass inside it.
  double log_prior(const ParameterState& s) const {
    if (!kernel_in_stationary_region(s.kernel, lay_)) return kNegInf;
    double lp = log_prior_conditional(s) - log_region_mass();
    // mean smoothing: uniform prior on lambda^{-1/2} over (0, 1e4)
    for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
      const double lam = s.mean_smoothing[n];
      if (lam <= 1e-8) return kNegInf;
      lp += std::log(0.5e-4) - 1.5 * std::log(lam);
    }
    lp += normal_logpdf(s.kernel.scale, 0.0, kKernelScalePriorVar);
    lp += gamma_logpdf(s.kernel.smoothing, 0.5, 0.5);
    return lp;
  }

  /// Prior mass of the kernel stationarity region under the joint prior of
  /// the coefficients and their hyperparameters; computed once per layout.
  double log_region_mass() const {
    if (!std::isfinite(log_region_mass_)) {
      log_region_mass_ = log_stationary_prior_mass(lay_, kKernelScalePriorVar, 0.5, 0.5);
    }
    return log_region_mass_;
  }

  /// Prior of Theta given the hyperparameters (mean smoothing, kernel scale
  /// and smoothing); exactly the density the evidence estimator divides by.
  double log_prior_conditional(const ParameterState& s) const {
    require_shapes(s);
    double lp = 0.0;
    for (Eigen::Index n = 0; n < lay_.grid.series_count(); ++n) {
      const Vector& th = s.mean_coeffs[n];
      const Eigen::Index jmu = lay_.mean_order(n);
      lp += normal_logpdf(th[0], 0.0, 1e8) + normal_logpdf(th[1], 0.0, 1e8);
      const double lam = s.mean_smoothing[n];
      for (Eigen::Index i = 2; i < jmu; ++i) lp += normal_logpdf(th[i], 0.0, 1.0 / lam);
      lp += inverse_gamma_logpdf(s.obs_variances[n], 1e-3, 1e-3);
    }
    // kernel coefficients: N(0, lambda_Psi^{-1} Omega^{-1}) blockwise
    const double lam_psi = s.kernel.shrinkage();
    if (!(lam_psi > 0.0) || !std::isfinite(lam_psi)) return kNegInf;
    for (size_t b = 0; b < lay_.free_blocks.size(); ++b) {
      const Matrix& c = s.kernel.coeff[b];
      Eigen::Map<const Vector> th(c.data(), c.size());
      const double quad = th.dot(lay_.block_penalty[b] * th);
      lp += 0.5 * (c.size() * std::log(lam_psi) + penalty_logdet_[b] -
                   c.size() * kLogTwoPi) -
            0.5 * lam_psi * quad;
    }
    // ordered variance chain, top-down
    const Eigen::Index jeps = lay_.factors;
    const Vector& fv = s.innovation.factor_variances;
    lp += inverse_gamma_logpdf(fv[jeps - 1], 1e-3, 1e-3);
    for (Eigen::Index j = 0; j + 1 < jeps; ++j) {
      if (!(fv[j] > fv[j + 1])) return kNegInf;
      lp += std::log(fv[j + 1]) - 2.0 * std::log(fv[j]);
    }
    lp += inverse_gamma_logpdf(s.innovation.approx_error_variance, 1e-3, 1e-3);
    for (Eigen::Index j = 0; j < jeps; ++j) {
      for (Eigen::Index i = 0; i < lay_.loading_dim(); ++i) {
        lp += normal_logpdf(s.innovation.loading_coeffs(i, j), 0.0,
                            1.0 / lay_.loading_prior_precision[i]);
      }
    }
    return lp;
  }

  // ---------------------------------------------------------- chain driver

  ChainState start() const {
    ChainState c;
    c.state = initialize();
    c.rng = Rng(cfg_.seed);
    return c;
  }

  void advance(ChainState& c, Eigen::Index sweeps) const {
    const Eigen::Index burn = cfg_.resolved_burn_in();
    for (Eigen::Index i = 0; i < sweeps && c.completed < cfg_.iterations; ++i) {
      const Eigen::Index it = c.completed + 1;
      try {
        sweep(c.state, c.rng);
      } catch (const Error& e) {
        fail(ErrorCode::SweepFailure, "Sampler::advance",
             "iteration " + std::to_string(it) + ": " + e.what());
      }
      c.completed = it;
      if (it > burn && (it - burn - 1) % cfg_.thin == 0) {
        Draw d;
        d.theta = evidence_pack(c.state, lay_);
        d.alpha_last = c.state.latent_states.col(t_count_ - 1);
        d.loglik = loglik(c.state);
        d.log_prior = log_prior(c.state) + evidence_log_jacobian(c.state);
        d.iteration = it;
        c.stored.push_back(std::move(d));
      }
    }
  }

  PosteriorSample finalize(ChainState&& c) const {
    PosteriorSample p;
    p.draws = std::move(c.stored);
    p.spec = lay_.spec;
    p.config = cfg_;
    return p;
  }

  PosteriorSample run_chain() const {
    const auto t0 = std::chrono::steady_clock::now();
    ChainState c = start();
    advance(c, cfg_.iterations);
    PosteriorSample p = finalize(std::move(c));
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return p;
  }

  /// Innovation residuals: eps_1 = alpha_1, eps_t = alpha_t - G alpha_{t-1}.
  Matrix innovations(const ParameterState& s) const {
    const Matrix g = transition_matrix(s, lay_);
    Matrix eps(lay_.grid.total(), t_count_);
    eps.col(0) = s.latent_states.col(0);
    eps.rightCols(t_count_ - 1).noalias() =
        s.latent_states.rightCols(t_count_ - 1) - g * s.latent_states.leftCols(t_count_ - 1);
    return eps;
  }

  double penalty_quadform(const Vector& theta) const {
    double q = 0.0;
    Eigen::Index o = 0;
    for (size_t b = 0; b < lay_.free_blocks.size(); ++b) {
      const Eigen::Index d = lay_.block_penalty[b].rows();
      q += theta.segment(o, d).dot(lay_.block_penalty[b] * theta.segment(o, d));
      o += d;
    }
    return q;
  }

 private:
  struct KernelCommon {
    Matrix data_prec;   // sum_t X_t' K^{-1} X_t in block-kron form
    Vector data_shift;  // sum_t X_t' K^{-1} alpha_t
    std::vector<Eigen::Index> off;
  };

  static void add_kron(Matrix& dst, Eigen::Index ro, Eigen::Index co, const Matrix& a,
                       const Matrix& b) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) {
        dst.block(ro + i * b.rows(), co + j * b.cols(), b.rows(), b.cols()) += a(i, j) * b;
      }
    }
  }

  KernelCommon kernel_common(const ParameterState& s) const {
    const Eigen::Index k = lay_.grid.series_count();
    const auto& blocks = lay_.free_blocks;
    KernelCommon kc;
    const Eigen::Index dk = lay_.kernel_dim();
    kc.off.assign(blocks.size() + 1, 0);
    for (size_t b = 0; b < blocks.size(); ++b) {
      kc.off[b + 1] =
          kc.off[b] + lay_.kernel_order(blocks[b].first) * lay_.kernel_order(blocks[b].second);
    }
    const Matrix kinv = kepsilon_inverse(s, lay_);
    std::vector<Matrix> xs(k);
    for (Eigen::Index m = 0; m < k; ++m) {
      xs[m] = wt_kernel_[m] *
              s.latent_states.block(lay_.grid.offset(m), 0, lay_.grid.size(m), t_count_ - 1);
    }
    const Matrix kinv_alpha = kinv * s.latent_states.rightCols(t_count_ - 1);
    kc.data_prec = Matrix::Zero(dk, dk);
    kc.data_shift = Vector::Zero(dk);
    for (size_t b = 0; b < blocks.size(); ++b) {
      const auto [n, m] = blocks[b];
      for (size_t b2 = 0; b2 < blocks.size(); ++b2) {
        const auto [n2, m2] = blocks[b2];
        const Matrix sxx = xs[m] * xs[m2].transpose();
        const Matrix cnn = lay_.kernel_eval[n].transpose() *
                           kinv.block(lay_.grid.offset(n), lay_.grid.offset(n2),
                                      lay_.grid.size(n), lay_.grid.size(n2)) *
                           lay_.kernel_eval[n2];
        add_kron(kc.data_prec, kc.off[b], kc.off[b2], sxx, cnn);
      }
      const Matrix resp =
          lay_.kernel_eval[n].transpose() *
          kinv_alpha.block(lay_.grid.offset(n), 0, lay_.grid.size(n), t_count_ - 1) *
          xs[m].transpose();
      kc.data_shift.segment(kc.off[b], resp.size()) =
          Eigen::Map<const Vector>(resp.data(), resp.size());
    }
    return kc;
  }

  GaussianConditional loading_conditional(const ParameterState& s, Eigen::Index j,
                                          const Matrix& phi, const Matrix& m1,
                                          const Matrix& gram) const {
    const double se_inv = 1.0 / s.innovation.approx_error_variance;
    Matrix prec = (se_inv * gram(j, j)) * btb_phi_;
    prec.diagonal() += lay_.loading_prior_precision;
    Vector resid_proj = m1.col(j) - phi * gram.col(j) + gram(j, j) * phi.col(j);
    GaussianConditional g;
    g.prec_llt = safe_llt(prec, "cond_loading");
    g.shift = se_inv * (lay_.loading_design.transpose() * resid_proj);
    return g;
  }

  static void check_finite(double v, const char* where) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::SweepFailure, "Sampler::sweep", std::string("non-finite draw in ") + where);
    }
  }

  const FunctionalSample* data_;
  GibbsConfig cfg_;
  ModelLayout lay_;
  Eigen::Index t_count_ = 0;
  mutable long truncation_fallbacks_ = 0;  // sweeps that kept the previous kernel block
  mutable double log_region_mass_ = std::numeric_limits<double>::quiet_NaN();

  std::vector<Matrix> wt_kernel_;  // per series, Jpsi x M, B' diag(w)
  Matrix btb_phi_;
  std::vector<Matrix> btb_mu_;
  std::vector<Vector> by_mu_;
  std::vector<Eigen::Index> nobs_;
  std::vector<double> penalty_logdet_;
};

}  // namespace mfar
