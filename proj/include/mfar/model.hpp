#pragma once

#include <utility>
#include <vector>

#include "mfar/basis.hpp"
#include "mfar/grid.hpp"

namespace mfar {

/// Observations of one series at one time: grid row indices plus values.
struct ObsBlock {
  std::vector<Eigen::Index> indices;
  Vector values;
  Eigen::Index count() const { return static_cast<Eigen::Index>(indices.size()); }
};

/// Irregularly observed functional panel; obs[t][n] is series n at time t.
struct FunctionalSample {
  std::vector<std::vector<ObsBlock>> obs;

  Eigen::Index time_count() const { return static_cast<Eigen::Index>(obs.size()); }
  Eigen::Index series_count() const {
    return obs.empty() ? 0 : static_cast<Eigen::Index>(obs.front().size());
  }

  void validate(const EvaluationGrid& g) const {
    require(time_count() >= 2, ErrorCode::DegenerateInput, "FunctionalSample::validate",
            "need at least 2 time points");
    for (Eigen::Index t = 0; t < time_count(); ++t) {
      require(static_cast<Eigen::Index>(obs[t].size()) == g.series_count(),
              ErrorCode::ShapeError, "FunctionalSample::validate",
              "series count mismatch at time " + std::to_string(t));
      Eigen::Index total = 0;
      for (Eigen::Index n = 0; n < g.series_count(); ++n) {
        const ObsBlock& b = obs[t][n];
        require(b.values.size() == b.count(), ErrorCode::ShapeError,
                "FunctionalSample::validate", "index/value length mismatch");
        for (Eigen::Index i : b.indices) {
          require(i >= 0 && i < g.size(n), ErrorCode::ShapeError, "FunctionalSample::validate",
                  "grid index out of range at time " + std::to_string(t));
        }
        total += b.count();
      }
      require(total > 0, ErrorCode::DegenerateInput, "FunctionalSample::validate",
              "time " + std::to_string(t) + " has no observations in any series");
    }
  }
};

enum class Hypothesis { unrestricted, restricted };

/// Which lag-1 kernel blocks are free. Diagonal blocks always are; the
/// (response <- cause) block is free only under the unrestricted hypothesis;
/// every other cross block is a structural zero under both.
struct ModelSpec {
  Hypothesis hypothesis = Hypothesis::unrestricted;
  Eigen::Index series = 2;
  Eigen::Index response = 0;
  Eigen::Index cause = 1;

  bool block_free(Eigen::Index n, Eigen::Index m) const {
    if (n == m) return true;
    return hypothesis == Hypothesis::unrestricted && n == response && m == cause;
  }
  std::vector<std::pair<Eigen::Index, Eigen::Index>> free_blocks() const {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
    for (Eigen::Index n = 0; n < series; ++n) {
      for (Eigen::Index m = 0; m < series; ++m) {
        if (block_free(n, m)) out.emplace_back(n, m);
      }
    }
    return out;
  }
  void validate() const {
    require(series >= 1, ErrorCode::ShapeError, "ModelSpec", "need at least one series");
    if (series > 1) {
      require(response != cause, ErrorCode::ConfigError, "ModelSpec",
              "response and cause must differ");
      require(response >= 0 && response < series && cause >= 0 && cause < series,
              ErrorCode::ShapeError, "ModelSpec", "response/cause out of range");
    }
  }
};

struct LayoutConfig {
  Eigen::Index mean_order = 0;     // 0 selects min(15, ceil(M/2)), floored at 3
  Eigen::Index loading_order = 0;  // same default rule
  Eigen::Index kernel_order = 8;   // clamped to [4, M+1]
  Eigen::Index factors = 0;        // 0 selects min(6K, total/3), clamped to [2, 20]
  double kappa = 1.0;
};

inline Eigen::Index default_curve_order(Eigen::Index m) {
  return std::min<Eigen::Index>(15, std::max<Eigen::Index>(3, (m + 1) / 2));
}

/// Deterministic derived quantities shared by every operation on a dataset:
/// bases per series, per-block tensor penalties, stacked designs.
struct ModelLayout {
  EvaluationGrid grid;
  ModelSpec spec;
  Eigen::Index factors = 0;
  double kappa = 1.0;

  std::vector<BasisSet> mean_basis;
  std::vector<BasisSet> loading_basis;
  std::vector<BsplineBasis1d> kernel_basis;
  std::vector<Matrix> kernel_eval;  // per series, M_n x Jpsi_n

  std::vector<std::pair<Eigen::Index, Eigen::Index>> free_blocks;
  std::vector<Matrix> block_penalty;  // per free block, (Jn*Jm)^2
  std::vector<Matrix> block_gram;     // per free block, quadform = integral of the surface^2

  Matrix mean_design;     // blockdiag, total x mean_dim
  Matrix loading_design;  // blockdiag, total x loading_dim
  Vector loading_prior_precision;  // diag of Lambda_phi^{-1}

  Eigen::Index mean_order(Eigen::Index n) const { return mean_basis[n].order(); }
  Eigen::Index loading_order(Eigen::Index n) const { return loading_basis[n].order(); }
  Eigen::Index kernel_order(Eigen::Index n) const { return kernel_eval[n].cols(); }

  Eigen::Index mean_dim() const { return mean_design.cols(); }
  Eigen::Index loading_dim() const { return loading_design.cols(); }
  Eigen::Index kernel_dim() const {
    Eigen::Index d = 0;
    for (auto [n, m] : free_blocks) d += kernel_order(n) * kernel_order(m);
    return d;
  }
  Eigen::Index block_index(Eigen::Index n, Eigen::Index m) const {
    for (size_t b = 0; b < free_blocks.size(); ++b) {
      if (free_blocks[b].first == n && free_blocks[b].second == m)
        return static_cast<Eigen::Index>(b);
    }
    return -1;
  }
};

inline ModelLayout make_layout(const EvaluationGrid& grid, const ModelSpec& spec,
                               const LayoutConfig& cfg = {}) {
  spec.validate();
  require(grid.series_count() == spec.series, ErrorCode::ShapeError, "make_layout",
          "grid/spec series count mismatch");
  require(cfg.factors >= 0, ErrorCode::ConfigError, "make_layout", "factors must be >= 0");
  ModelLayout lay;
  lay.grid = grid;
  lay.spec = spec;
  if (cfg.factors >= 1) {
    lay.factors = cfg.factors;
  } else {
    // Auto rule: the factor curves are shared across series, so the innovation
    // covariance of K independent series needs roughly K times the per-series
    // rank. Six factors per series covers a smooth innovation process on a
    // dense grid; cap by a third of the total grid size for short grids.
    lay.factors = std::clamp<Eigen::Index>(
        std::min<Eigen::Index>(6 * grid.series_count(), grid.total() / 3),
        std::min<Eigen::Index>(2, grid.total() - 1), 20);
  }
  lay.kappa = cfg.kappa;

  const Eigen::Index k = grid.series_count();
  Eigen::Index mu_dim = 0, phi_dim = 0;
  for (Eigen::Index n = 0; n < k; ++n) {
    const Eigen::Index m = grid.size(n);
    const Eigen::Index jmu = cfg.mean_order > 0 ? cfg.mean_order : default_curve_order(m);
    const Eigen::Index jphi = cfg.loading_order > 0 ? cfg.loading_order : default_curve_order(m);
    const Eigen::Index jpsi =
        std::max<Eigen::Index>(4, std::min<Eigen::Index>(cfg.kernel_order, m + 1));
    lay.mean_basis.push_back(thin_plate_basis(grid.points[n], jmu));
    lay.loading_basis.push_back(thin_plate_basis(grid.points[n], jphi));
    lay.kernel_basis.emplace_back(grid.points[n].minCoeff(), grid.points[n].maxCoeff(), jpsi);
    lay.kernel_eval.push_back(lay.kernel_basis.back().evaluate(grid.points[n]));
    mu_dim += jmu;
    phi_dim += jphi;
  }

  lay.mean_design = Matrix::Zero(grid.total(), mu_dim);
  lay.loading_design = Matrix::Zero(grid.total(), phi_dim);
  lay.loading_prior_precision = Vector::Zero(phi_dim);
  Eigen::Index mu_off = 0, phi_off = 0;
  for (Eigen::Index n = 0; n < k; ++n) {
    const Eigen::Index m = grid.size(n);
    lay.mean_design.block(grid.offset(n), mu_off, m, lay.mean_order(n)) =
        lay.mean_basis[n].evaluation;
    lay.loading_design.block(grid.offset(n), phi_off, m, lay.loading_order(n)) =
        lay.loading_basis[n].evaluation;
    // vague on the affine pair, unit smoothing precision on the radial part
    lay.loading_prior_precision.segment(phi_off, lay.loading_order(n)).setConstant(1.0);
    lay.loading_prior_precision[phi_off] = 1e-8;
    lay.loading_prior_precision[phi_off + 1] = 1e-8;
    mu_off += lay.mean_order(n);
    phi_off += lay.loading_order(n);
  }

  lay.free_blocks = spec.free_blocks();
  for (auto [n, m] : lay.free_blocks) {
    lay.block_penalty.push_back(
        tensor_penalty(lay.kernel_basis[n], lay.kernel_basis[m], cfg.kappa));
    lay.block_gram.push_back(Eigen::kroneckerProduct(lay.kernel_basis[m].gram(0, 0),
                                                     lay.kernel_basis[n].gram(0, 0)));
  }
  return lay;
}

/// Kernel coefficients per free block, plus the parameter-expansion scale
/// (xi tilde) and smoothing (lambda tilde). Stored coefficients are the
/// scaled product theta = scale * theta_tilde.
struct KernelParams {
  std::vector<Matrix> coeff;
  double scale = 1.0;
  double smoothing = 1.0;

  double shrinkage() const { return smoothing / (scale * scale); }  // lambda_Psi
};

struct InnovationParams {
  Matrix loading_coeffs;         // loading_dim x factors (Xi)
  Matrix factors;                // factors x T (e_t columns)
  Vector factor_variances;       // sigma_j^2, nonincreasing in j
  double approx_error_variance = 1.0;  // sigma_eta^2
};

struct ParameterState {
  std::vector<Vector> mean_coeffs;  // theta_mu per series
  Vector mean_smoothing;            // lambda_mu per series
  Vector obs_variances;             // sigma^2_nu per series
  KernelParams kernel;
  InnovationParams innovation;
  Matrix latent_states;             // total x T, columns alpha_t
};

inline Vector mean_curve(const ParameterState& s, const ModelLayout& lay) {
  Vector mu(lay.grid.total());
  for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
    mu.segment(lay.grid.offset(n), lay.grid.size(n)).noalias() =
        lay.mean_basis[n].evaluation * s.mean_coeffs[n];
  }
  return mu;
}

/// Psi(tau_i, u_j) for the (n, m) block; exact zeros for structural zeros.
inline Matrix kernel_surface(const KernelParams& kp, const ModelLayout& lay, Eigen::Index n,
                             Eigen::Index m) {
  const Eigen::Index b = lay.block_index(n, m);
  if (b < 0) return Matrix::Zero(lay.grid.size(n), lay.grid.size(m));
  return lay.kernel_eval[n] * kp.coeff[b] * lay.kernel_eval[m].transpose();
}

/// Squared L2 norm (double integral of the squared surface) of each free
/// kernel block, via the spline Gram quadratic form.
inline Vector kernel_block_sq_norms(const KernelParams& kp, const ModelLayout& lay) {
  Vector out(static_cast<Eigen::Index>(lay.free_blocks.size()));
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    const auto v = Eigen::Map<const Vector>(kp.coeff[b].data(), kp.coeff[b].size());
    out[static_cast<Eigen::Index>(b)] = v.dot(lay.block_gram[b] * v);
  }
  return out;
}

/// Stationarity region used to truncate the kernel prior: every free block
/// must have squared L2 norm below one. A diffuse prior on the expansion
/// scale otherwise lets the sampler wander into explosive kernel operators
/// that track any finite sample path, and the two hypotheses become
/// indistinguishable by fit.
inline constexpr double kKernelSqNormBound = 1.0;

inline bool kernel_in_stationary_region(const KernelParams& kp, const ModelLayout& lay) {
  return (kernel_block_sq_norms(kp, lay).array() < kKernelSqNormBound).all();
}

/// G = Psi_eval * Q, assembled blockwise; structural-zero blocks stay exact 0.
inline Matrix transition_matrix(const ParameterState& s, const ModelLayout& lay) {
  Matrix g = Matrix::Zero(lay.grid.total(), lay.grid.total());
  for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
    for (Eigen::Index m = 0; m < lay.grid.series_count(); ++m) {
      const Eigen::Index b = lay.block_index(n, m);
      if (b < 0) continue;
      g.block(lay.grid.offset(n), lay.grid.offset(m), lay.grid.size(n), lay.grid.size(m))
          .noalias() = lay.kernel_eval[n] * s.kernel.coeff[b] *
                       (lay.grid.weights[m].asDiagonal() * lay.kernel_eval[m]).transpose();
    }
  }
  return g;
}

inline Matrix loading_curves(const ParameterState& s, const ModelLayout& lay) {
  return lay.loading_design * s.innovation.loading_coeffs;
}

inline Matrix kepsilon(const ParameterState& s, const ModelLayout& lay) {
  const Matrix phi = loading_curves(s, lay);
  Matrix k = phi * s.innovation.factor_variances.asDiagonal() * phi.transpose();
  k.diagonal().array() += s.innovation.approx_error_variance;
  return symmetrize(k);
}

/// Woodbury inverse of kepsilon:
///   K^{-1} = s^{-1} [ I - Phi (s Sigma_e^{-1} + Phi' Phi)^{-1} Phi' ],  s = sigma_eta^2.
inline Matrix kepsilon_inverse(const ParameterState& s, const ModelLayout& lay) {
  const Matrix phi = loading_curves(s, lay);
  const double se = s.innovation.approx_error_variance;
  Matrix core = phi.transpose() * phi;
  core.diagonal() += se * s.innovation.factor_variances.cwiseInverse();
  auto llt = safe_llt(core, "kepsilon_inverse");
  Matrix inner = llt.solve(phi.transpose());
  Matrix out = -(phi * inner);
  out.diagonal().array() += 1.0;
  return symmetrize(out / se);
}

struct Dlm {
  Matrix transition;
  Matrix innovation_cov;
  Vector mean;
  Vector obs_variances;  // per series
};

inline Dlm assemble_dlm(const ParameterState& s, const ModelLayout& lay) {
  Dlm d;
  d.transition = transition_matrix(s, lay);
  require(d.transition.allFinite(), ErrorCode::DegenerateKernel, "assemble_dlm",
          "transition matrix has non-finite entries");
  d.innovation_cov = kepsilon(s, lay);
  d.mean = mean_curve(s, lay);
  d.obs_variances = s.obs_variances;
  require(d.mean.allFinite() && d.innovation_cov.allFinite(), ErrorCode::NumericalBreakdown,
          "assemble_dlm", "non-finite model matrices");
  return d;
}

/// Theta packing order: mean coefficients, observation variances, kernel
/// coefficients (free blocks, column-major), factor variances, approximation
/// error variance, loading coefficients (column-major).
inline Eigen::Index theta_dim(const ModelLayout& lay) {
  return lay.mean_dim() + lay.grid.series_count() + lay.kernel_dim() + lay.factors + 1 +
         lay.loading_dim() * lay.factors;
}

inline Vector theta_pack(const ParameterState& s, const ModelLayout& lay) {
  Vector th(theta_dim(lay));
  Eigen::Index o = 0;
  for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
    th.segment(o, lay.mean_order(n)) = s.mean_coeffs[n];
    o += lay.mean_order(n);
  }
  th.segment(o, s.obs_variances.size()) = s.obs_variances;
  o += s.obs_variances.size();
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    const Matrix& c = s.kernel.coeff[b];
    th.segment(o, c.size()) = Eigen::Map<const Vector>(c.data(), c.size());
    o += c.size();
  }
  th.segment(o, lay.factors) = s.innovation.factor_variances;
  o += lay.factors;
  th[o++] = s.innovation.approx_error_variance;
  const Matrix& xi = s.innovation.loading_coeffs;
  th.segment(o, xi.size()) = Eigen::Map<const Vector>(xi.data(), xi.size());
  o += xi.size();
  require(o == th.size(), ErrorCode::ShapeError, "theta_pack", "packing offset mismatch");
  return th;
}

/// Inverse of theta_pack; hyperparameters and latent blocks are left as-is.
inline void theta_unpack(const Vector& th, const ModelLayout& lay, ParameterState& s) {
  require(th.size() == theta_dim(lay), ErrorCode::ShapeError, "theta_unpack",
          "theta length mismatch");
  Eigen::Index o = 0;
  s.mean_coeffs.resize(lay.grid.series_count());
  for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
    s.mean_coeffs[n] = th.segment(o, lay.mean_order(n));
    o += lay.mean_order(n);
  }
  s.obs_variances = th.segment(o, lay.grid.series_count());
  o += lay.grid.series_count();
  s.kernel.coeff.resize(lay.free_blocks.size());
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    auto [n, m] = lay.free_blocks[b];
    const Eigen::Index rows = lay.kernel_order(n), cols = lay.kernel_order(m);
    s.kernel.coeff[b] = Eigen::Map<const Matrix>(th.segment(o, rows * cols).data(), rows, cols);
    o += rows * cols;
  }
  s.innovation.factor_variances = th.segment(o, lay.factors);
  o += lay.factors;
  s.innovation.approx_error_variance = th[o++];
  s.innovation.loading_coeffs =
      Eigen::Map<const Matrix>(th.segment(o, lay.loading_dim() * lay.factors).data(),
                               lay.loading_dim(), lay.factors);
}

/// Parametrization used by the evidence estimator: the packed parameters with
/// every positive component on the log scale (variances are heavily skewed in
/// the raw scale, and the weighting density is Gaussian), followed by the
/// smoothing hyperparameters so the truncation region constrains them too.
/// Order of the tail: per-series mean smoothing (log), kernel expansion
/// scale, kernel smoothing (log).
inline Eigen::Index evidence_dim(const ModelLayout& lay) {
  return theta_dim(lay) + lay.grid.series_count() + 2;
}

inline Vector evidence_pack(const ParameterState& s, const ModelLayout& lay) {
  Vector th(evidence_dim(lay));
  th.head(theta_dim(lay)) = theta_pack(s, lay);
  const Eigen::Index o_obs = lay.mean_dim();
  const Eigen::Index k = lay.grid.series_count();
  const Eigen::Index o_fv = o_obs + k + lay.kernel_dim();
  th.segment(o_obs, k) = th.segment(o_obs, k).array().log();
  th.segment(o_fv, lay.factors + 1) = th.segment(o_fv, lay.factors + 1).array().log();
  Eigen::Index o = theta_dim(lay);
  th.segment(o, k) = s.mean_smoothing.array().log();
  o += k;
  th[o++] = s.kernel.scale;
  th[o++] = std::log(s.kernel.smoothing);
  return th;
}

inline void evidence_unpack(const Vector& th, const ModelLayout& lay, ParameterState& s) {
  require(th.size() == evidence_dim(lay), ErrorCode::ShapeError, "evidence_unpack",
          "evidence vector length mismatch");
  Vector raw = th.head(theta_dim(lay));
  const Eigen::Index o_obs = lay.mean_dim();
  const Eigen::Index k = lay.grid.series_count();
  const Eigen::Index o_fv = o_obs + k + lay.kernel_dim();
  raw.segment(o_obs, k) = raw.segment(o_obs, k).array().exp();
  raw.segment(o_fv, lay.factors + 1) = raw.segment(o_fv, lay.factors + 1).array().exp();
  theta_unpack(raw, lay, s);
  Eigen::Index o = theta_dim(lay);
  s.mean_smoothing = th.segment(o, k).array().exp();
  o += k;
  s.kernel.scale = th[o++];
  s.kernel.smoothing = std::exp(th[o++]);
}

/// Log Jacobian of the raw -> evidence map: each positive coordinate x is
/// stored as log x, so the prior density in evidence coordinates gains a
/// factor x per transformed coordinate.
inline double evidence_log_jacobian(const ParameterState& s) {
  double j = s.obs_variances.array().log().sum() +
             s.innovation.factor_variances.array().log().sum() +
             std::log(s.innovation.approx_error_variance) +
             s.mean_smoothing.array().log().sum() + std::log(s.kernel.smoothing);
  return j;
}

}  // namespace mfar
