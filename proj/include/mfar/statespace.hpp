#pragma once

#include <optional>
#include <vector>

#include "mfar/model.hpp"
#include "mfar/rng.hpp"

namespace mfar {

namespace detail {

/// Observations at one time, flattened across series into global grid rows.
struct ObsSlice {
  std::vector<Eigen::Index> rows;
  Vector values;
  Vector noise;

  Eigen::Index count() const { return static_cast<Eigen::Index>(rows.size()); }
};

inline std::vector<ObsSlice> flatten_obs(const FunctionalSample& data,
                                         const EvaluationGrid& grid,
                                         const Vector& obs_variances) {
  std::vector<ObsSlice> slices(data.time_count());
  for (Eigen::Index t = 0; t < data.time_count(); ++t) {
    ObsSlice& sl = slices[t];
    Eigen::Index total = 0;
    for (Eigen::Index n = 0; n < grid.series_count(); ++n) total += data.obs[t][n].count();
    sl.rows.reserve(total);
    sl.values.resize(total);
    sl.noise.resize(total);
    Eigen::Index r = 0;
    for (Eigen::Index n = 0; n < grid.series_count(); ++n) {
      const ObsBlock& b = data.obs[t][n];
      for (Eigen::Index i = 0; i < b.count(); ++i, ++r) {
        sl.rows.push_back(grid.offset(n) + b.indices[i]);
        sl.values[r] = b.values[i];
        sl.noise[r] = obs_variances[n];
      }
    }
  }
  return slices;
}

}  // namespace detail

struct FilterStorage {
  std::vector<Vector> pred_mean, filt_mean;
  std::vector<Matrix> pred_cov, filt_cov;
};

/// Kalman filter / FFBS for the functional DLM
///   y_t = Z_t (mu + alpha_t) + v_t,   alpha_t = G alpha_{t-1} + eps_t,
///   alpha_1 ~ N(0, K_eps),
/// with Z_t a row selector. Measurement updates use the Joseph form, every
/// covariance is symmetrized, and Choleskys carry a fixed 1e-10 jitter.
class StateSpace {
 public:
  StateSpace(const Dlm& dlm, const FunctionalSample& data, const EvaluationGrid& grid)
      : dlm_(dlm),
        slices_(detail::flatten_obs(data, grid, dlm.obs_variances)),
        d_(grid.total()) {
    require(dlm.transition.rows() == d_ && dlm.innovation_cov.rows() == d_ &&
                dlm.mean.size() == d_,
            ErrorCode::ShapeError, "StateSpace", "model dimensions do not match the grid");
  }

  Eigen::Index time_count() const { return static_cast<Eigen::Index>(slices_.size()); }

  /// Marginal log-likelihood of the observations.
  double loglik() const { return filter(nullptr); }

  /// Forward filter, backward sampling draw of alpha_{1:T} (columns).
  Matrix ffbs(Rng& rng, double* loglik_out = nullptr) const {
    FilterStorage fs;
    const double ll = filter(&fs);
    if (loglik_out) *loglik_out = ll;
    const auto t_count = time_count();
    Matrix draws(d_, t_count);
    {
      auto llt = safe_llt(fs.filt_cov[t_count - 1], "ffbs");
      draws.col(t_count - 1) =
          fs.filt_mean[t_count - 1] + llt.matrixL() * rng.normal_vector(d_);
    }
    Matrix gp(d_, d_), x(d_, d_), cond(d_, d_);
    for (Eigen::Index t = t_count - 2; t >= 0; --t) {
      auto pred_llt = safe_llt(fs.pred_cov[t + 1], "ffbs");
      gp.noalias() = dlm_.transition * fs.filt_cov[t];
      // J (a - a_pred) with J = P_f G' P_pred^{-1}, via triangular solves
      Vector resid = draws.col(t + 1) - fs.pred_mean[t + 1];
      Vector mean = fs.filt_mean[t] + gp.transpose() * pred_llt.solve(resid);
      x.noalias() = pred_llt.matrixL().solve(gp);
      cond.noalias() = fs.filt_cov[t] - x.transpose() * x;
      auto cond_llt = safe_llt(cond, "ffbs");
      draws.col(t) = mean + cond_llt.matrixL() * rng.normal_vector(d_);
    }
    return draws;
  }

 private:
  double filter(FilterStorage* fs) const {
    const auto t_count = time_count();
    require(t_count >= 1, ErrorCode::DegenerateInput, "StateSpace::filter", "no data");
    if (fs) {
      fs->pred_mean.resize(t_count);
      fs->filt_mean.resize(t_count);
      fs->pred_cov.resize(t_count);
      fs->filt_cov.resize(t_count);
    }
    Vector a = Vector::Zero(d_);
    Matrix p = dlm_.innovation_cov;
    Matrix a_jos(d_, d_), ap(d_, d_), pf(d_, d_);
    double ll = 0.0;
    for (Eigen::Index t = 0; t < t_count; ++t) {
      if (fs) {
        fs->pred_mean[t] = a;
        fs->pred_cov[t] = p;
      }
      const detail::ObsSlice& sl = slices_[t];
      const Eigen::Index m = sl.count();
      if (m > 0) {
        Vector v(m);
        for (Eigen::Index r = 0; r < m; ++r) {
          v[r] = sl.values[r] - dlm_.mean[sl.rows[r]] - a[sl.rows[r]];
        }
        Matrix psel(d_, m);
        for (Eigen::Index r = 0; r < m; ++r) psel.col(r) = p.col(sl.rows[r]);
        Matrix f(m, m);
        for (Eigen::Index r = 0; r < m; ++r) f.row(r) = psel.row(sl.rows[r]);
        f.diagonal() += sl.noise;
        auto llt = safe_llt(f, "StateSpace::filter");
        Vector fv = llt.solve(v);
        const double contrib =
            -0.5 * (m * kLogTwoPi + logdet_from_llt(llt) + v.dot(fv));
        if (!std::isfinite(contrib)) {
          fail(ErrorCode::NumericalBreakdown, "StateSpace::filter",
               "non-finite likelihood contribution at time " + std::to_string(t));
        }
        ll += contrib;
        Matrix k = llt.solve(psel.transpose()).transpose();  // d x m gain
        a.noalias() += k * v;
        // Joseph update: (I - KZ) P (I - KZ)' + K D K'
        a_jos.setIdentity(d_, d_);
        for (Eigen::Index r = 0; r < m; ++r) a_jos.col(sl.rows[r]) -= k.col(r);
        ap.noalias() = a_jos * p;
        pf.noalias() = ap * a_jos.transpose();
        pf.noalias() += k * sl.noise.asDiagonal() * k.transpose();
        p = symmetrize(pf);
      }
      if (fs) {
        fs->filt_mean[t] = a;
        fs->filt_cov[t] = p;
      }
      if (t + 1 < t_count) {
        Vector ga = dlm_.transition * a;
        a.swap(ga);
        ap.noalias() = dlm_.transition * p;
        pf.noalias() = ap * dlm_.transition.transpose();
        pf += dlm_.innovation_cov;
        p = symmetrize(pf);
      }
    }
    return ll;
  }

  const Dlm& dlm_;
  std::vector<detail::ObsSlice> slices_;
  Eigen::Index d_;
};

struct ForecastSummary {
  Matrix mean;         // total x horizon, posterior predictive mean of the curve
  Matrix sd;           // total x horizon, sqrt(avg analytic var + between-draw var)
  Matrix process_var;  // total x horizon, average analytic forecast variance
};

/// h-step forecast from posterior draws: per draw the point path G^h alpha_T
/// with analytic accumulated variance V_h = sum_s G^s K_eps G^s', mixed over
/// draws.
inline ForecastSummary forecast_draws(const std::vector<Dlm>& dlms,
                                      const std::vector<Vector>& alpha_last,
                                      Eigen::Index horizon) {
  require(!dlms.empty() && dlms.size() == alpha_last.size(), ErrorCode::ShapeError,
          "forecast_draws", "draw lists empty or mismatched");
  require(horizon >= 1, ErrorCode::ShapeError, "forecast_draws", "horizon must be >= 1");
  const Eigen::Index d = dlms.front().transition.rows();
  const auto s_count = static_cast<double>(dlms.size());
  ForecastSummary out;
  out.mean = Matrix::Zero(d, horizon);
  out.sd = Matrix::Zero(d, horizon);
  out.process_var = Matrix::Zero(d, horizon);
  Matrix sumsq = Matrix::Zero(d, horizon);
  Matrix v(d, d), gv(d, d);
  for (size_t i = 0; i < dlms.size(); ++i) {
    const Dlm& m = dlms[i];
    Vector x = alpha_last[i];
    v = m.innovation_cov;
    for (Eigen::Index h = 0; h < horizon; ++h) {
      if (h > 0) {
        gv.noalias() = m.transition * v;
        v.noalias() = gv * m.transition.transpose();
        v += m.innovation_cov;
        v = symmetrize(v);
      }
      Vector gx = m.transition * x;
      x.swap(gx);
      Vector curve = m.mean + x;
      out.mean.col(h) += curve;
      sumsq.col(h) += curve.cwiseProduct(curve);
      out.process_var.col(h) += v.diagonal();
    }
  }
  out.mean /= s_count;
  out.process_var /= s_count;
  Matrix between = (sumsq / s_count - out.mean.cwiseProduct(out.mean)).cwiseMax(0.0);
  out.sd = (out.process_var + between).cwiseSqrt();
  return out;
}

}  // namespace mfar
