#pragma once

#include "mfar/model.hpp"
#include "mfar/rng.hpp"

namespace mfar::testing {

/// Random but well-scaled parameter state for exercising model algebra.
inline ParameterState random_state(const ModelLayout& lay, Rng& rng, Eigen::Index t_count = 6) {
  ParameterState s;
  const Eigen::Index k = lay.grid.series_count();
  s.mean_coeffs.resize(k);
  for (Eigen::Index n = 0; n < k; ++n) {
    s.mean_coeffs[n] = 0.3 * rng.normal_vector(lay.mean_order(n));
  }
  s.mean_smoothing = Vector::Ones(k);
  s.obs_variances = Vector::NullaryExpr(k, [&](Eigen::Index) { return 0.02 + 0.05 * rng.uniform(); });
  s.kernel.scale = 1.0;
  s.kernel.smoothing = 1.0;
  for (auto [n, m] : lay.free_blocks) {
    s.kernel.coeff.push_back(0.2 * Matrix::NullaryExpr(lay.kernel_order(n), lay.kernel_order(m),
                                                       [&](Eigen::Index, Eigen::Index) {
                                                         return rng.normal();
                                                       }));
  }
  // keep harness kernels inside the stationarity region the prior truncates to
  {
    Vector q = kernel_block_sq_norms(s.kernel, lay);
    for (size_t b = 0; b < s.kernel.coeff.size(); ++b) {
      const double n2 = q[static_cast<Eigen::Index>(b)];
      if (n2 > 0.25) s.kernel.coeff[b] *= std::sqrt(0.25 / n2);
    }
  }
  s.innovation.loading_coeffs = Matrix::NullaryExpr(
      lay.loading_dim(), lay.factors, [&](Eigen::Index, Eigen::Index) { return 0.5 * rng.normal(); });
  s.innovation.factors = Matrix::NullaryExpr(lay.factors, t_count,
                                             [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  s.innovation.factor_variances = Vector(lay.factors);
  double v = 1.0;
  for (Eigen::Index j = 0; j < lay.factors; ++j) {
    s.innovation.factor_variances[j] = v;
    v *= 0.5;
  }
  s.innovation.approx_error_variance = 0.01;
  s.latent_states = Matrix::NullaryExpr(lay.grid.total(), t_count,
                                        [&](Eigen::Index, Eigen::Index) { return 0.3 * rng.normal(); });
  return s;
}

/// Fully observed sample built from a total x T matrix of values.
inline FunctionalSample dense_sample(const EvaluationGrid& g, const Matrix& y) {
  FunctionalSample s;
  s.obs.resize(y.cols());
  for (Eigen::Index t = 0; t < y.cols(); ++t) {
    s.obs[t].resize(g.series_count());
    for (Eigen::Index n = 0; n < g.series_count(); ++n) {
      ObsBlock& b = s.obs[t][n];
      b.indices.resize(g.size(n));
      for (Eigen::Index i = 0; i < g.size(n); ++i) b.indices[i] = i;
      b.values = y.col(t).segment(g.offset(n), g.size(n));
    }
  }
  return s;
}

}  // namespace mfar::testing
