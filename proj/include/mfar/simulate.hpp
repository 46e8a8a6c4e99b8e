#pragma once

#include <Eigen/Eigenvalues>
#include <functional>

#include "mfar/model.hpp"
#include "mfar/rng.hpp"

namespace mfar {

/// Who drives whom in the two-series synthetic process, relative to the
/// default labeling (series 0 = response, series 1 = cause).
enum class Scenario { dependent, independent, reverse };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::dependent: return "dependent";
    case Scenario::independent: return "independent";
    case Scenario::reverse: return "reverse";
  }
  return "unknown";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "dependent") return Scenario::dependent;
  if (s == "independent") return Scenario::independent;
  if (s == "reverse") return Scenario::reverse;
  fail(ErrorCode::ConfigError, "scenario_from_string",
       "unknown scenario '" + s + "' (expected dependent|independent|reverse)");
}

struct SimulationConfig {
  Eigen::Index grid_size = 30;
  Eigen::Index time_count = 100;
  Scenario scenario = Scenario::dependent;
  double own_norm_sq = 0.5;    // integral of the squared own-lag kernels
  double cross_norm_sq = 0.1;  // integral of the squared cross kernel
  double noise_sd = 0.02;
  double gp_length = 0.2;
  double gp_sd = 0.1;
  Eigen::Index burn_in = 50;

  void validate() const {
    require(grid_size >= 3, ErrorCode::ConfigError, "SimulationConfig", "grid_size must be >= 3");
    require(time_count >= 2, ErrorCode::ConfigError, "SimulationConfig",
            "time_count must be >= 2");
    require(own_norm_sq > 0.0 && cross_norm_sq >= 0.0, ErrorCode::ConfigError,
            "SimulationConfig", "kernel norms must be positive");
    require(noise_sd > 0.0 && gp_sd > 0.0 && gp_length > 0.0, ErrorCode::ConfigError,
            "SimulationConfig", "scales must be positive");
    require(burn_in >= 0, ErrorCode::ConfigError, "SimulationConfig", "burn_in must be >= 0");
  }
};

using KernelSurface = std::function<double(double, double)>;

/// Two-bump surface with unequal mode weights, elongated across u.
inline double bimodal_surface_a(double tau, double u) {
  const double s1 = 0.3, s2 = 0.4;
  const double norm = 1.0 / (kPi * s1 * s2);
  const double m1 = std::exp(-std::pow((tau - 0.2) / s1, 2) - std::pow((u - 0.3) / s2, 2));
  const double m2 = std::exp(-std::pow((tau - 0.7) / s1, 2) - std::pow((u - 0.8) / s2, 2));
  return 0.75 * norm * m1 + 0.45 * norm * m2;
}

/// Two-bump surface with isotropic modes placed off the diagonal.
inline double bimodal_surface_b(double tau, double u) {
  const double s = 0.35;
  const double norm = 1.0 / (kPi * s * s);
  const double m1 = std::exp(-std::pow((tau - 0.5) / s, 2) - std::pow((u - 0.3) / s, 2));
  const double m2 = std::exp(-std::pow((tau - 0.75) / s, 2) - std::pow((u - 0.6) / s, 2));
  return 0.75 * norm * m1 + 0.45 * norm * m2;
}

/// Trapezoid approximation of the squared surface integral.
inline double kernel_l2_sq(const Matrix& k, const Vector& w_tau, const Vector& w_u) {
  return w_tau.dot((k.array().square().matrix() * w_u));
}

/// Evaluates a surface on the grid and rescales it so the quadrature of its
/// square hits the target exactly.
inline Matrix build_kernel(const Vector& tau_pts, const Vector& u_pts, const KernelSurface& f,
                           double target_sq_integral) {
  Matrix k(tau_pts.size(), u_pts.size());
  for (Eigen::Index i = 0; i < tau_pts.size(); ++i) {
    for (Eigen::Index j = 0; j < u_pts.size(); ++j) k(i, j) = f(tau_pts[i], u_pts[j]);
  }
  const Vector w_tau = trapezoid_weights(tau_pts);
  const Vector w_u = trapezoid_weights(u_pts);
  const double current = kernel_l2_sq(k, w_tau, w_u);
  require(current > 0.0, ErrorCode::DegenerateKernel, "build_kernel",
          "surface is identically zero on the grid");
  return std::sqrt(target_sq_integral / current) * k;
}

struct SimulatedData {
  EvaluationGrid grid;
  FunctionalSample sample;
  Matrix latent;                // total x T, noise-free states
  Vector mean;                  // total
  Matrix transition;            // total x total
  std::vector<Matrix> kernels;  // row-major (n, m); empty matrix when zero
  double spectral_radius = 0.0;
};

namespace detail {

inline Matrix gp_cholesky(const Vector& pts, double sd, double length) {
  const Eigen::Index m = pts.size();
  Matrix k(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const double d = (pts[i] - pts[j]) / length;
      k(i, j) = sd * sd * std::exp(-0.5 * d * d);
    }
  }
  k.diagonal().array() += 1e-10;
  return safe_llt(k, "gp_cholesky").matrixL();
}

}  // namespace detail

/// Draws a stationary two-series functional AR(1) path and noisy, fully
/// observed curves on a shared uniform grid.
inline SimulatedData generate(const SimulationConfig& cfg, Rng& rng) {
  cfg.validate();
  SimulatedData out;
  out.grid = uniform_grid(2, cfg.grid_size);
  const Eigen::Index m = cfg.grid_size;
  const Eigen::Index total = out.grid.total();
  const Vector& pts = out.grid.points[0];

  out.kernels.assign(4, Matrix());
  out.kernels[0] = build_kernel(pts, pts, bimodal_surface_a, cfg.own_norm_sq);
  out.kernels[3] = build_kernel(pts, pts, bimodal_surface_b, cfg.own_norm_sq);
  if (cfg.scenario == Scenario::dependent) {
    out.kernels[1] = build_kernel(pts, pts, bimodal_surface_b, cfg.cross_norm_sq);
  } else if (cfg.scenario == Scenario::reverse) {
    out.kernels[2] = build_kernel(pts, pts, bimodal_surface_b, cfg.cross_norm_sq);
  }

  out.transition = Matrix::Zero(total, total);
  for (Eigen::Index n = 0; n < 2; ++n) {
    for (Eigen::Index mm = 0; mm < 2; ++mm) {
      const Matrix& k = out.kernels[n * 2 + mm];
      if (k.size() == 0) continue;
      out.transition.block(n * m, mm * m, m, m) = k * out.grid.weights[mm].asDiagonal();
    }
  }
  const Eigen::VectorXcd eig = Eigen::EigenSolver<Matrix>(out.transition, false).eigenvalues();
  out.spectral_radius = eig.cwiseAbs().maxCoeff();
  require(out.spectral_radius < 1.0, ErrorCode::DegenerateKernel, "generate",
          "transition operator is not stable (spectral radius " +
              std::to_string(out.spectral_radius) + ")");

  out.mean = Vector(total);
  for (Eigen::Index n = 0; n < 2; ++n) {
    for (Eigen::Index i = 0; i < m; ++i) {
      out.mean[n * m + i] = 0.4 * std::sin(2.0 * kPi * pts[i] + 0.7 * n) + 0.1 * (n + 1);
    }
  }

  const Matrix gp_l = detail::gp_cholesky(pts, cfg.gp_sd, cfg.gp_length);
  auto draw_innovation = [&]() {
    Vector e(total);
    for (Eigen::Index n = 0; n < 2; ++n) {
      e.segment(n * m, m) = gp_l * rng.normal_vector(m);
    }
    return e;
  };

  Vector alpha = draw_innovation();
  for (Eigen::Index t = 0; t < cfg.burn_in; ++t) {
    alpha = out.transition * alpha + draw_innovation();
  }
  out.latent = Matrix(total, cfg.time_count);
  out.sample.obs.resize(cfg.time_count);
  for (Eigen::Index t = 0; t < cfg.time_count; ++t) {
    alpha = out.transition * alpha + draw_innovation();
    out.latent.col(t) = alpha;
    out.sample.obs[t].resize(2);
    for (Eigen::Index n = 0; n < 2; ++n) {
      ObsBlock& b = out.sample.obs[t][n];
      b.indices.resize(m);
      b.values = out.mean.segment(n * m, m) + alpha.segment(n * m, m) +
                 cfg.noise_sd * rng.normal_vector(m);
      for (Eigen::Index i = 0; i < m; ++i) b.indices[i] = i;
    }
  }
  return out;
}

/// Restriction of a sample to a subset of series, with a matching grid.
inline std::pair<FunctionalSample, EvaluationGrid> subset_series(
    const FunctionalSample& sample, const EvaluationGrid& grid,
    const std::vector<Eigen::Index>& keep) {
  require(!keep.empty(), ErrorCode::ConfigError, "subset_series", "keep list is empty");
  std::vector<Vector> points;
  std::vector<SeriesKind> kinds;
  for (Eigen::Index n : keep) {
    require(n >= 0 && n < grid.series_count(), ErrorCode::ConfigError, "subset_series",
            "series index out of range");
    points.push_back(grid.points[n]);
    kinds.push_back(grid.kinds[n]);
  }
  FunctionalSample out;
  out.obs.resize(sample.obs.size());
  for (size_t t = 0; t < sample.obs.size(); ++t) {
    for (Eigen::Index n : keep) out.obs[t].push_back(sample.obs[t][n]);
  }
  return {std::move(out), make_grid(points, kinds)};
}

}  // namespace mfar
