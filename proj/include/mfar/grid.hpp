#pragma once

#include <vector>

#include "mfar/numeric.hpp"

namespace mfar {

enum class SeriesKind { functional, vector_covariate };

/// Shared evaluation grid: per-series sorted points on [0,1] plus the
/// quadrature weights that form the diagonal blocks of Q. Vector covariates
/// carry identity weights (no integration over a continuum).
struct EvaluationGrid {
  std::vector<Vector> points;
  std::vector<SeriesKind> kinds;
  std::vector<Vector> weights;
  std::vector<Eigen::Index> offsets;

  Eigen::Index series_count() const { return static_cast<Eigen::Index>(points.size()); }
  Eigen::Index size(Eigen::Index n) const { return points[n].size(); }
  Eigen::Index offset(Eigen::Index n) const { return offsets[n]; }
  Eigen::Index total() const { return offsets.back(); }

  Vector quadrature_diag() const {
    Vector d(total());
    for (Eigen::Index n = 0; n < series_count(); ++n) d.segment(offset(n), size(n)) = weights[n];
    return d;
  }
  Matrix quadrature() const { return quadrature_diag().asDiagonal(); }
};

inline EvaluationGrid make_grid(std::vector<Vector> points,
                                std::vector<SeriesKind> kinds = {}) {
  const auto k = points.size();
  require(k >= 1, ErrorCode::InvalidGrid, "make_grid", "no series");
  if (kinds.empty()) kinds.assign(k, SeriesKind::functional);
  require(kinds.size() == k, ErrorCode::ShapeError, "make_grid",
          "kinds length does not match series count");
  EvaluationGrid g;
  g.kinds = kinds;
  g.offsets.assign(1, 0);
  for (size_t n = 0; n < k; ++n) {
    const Vector& p = points[n];
    require(p.size() >= 3, ErrorCode::GridTooSmall, "make_grid",
            "series " + std::to_string(n) + " has fewer than 3 grid points");
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      require(std::isfinite(p[i]) && p[i] >= 0.0 && p[i] <= 1.0, ErrorCode::InvalidGrid,
              "make_grid", "grid point outside [0,1] in series " + std::to_string(n));
      if (i > 0) {
        require(p[i] > p[i - 1], ErrorCode::InvalidGrid, "make_grid",
                "grid points not strictly increasing in series " + std::to_string(n));
      }
    }
    g.weights.push_back(kinds[n] == SeriesKind::functional ? trapezoid_weights(p)
                                                           : Vector::Ones(p.size()));
    g.offsets.push_back(g.offsets.back() + p.size());
    g.points.push_back(p);
  }
  return g;
}

inline EvaluationGrid uniform_grid(Eigen::Index series, Eigen::Index m) {
  std::vector<Vector> pts(series, Vector::LinSpaced(m, 0.0, 1.0));
  return make_grid(std::move(pts));
}

/// Row-selection view of one series' grid: row r of the dense form has a
/// single 1 in column `rows[r]`.
struct IncidenceMatrix {
  std::vector<Eigen::Index> rows;
  Eigen::Index cols = 0;

  Eigen::Index count() const { return static_cast<Eigen::Index>(rows.size()); }

  Matrix dense() const {
    Matrix z = Matrix::Zero(count(), cols);
    for (Eigen::Index r = 0; r < count(); ++r) z(r, rows[r]) = 1.0;
    return z;
  }
  Vector select(const Vector& full) const {
    Vector out(count());
    for (Eigen::Index r = 0; r < count(); ++r) out[r] = full[rows[r]];
    return out;
  }
  Matrix select_rows(const Matrix& full) const {
    Matrix out(count(), full.cols());
    for (Eigen::Index r = 0; r < count(); ++r) out.row(r) = full.row(rows[r]);
    return out;
  }
  /// Z' v: scatter observed values back onto the grid (zeros elsewhere).
  Vector scatter(const Vector& obs) const {
    Vector out = Vector::Zero(cols);
    for (Eigen::Index r = 0; r < count(); ++r) out[rows[r]] += obs[r];
    return out;
  }
};

/// Maps observed evaluation points of one series onto grid indices.
/// Off-grid points are an error: callers must snap to the grid or densify it.
inline IncidenceMatrix incidence(const EvaluationGrid& g, Eigen::Index series,
                                 const Vector& observed, double tol = 1e-9) {
  require(series >= 0 && series < g.series_count(), ErrorCode::ShapeError, "incidence",
          "series index out of range");
  const Vector& p = g.points[series];
  IncidenceMatrix z;
  z.cols = p.size();
  z.rows.reserve(observed.size());
  for (Eigen::Index i = 0; i < observed.size(); ++i) {
    const double* begin = p.data();
    const double* end = p.data() + p.size();
    const double* it = std::lower_bound(begin, end, observed[i] - tol);
    if (it == end || std::abs(*it - observed[i]) > tol) {
      fail(ErrorCode::PointNotOnGrid, "incidence",
           "point " + std::to_string(observed[i]) + " of series " + std::to_string(series) +
               " is not on the grid; snap it or densify the grid");
    }
    z.rows.push_back(it - begin);
  }
  return z;
}

}  // namespace mfar
