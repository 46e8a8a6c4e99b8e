#include <catch2/catch_amalgamated.hpp>

#include "mfar/gibbs.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace mfar;

namespace {

// ---------------------------------------------------------------------------
// Independent joint-density oracles, written as literal sums of the model's
// factor densities. Variance-type coordinates are precision throughout so
// they match the coordinates the gamma conditionals are densities in.
// ---------------------------------------------------------------------------

Vector theta_of(const ParameterState& s) {
  Eigen::Index d = 0;
  for (const Matrix& c : s.kernel.coeff) d += c.size();
  Vector th(d);
  Eigen::Index o = 0;
  for (const Matrix& c : s.kernel.coeff) {
    th.segment(o, c.size()) = Eigen::Map<const Vector>(c.data(), c.size()) / s.kernel.scale;
    o += c.size();
  }
  return th;
}

ParameterState with_theta(const ParameterState& s, const ModelLayout& lay, const Vector& th) {
  ParameterState r = s;
  Eigen::Index o = 0;
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    const auto [n, m] = lay.free_blocks[b];
    const Eigen::Index d = lay.kernel_order(n) * lay.kernel_order(m);
    r.kernel.coeff[b] = s.kernel.scale *
                        Eigen::Map<const Matrix>(th.segment(o, d).data(), lay.kernel_order(n),
                                                 lay.kernel_order(m));
    o += d;
  }
  return r;
}

double obs_terms(const FunctionalSample& data, const ModelLayout& lay, const ParameterState& s) {
  const Vector mu = mean_curve(s, lay);
  double lp = 0.0;
  for (Eigen::Index t = 0; t < data.time_count(); ++t) {
    for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
      const ObsBlock& b = data.obs[t][n];
      for (Eigen::Index i = 0; i < b.count(); ++i) {
        const Eigen::Index row = lay.grid.offset(n) + b.indices[i];
        lp += normal_logpdf(b.values[i], mu[row] + s.latent_states(row, t), s.obs_variances[n]);
      }
    }
  }
  return lp;
}

double state_terms_marginal(const ModelLayout& lay, const ParameterState& s) {
  const Matrix k = kepsilon(s, lay);
  const auto llt = safe_llt(k, "oracle");
  const Matrix g = transition_matrix(s, lay);
  const Eigen::Index t_count = s.latent_states.cols();
  double lp = mvn_logpdf(s.latent_states.col(0), Vector::Zero(k.rows()), llt);
  for (Eigen::Index t = 1; t < t_count; ++t) {
    lp += mvn_logpdf(s.latent_states.col(t), g * s.latent_states.col(t - 1), llt);
  }
  return lp;
}

double state_terms_explicit(const ModelLayout& lay, const ParameterState& s) {
  const Matrix g = transition_matrix(s, lay);
  const Matrix phi = loading_curves(s, lay);
  const Eigen::Index t_count = s.latent_states.cols();
  Matrix eps = s.latent_states;
  eps.rightCols(t_count - 1) -= g * s.latent_states.leftCols(t_count - 1);
  const Matrix resid = eps - phi * s.innovation.factors;
  double lp = 0.0;
  for (Eigen::Index t = 0; t < t_count; ++t) {
    for (Eigen::Index r = 0; r < resid.rows(); ++r) {
      lp += normal_logpdf(resid(r, t), 0.0, s.innovation.approx_error_variance);
    }
    for (Eigen::Index j = 0; j < s.innovation.factors.rows(); ++j) {
      lp += normal_logpdf(s.innovation.factors(j, t), 0.0, s.innovation.factor_variances[j]);
    }
  }
  return lp;
}

double prior_terms(const ModelLayout& lay, const ParameterState& s, const Vector& theta_tilde) {
  double lp = 0.0;
  Eigen::Index o = 0;
  for (size_t b = 0; b < lay.free_blocks.size(); ++b) {
    const Matrix& om = lay.block_penalty[b];
    const Eigen::Index d = om.rows();
    const Vector th = theta_tilde.segment(o, d);
    const double logdet = logdet_from_llt(safe_llt(om, "oracle"));
    lp += 0.5 * (d * std::log(s.kernel.smoothing) + logdet - d * kLogTwoPi) -
          0.5 * s.kernel.smoothing * th.dot(om * th);
    o += d;
  }
  lp += normal_logpdf(s.kernel.scale, 0.0, kKernelScalePriorVar);
  lp += gamma_logpdf(s.kernel.smoothing, 0.5, 0.5);
  for (Eigen::Index n = 0; n < lay.grid.series_count(); ++n) {
    const Vector& th = s.mean_coeffs[n];
    lp += normal_logpdf(th[0], 0.0, 1e8) + normal_logpdf(th[1], 0.0, 1e8);
    const double lam = s.mean_smoothing[n];
    if (lam <= 1e-8) return kNegInf;
    for (Eigen::Index i = 2; i < th.size(); ++i) lp += normal_logpdf(th[i], 0.0, 1.0 / lam);
    lp += std::log(0.5e-4) - 1.5 * std::log(lam);
    lp += gamma_logpdf(1.0 / s.obs_variances[n], 1e-3, 1e-3);
  }
  const Eigen::Index jeps = s.innovation.factor_variances.size();
  for (Eigen::Index j = 0; j + 1 < jeps; ++j) {
    const double xj = 1.0 / s.innovation.factor_variances[j];
    const double xn = 1.0 / s.innovation.factor_variances[j + 1];
    if (!(xj < xn)) return kNegInf;
    lp -= std::log(xn);
  }
  lp += gamma_logpdf(1.0 / s.innovation.factor_variances[jeps - 1], 1e-3, 1e-3);
  lp += gamma_logpdf(1.0 / s.innovation.approx_error_variance, 1e-3, 1e-3);
  for (Eigen::Index j = 0; j < jeps; ++j) {
    for (Eigen::Index i = 0; i < lay.loading_dim(); ++i) {
      lp += normal_logpdf(s.innovation.loading_coeffs(i, j), 0.0,
                          1.0 / lay.loading_prior_precision[i]);
    }
  }
  return lp;
}

double joint_marginal(const FunctionalSample& data, const ModelLayout& lay,
                      const ParameterState& s, const Vector& theta_tilde) {
  const ParameterState sc = with_theta(s, lay, theta_tilde);
  return obs_terms(data, lay, sc) + state_terms_marginal(lay, sc) +
         prior_terms(lay, sc, theta_tilde);
}

double joint_explicit(const FunctionalSample& data, const ModelLayout& lay,
                      const ParameterState& s, const Vector& theta_tilde) {
  const ParameterState sc = with_theta(s, lay, theta_tilde);
  return obs_terms(data, lay, sc) + state_terms_explicit(lay, sc) +
         prior_terms(lay, sc, theta_tilde);
}

void require_close(double got, double want, double tol = 1e-6) {
  REQUIRE(std::isfinite(got));
  REQUIRE(std::isfinite(want));
  REQUIRE(std::abs(got - want) <= tol * std::max(1.0, std::abs(want)));
}

struct Harness {
  EvaluationGrid grid;
  ModelLayout lay;
  FunctionalSample data;
  ParameterState state;
  Vector theta;
  GibbsConfig gcfg;

  static Harness make(Hypothesis hyp, std::uint64_t seed) {
    Harness h{uniform_grid(2, 4), {}, {}, {}, {}, {}};
    ModelSpec spec;
    spec.hypothesis = hyp;
    LayoutConfig cfg;
    cfg.mean_order = 4;
    cfg.loading_order = 4;
    cfg.kernel_order = 4;
    cfg.factors = 2;
    h.gcfg.layout = cfg;
    h.lay = make_layout(h.grid, spec, cfg);
    Rng rng(seed);
    h.state = testing::random_state(h.lay, rng, 5);
    h.state.kernel.scale = 1.0 + 0.1 * rng.normal();
    h.state.kernel.smoothing = rng.uniform(0.5, 2.0);
    Matrix y(h.grid.total(), 5);
    const Vector mu = mean_curve(h.state, h.lay);
    for (Eigen::Index t = 0; t < 5; ++t) {
      y.col(t) = mu + h.state.latent_states.col(t) + 0.1 * rng.normal_vector(h.grid.total());
    }
    h.data = testing::dense_sample(h.grid, y);
    h.theta = theta_of(h.state);
    return h;
  }
};

}  // namespace

TEST_CASE("kernel coefficient conditional matches the collapsed joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 11);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  GaussianConditional cond = smp.cond_kernel(h.state);
  Rng rng(21);
  for (int rep = 0; rep < 3; ++rep) {
    const Vector a = h.theta + 0.3 * rng.normal_vector(h.theta.size());
    const Vector b = h.theta + 0.3 * rng.normal_vector(h.theta.size());
    const double dj = joint_marginal(h.data, h.lay, h.state, a) -
                      joint_marginal(h.data, h.lay, h.state, b);
    require_close(cond.logpdf(a) - cond.logpdf(b), dj);
  }
}

TEST_CASE("kernel scale conditional matches the collapsed joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 12);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  ScalarGaussianConditional cond = smp.cond_kernel_scale(h.state, h.theta);
  Rng rng(22);
  for (int rep = 0; rep < 3; ++rep) {
    ParameterState sa = h.state;
    sa.kernel.scale = 1.0 + 0.4 * rng.normal();
    ParameterState sb = h.state;
    sb.kernel.scale = 1.0 + 0.4 * rng.normal();
    const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                      joint_marginal(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(sa.kernel.scale) - cond.logpdf(sb.kernel.scale), dj);
  }
}

TEST_CASE("kernel smoothing conditional matches its prior terms") {
  auto h = Harness::make(Hypothesis::unrestricted, 13);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  GammaConditional cond = smp.cond_kernel_smoothing(h.theta);
  Rng rng(23);
  for (int rep = 0; rep < 3; ++rep) {
    ParameterState sa = h.state;
    sa.kernel.smoothing = rng.uniform(0.2, 4.0);
    ParameterState sb = h.state;
    sb.kernel.smoothing = rng.uniform(0.2, 4.0);
    const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                      joint_marginal(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(sa.kernel.smoothing) - cond.logpdf(sb.kernel.smoothing), dj);
  }
}

TEST_CASE("factor score conditional matches the explicit joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 14);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  Rng rng(24);
  for (Eigen::Index t : {Eigen::Index(0), Eigen::Index(2), Eigen::Index(4)}) {
    GaussianConditional cond = smp.cond_factor(h.state, t);
    ParameterState sa = h.state;
    sa.innovation.factors.col(t) += 0.5 * rng.normal_vector(2);
    ParameterState sb = h.state;
    sb.innovation.factors.col(t) += 0.5 * rng.normal_vector(2);
    const double dj = joint_explicit(h.data, h.lay, sa, h.theta) -
                      joint_explicit(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(sa.innovation.factors.col(t)) -
                      cond.logpdf(sb.innovation.factors.col(t)),
                  dj);
  }
}

TEST_CASE("factor precision conditionals match the ordered-chain joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 15);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  Rng rng(25);
  // bottom of the chain: support (0, x_next)
  {
    GammaConditional cond = smp.cond_factor_precision(h.state, 0);
    const double hi = 1.0 / h.state.innovation.factor_variances[1];
    for (int rep = 0; rep < 3; ++rep) {
      const double a = rng.uniform(0.1, 0.9) * hi;
      const double b = rng.uniform(0.1, 0.9) * hi;
      ParameterState sa = h.state;
      sa.innovation.factor_variances[0] = 1.0 / a;
      ParameterState sb = h.state;
      sb.innovation.factor_variances[0] = 1.0 / b;
      const double dj = joint_explicit(h.data, h.lay, sa, h.theta) -
                        joint_explicit(h.data, h.lay, sb, h.theta);
      require_close(cond.logpdf(a) - cond.logpdf(b), dj);
    }
  }
  // top of the chain: support (x_prev, inf) with the gamma hyperprior
  {
    GammaConditional cond = smp.cond_factor_precision(h.state, 1);
    const double lo = 1.0 / h.state.innovation.factor_variances[0];
    for (int rep = 0; rep < 3; ++rep) {
      const double a = lo * (1.0 + rng.uniform(0.1, 2.0));
      const double b = lo * (1.0 + rng.uniform(0.1, 2.0));
      ParameterState sa = h.state;
      sa.innovation.factor_variances[1] = 1.0 / a;
      ParameterState sb = h.state;
      sb.innovation.factor_variances[1] = 1.0 / b;
      const double dj = joint_explicit(h.data, h.lay, sa, h.theta) -
                        joint_explicit(h.data, h.lay, sb, h.theta);
      require_close(cond.logpdf(a) - cond.logpdf(b), dj);
    }
  }
}

TEST_CASE("middle factor precision uses the interior window") {
  // three factors so the middle conditional with both bounds is exercised
  auto grid = uniform_grid(2, 4);
  ModelSpec spec;
  LayoutConfig cfg;
  cfg.mean_order = 4;
  cfg.loading_order = 4;
  cfg.kernel_order = 4;
  cfg.factors = 3;
  ModelLayout lay = make_layout(grid, spec, cfg);
  Rng rng(16);
  ParameterState state = testing::random_state(lay, rng, 5);
  Matrix y(grid.total(), 5);
  const Vector mu = mean_curve(state, lay);
  for (Eigen::Index t = 0; t < 5; ++t) {
    y.col(t) = mu + state.latent_states.col(t) + 0.1 * rng.normal_vector(grid.total());
  }
  FunctionalSample data = testing::dense_sample(grid, y);
  const Vector theta = theta_of(state);
  GibbsConfig gcfg;
  gcfg.layout = cfg;
  Sampler smp(data, grid, spec, gcfg);
  GammaConditional cond = smp.cond_factor_precision(state, 1);
  const double lo = 1.0 / state.innovation.factor_variances[0];
  const double hi = 1.0 / state.innovation.factor_variances[2];
  REQUIRE(lo < hi);
  for (int rep = 0; rep < 3; ++rep) {
    const double a = lo + rng.uniform(0.1, 0.9) * (hi - lo);
    const double b = lo + rng.uniform(0.1, 0.9) * (hi - lo);
    ParameterState sa = state;
    sa.innovation.factor_variances[1] = 1.0 / a;
    ParameterState sb = state;
    sb.innovation.factor_variances[1] = 1.0 / b;
    const double dj =
        joint_explicit(data, lay, sa, theta) - joint_explicit(data, lay, sb, theta);
    require_close(cond.logpdf(a) - cond.logpdf(b), dj);
  }
}

TEST_CASE("approximation-error precision conditional matches the explicit joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 17);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  GammaConditional cond = smp.cond_approx_precision(h.state);
  Rng rng(27);
  for (int rep = 0; rep < 3; ++rep) {
    const double a = rng.uniform(0.5, 3.0) / h.state.innovation.approx_error_variance;
    const double b = rng.uniform(0.5, 3.0) / h.state.innovation.approx_error_variance;
    ParameterState sa = h.state;
    sa.innovation.approx_error_variance = 1.0 / a;
    ParameterState sb = h.state;
    sb.innovation.approx_error_variance = 1.0 / b;
    const double dj = joint_explicit(h.data, h.lay, sa, h.theta) -
                      joint_explicit(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(a) - cond.logpdf(b), dj);
  }
}

TEST_CASE("loading conditionals match the explicit joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 18);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  Rng rng(28);
  for (Eigen::Index j = 0; j < 2; ++j) {
    GaussianConditional cond = smp.cond_loading(h.state, j);
    ParameterState sa = h.state;
    sa.innovation.loading_coeffs.col(j) += 0.3 * rng.normal_vector(h.lay.loading_dim());
    ParameterState sb = h.state;
    sb.innovation.loading_coeffs.col(j) += 0.3 * rng.normal_vector(h.lay.loading_dim());
    const double dj = joint_explicit(h.data, h.lay, sa, h.theta) -
                      joint_explicit(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(sa.innovation.loading_coeffs.col(j)) -
                      cond.logpdf(sb.innovation.loading_coeffs.col(j)),
                  dj);
  }
}

TEST_CASE("observation precision conditionals match the joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 19);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  Rng rng(29);
  for (Eigen::Index n = 0; n < 2; ++n) {
    GammaConditional cond = smp.cond_obs_precision(h.state, n);
    for (int rep = 0; rep < 2; ++rep) {
      const double a = rng.uniform(0.5, 3.0) / h.state.obs_variances[n];
      const double b = rng.uniform(0.5, 3.0) / h.state.obs_variances[n];
      ParameterState sa = h.state;
      sa.obs_variances[n] = 1.0 / a;
      ParameterState sb = h.state;
      sb.obs_variances[n] = 1.0 / b;
      const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                        joint_marginal(h.data, h.lay, sb, h.theta);
      require_close(cond.logpdf(a) - cond.logpdf(b), dj);
    }
  }
}

TEST_CASE("mean coefficient conditional matches the joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 20);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  GaussianConditional cond = smp.cond_mean(h.state);
  Rng rng(30);
  auto set_means = [&](ParameterState& s, const Vector& all) {
    Eigen::Index o = 0;
    for (Eigen::Index n = 0; n < 2; ++n) {
      s.mean_coeffs[n] = all.segment(o, h.lay.mean_order(n));
      o += h.lay.mean_order(n);
    }
  };
  Vector base(h.lay.mean_dim());
  base << h.state.mean_coeffs[0], h.state.mean_coeffs[1];
  for (int rep = 0; rep < 3; ++rep) {
    const Vector a = base + 0.3 * rng.normal_vector(base.size());
    const Vector b = base + 0.3 * rng.normal_vector(base.size());
    ParameterState sa = h.state;
    set_means(sa, a);
    ParameterState sb = h.state;
    set_means(sb, b);
    const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                      joint_marginal(h.data, h.lay, sb, h.theta);
    require_close(cond.logpdf(a) - cond.logpdf(b), dj);
  }
}

TEST_CASE("mean smoothing conditional matches the joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 31);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  Rng rng(41);
  for (Eigen::Index n = 0; n < 2; ++n) {
    GammaConditional cond = smp.cond_mean_smoothing(h.state, n);
    for (int rep = 0; rep < 2; ++rep) {
      const double a = rng.uniform(0.1, 5.0);
      const double b = rng.uniform(0.1, 5.0);
      ParameterState sa = h.state;
      sa.mean_smoothing[n] = a;
      ParameterState sb = h.state;
      sb.mean_smoothing[n] = b;
      const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                        joint_marginal(h.data, h.lay, sb, h.theta);
      require_close(cond.logpdf(a) - cond.logpdf(b), dj);
    }
  }
}

TEST_CASE("latent state conditional from dense moments matches the joint") {
  auto h = Harness::make(Hypothesis::unrestricted, 32);
  const Dlm dlm = assemble_dlm(h.state, h.lay);
  Matrix cov;
  Vector mean;
  testing::dense_conditional_moments(dlm, h.data, h.grid, mean, cov);
  const auto llt = safe_llt(cov, "test");
  Rng rng(42);
  const Eigen::Index td = h.grid.total() * 5;
  auto stack = [&](const Matrix& a) {
    return Vector(Eigen::Map<const Vector>(a.data(), a.size()));
  };
  for (int rep = 0; rep < 3; ++rep) {
    ParameterState sa = h.state;
    sa.latent_states += 0.2 * Matrix::NullaryExpr(h.grid.total(), 5,
                                                  [&](Eigen::Index, Eigen::Index) {
                                                    return rng.normal();
                                                  });
    ParameterState sb = h.state;
    sb.latent_states += 0.2 * Matrix::NullaryExpr(h.grid.total(), 5,
                                                  [&](Eigen::Index, Eigen::Index) {
                                                    return rng.normal();
                                                  });
    const double da = mvn_logpdf(stack(sa.latent_states), mean, llt);
    const double db = mvn_logpdf(stack(sb.latent_states), mean, llt);
    const double dj = joint_marginal(h.data, h.lay, sa, h.theta) -
                      joint_marginal(h.data, h.lay, sb, h.theta);
    require_close(da - db, dj);
  }
  REQUIRE(td == mean.size());
}

TEST_CASE("log prior decomposes into conditional prior plus hyperpriors") {
  auto h = Harness::make(Hypothesis::unrestricted, 33);
  Sampler smp(h.data, h.grid, h.lay.spec, h.gcfg);
  const double lp = smp.log_prior(h.state);
  const double lpc = smp.log_prior_conditional(h.state);
  REQUIRE(std::isfinite(lp));
  REQUIRE(std::isfinite(lpc));
  double hyper = 0.0;
  for (Eigen::Index n = 0; n < 2; ++n) {
    hyper += std::log(0.5e-4) - 1.5 * std::log(h.state.mean_smoothing[n]);
  }
  hyper += normal_logpdf(h.state.kernel.scale, 0.0, kKernelScalePriorVar);
  hyper += gamma_logpdf(h.state.kernel.smoothing, 0.5, 0.5);
  // truncation to the stationarity region renormalizes by the region's mass
  REQUIRE(smp.log_region_mass() < 0.0);
  require_close(lp, lpc + hyper - smp.log_region_mass(), 1e-12);

  // outside the region the ordinate is -inf
  ParameterState far = h.state;
  far.kernel.coeff[0] *= 1e3;
  REQUIRE(smp.log_prior(far) == kNegInf);
}

TEST_CASE("deterministic initialization and bitwise chain reproducibility") {
  auto grid = uniform_grid(2, 5);
  Rng rng(55);
  ModelSpec spec;
  LayoutConfig lcfg;
  lcfg.factors = 2;
  ModelLayout lay = make_layout(grid, spec, lcfg);
  ParameterState truth = testing::random_state(lay, rng, 24);
  Matrix y(grid.total(), 24);
  const Vector mu = mean_curve(truth, lay);
  for (Eigen::Index t = 0; t < 24; ++t) {
    y.col(t) = mu + truth.latent_states.col(t) + 0.05 * rng.normal_vector(grid.total());
  }
  FunctionalSample data = testing::dense_sample(grid, y);

  GibbsConfig cfg;
  cfg.iterations = 40;
  cfg.seed = 99;
  cfg.layout = lcfg;
  Sampler smp(data, grid, spec, cfg);

  ParameterState i1 = smp.initialize();
  ParameterState i2 = smp.initialize();
  REQUIRE(theta_pack(i1, smp.layout()) == theta_pack(i2, smp.layout()));

  PosteriorSample p1 = smp.run_chain();
  PosteriorSample p2 = smp.run_chain();
  REQUIRE(p1.draws.size() == 20);
  REQUIRE(p1.draws.size() == p2.draws.size());
  for (size_t i = 0; i < p1.draws.size(); ++i) {
    REQUIRE(p1.draws[i].theta == p2.draws[i].theta);
    REQUIRE(p1.draws[i].loglik == p2.draws[i].loglik);
    REQUIRE(std::isfinite(p1.draws[i].loglik));
    REQUIRE(std::isfinite(p1.draws[i].log_prior));
    REQUIRE(p1.draws[i].theta.size() == evidence_dim(smp.layout()));
  }

  // split advancement reproduces the single-shot chain bitwise
  ChainState c = smp.start();
  smp.advance(c, 7);
  smp.advance(c, 13);
  smp.advance(c, 40);
  REQUIRE(c.completed == 40);
  PosteriorSample p3 = smp.finalize(std::move(c));
  REQUIRE(p3.draws.size() == p1.draws.size());
  for (size_t i = 0; i < p1.draws.size(); ++i) {
    REQUIRE(p1.draws[i].theta == p3.draws[i].theta);
    REQUIRE(p1.draws[i].alpha_last == p3.draws[i].alpha_last);
  }
}

TEST_CASE("restricted sweeps keep the cross block exactly zero") {
  auto grid = uniform_grid(2, 5);
  Rng rng(66);
  ModelSpec spec;
  spec.hypothesis = Hypothesis::restricted;
  LayoutConfig lcfg;
  lcfg.factors = 2;
  ModelLayout lay = make_layout(grid, spec, lcfg);
  ParameterState truth = testing::random_state(lay, rng, 30);
  Matrix y(grid.total(), 30);
  const Vector mu = mean_curve(truth, lay);
  for (Eigen::Index t = 0; t < 30; ++t) {
    y.col(t) = mu + truth.latent_states.col(t) + 0.05 * rng.normal_vector(grid.total());
  }
  FunctionalSample data = testing::dense_sample(grid, y);

  GibbsConfig cfg;
  cfg.iterations = 100;
  cfg.seed = 7;
  cfg.layout = lcfg;
  Sampler smp(data, grid, spec, cfg);
  ChainState c = smp.start();
  smp.advance(c, 100);
  const Matrix cross = kernel_surface(c.state.kernel, smp.layout(), 0, 1);
  REQUIRE(cross.isZero(0.0));
  const Matrix g = transition_matrix(c.state, smp.layout());
  REQUIRE(g.block(grid.offset(0), grid.offset(1), grid.size(0), grid.size(1)).isZero(0.0));
}

TEST_CASE("gamma conditional logpdf normalizes over truncated support") {
  // numeric integration oracle for the truncated density
  GammaConditional g;
  g.shape = 3.2;
  g.rate = 1.7;
  g.lo = 0.8;
  g.hi = 4.0;
  double acc = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = g.lo + (g.hi - g.lo) * (i + 0.5) / n;
    acc += std::exp(g.logpdf(x));
  }
  acc *= (g.hi - g.lo) / n;
  REQUIRE(std::abs(acc - 1.0) < 1e-6);

  GammaConditional edge;  // shape-zero chain edge: x^{-1} e^{-rate x}
  edge.shape = 0.0;
  edge.rate = 2.0;
  edge.lo = 0.5;
  edge.hi = 3.0;
  acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = edge.lo + (edge.hi - edge.lo) * (i + 0.5) / n;
    acc += std::exp(edge.logpdf(x));
  }
  acc *= (edge.hi - edge.lo) / n;
  REQUIRE(std::abs(acc - 1.0) < 1e-6);
}
