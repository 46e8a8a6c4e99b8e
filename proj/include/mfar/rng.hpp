#pragma once

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/expint.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "mfar/numeric.hpp"

namespace mfar {

/// Deterministic substream derivation (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// mt19937_64 wrapper with stateless transforms only: every variate consumes a
/// deterministic, platform-independent slice of the stream, and the full
/// engine state round-trips through text for checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0,1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller without a cached spare, so state is exactly the engine.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
    return z;
  }

  /// Marsaglia-Tsang gamma draw, parameterized by shape and rate.
  double gamma(double shape, double rate) {
    require(shape > 0.0 && rate > 0.0, ErrorCode::DegenerateInput, "Rng::gamma",
            "shape and rate must be positive");
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v / rate;
    }
  }

  /// Gamma(shape, rate) restricted to (lo, hi); hi may be +inf. Uses the
  /// inverse regularized incomplete gamma, switching to upper-tail
  /// coordinates when the window sits in the right tail. shape == 0 selects
  /// the x^-1 e^-rate*x density (needs lo > 0), inverted via E1.
  double truncated_gamma(double shape, double rate, double lo, double hi) {
    require(rate > 0.0 && lo >= 0.0 && hi > lo, ErrorCode::DegenerateInput,
            "Rng::truncated_gamma", "bad truncation window");
    const double u = uniform();
    if (shape <= 0.0) {
      require(lo > 0.0, ErrorCode::DegenerateInput, "Rng::truncated_gamma",
              "shape 0 needs lo > 0");
      const double e_lo = boost::math::expint(1, rate * lo);
      const double e_hi = std::isinf(hi) ? 0.0 : boost::math::expint(1, rate * hi);
      const double target = e_lo + u * (e_hi - e_lo);
      double a = std::log(lo), b = std::isinf(hi) ? std::log(lo) + 60.0 : std::log(hi);
      for (int it = 0; it < 200; ++it) {
        const double m = 0.5 * (a + b);
        (boost::math::expint(1, rate * std::exp(m)) > target ? a : b) = m;
      }
      return std::exp(0.5 * (a + b));
    }
    const double xlo = rate * lo;
    const double xhi = std::isinf(hi) ? std::numeric_limits<double>::infinity() : rate * hi;
    const double p_lo = boost::math::gamma_p(shape, xlo);
    if (p_lo < 0.5) {
      const double p_hi = std::isinf(xhi) ? 1.0 : boost::math::gamma_p(shape, xhi);
      double p = p_lo + u * (p_hi - p_lo);
      p = std::min(std::max(p, std::nextafter(0.0, 1.0)), std::nextafter(1.0, 0.0));
      return boost::math::gamma_p_inv(shape, p) / rate;
    }
    const double q_lo = boost::math::gamma_q(shape, xlo);
    const double q_hi = std::isinf(xhi) ? 0.0 : boost::math::gamma_q(shape, xhi);
    double q = q_lo + u * (q_hi - q_lo);
    q = std::min(std::max(q, std::nextafter(0.0, 1.0)), std::nextafter(1.0, 0.0));
    return boost::math::gamma_q_inv(shape, q) / rate;
  }

  /// Normal(mean, sd^2) restricted to (lo, hi), by inverse CDF; switches to
  /// upper-tail coordinates when the window sits in the right tail so deep
  /// truncations keep precision.
  double truncated_normal(double mean, double sd, double lo, double hi) {
    require(sd > 0.0 && hi > lo, ErrorCode::DegenerateInput, "Rng::truncated_normal",
            "bad truncation window");
    const boost::math::normal_distribution<double> std_normal;
    const double a = (lo - mean) / sd, b = (hi - mean) / sd;
    const double u = uniform();
    double z;
    if (a + b <= 0.0) {  // window mass concentrated on the lower side
      const double p_a = std::isinf(a) ? 0.0 : boost::math::cdf(std_normal, a);
      const double p_b = std::isinf(b) ? 1.0 : boost::math::cdf(std_normal, b);
      double p = p_a + u * (p_b - p_a);
      p = std::min(std::max(p, std::nextafter(0.0, 1.0)), std::nextafter(1.0, 0.0));
      z = boost::math::quantile(std_normal, p);
    } else {
      const double q_a = std::isinf(a) ? 1.0 : boost::math::cdf(boost::math::complement(std_normal, a));
      const double q_b = std::isinf(b) ? 0.0 : boost::math::cdf(boost::math::complement(std_normal, b));
      double q = q_a + u * (q_b - q_a);
      q = std::min(std::max(q, std::nextafter(0.0, 1.0)), std::nextafter(1.0, 0.0));
      z = -boost::math::quantile(std_normal, q);
    }
    return mean + sd * std::min(std::max(z, a), b);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    is >> r.engine_;
    require(!is.fail(), ErrorCode::IoError, "Rng::deserialize", "bad engine state text");
    return r;
  }

  bool operator==(const Rng& o) const { return engine_ == o.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mfar
