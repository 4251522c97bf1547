#pragma once

// Independent reference computations used only by the tests: brute-force
// grid normalization for the Gaussian fusion, Monte-Carlo Dirichlet
// expectations, and a tiny fixture builder.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "rmnp/numerics.hpp"

namespace oracle {

using rmnp::Rng;
using rmnp::Vector;

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
  double drift = 0.0;  // relative change of the normalizer between two resolutions
};

/// Normalize exp(log_density) on [lo, hi] with the trapezoid rule at n points
/// and return the mean and variance. Trapezoid converges geometrically for
/// smooth integrands that vanish at both ends.
inline Moments grid_moments(const std::function<double(double)>& log_density, double lo, double hi, int n) {
  std::vector<double> lp(static_cast<std::size_t>(n));
  double peak = -std::numeric_limits<double>::infinity();
  const double h = (hi - lo) / (n - 1);
  for (int k = 0; k < n; ++k) {
    lp[static_cast<std::size_t>(k)] = log_density(lo + h * k);
    peak = std::max(peak, lp[static_cast<std::size_t>(k)]);
  }
  double z0 = 0.0, z1 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double w = (k == 0 || k == n - 1) ? 0.5 : 1.0;
    const double p = w * std::exp(lp[static_cast<std::size_t>(k)] - peak);
    z0 += p;
    z1 += p * (lo + h * k);
  }
  Moments m;
  m.mean = z1 / z0;
  double z2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double w = (k == 0 || k == n - 1) ? 0.5 : 1.0;
    const double d = lo + h * k - m.mean;
    z2 += w * std::exp(lp[static_cast<std::size_t>(k)] - peak) * d * d;
  }
  m.variance = z2 / z0;
  return m;
}

/// Two-pass grid: a coarse sweep over a window that must contain the mass,
/// then a fine sweep over mean +- 12 sd. drift compares the fine normalizer
/// with one at half resolution.
inline Moments normalize_on_grid(const std::function<double(double)>& log_density, double lo, double hi,
                                 int n = 4001) {
  Moments coarse = grid_moments(log_density, lo, hi, 20001);
  const double sd = std::sqrt(coarse.variance);
  const double a = coarse.mean - 12.0 * sd;
  const double b = coarse.mean + 12.0 * sd;
  Moments fine = grid_moments(log_density, a, b, n);
  Moments half = grid_moments(log_density, a, b, (n + 1) / 2);
  fine.drift = std::max(std::abs(fine.mean - half.mean) / std::max(sd, 1e-300),
                        std::abs(fine.variance - half.variance) / fine.variance);
  return fine;
}

inline double log_normal(double x, double mean, double var) {
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * (x - mean) * (x - mean) / var;
}

struct Expert1d {
  double r, s, u, q;
};

/// prod_m N(z | u_m, q_m)^(1/M) N(r_m | z, s_m)^(b_m), normalized on a grid.
inline Moments fuse_reference_oracle(const std::vector<Expert1d>& experts, const std::vector<double>& b) {
  const double inv_m = 1.0 / static_cast<double>(experts.size());
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double widest = 0.0;
  for (const auto& e : experts) {
    lo = std::min({lo, e.r, e.u});
    hi = std::max({hi, e.r, e.u});
    widest = std::max(widest, std::sqrt(e.q * static_cast<double>(experts.size())));
  }
  auto logp = [&](double z) {
    double acc = 0.0;
    for (std::size_t m = 0; m < experts.size(); ++m) {
      acc += inv_m * log_normal(z, experts[m].u, experts[m].q) + b[m] * log_normal(experts[m].r, z, experts[m].s);
    }
    return acc;
  };
  Moments out = normalize_on_grid(logp, lo - 12.0 * widest, hi + 12.0 * widest);
  if (out.drift > 1e-6) {
    throw std::runtime_error("fuse_reference_oracle: grid too coarse");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dirichlet sampling for Monte-Carlo checks

/// Gamma(shape, 1) via Marsaglia and Tsang; shape < 1 uses the power boost.
inline double sample_gamma(double shape, Rng& rng) {
  if (shape < 1.0) {
    const double u = rng.uniform();
    return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
      return d * v;
    }
  }
}

inline Vector sample_dirichlet(const Vector& alpha, Rng& rng) {
  Vector g(alpha.size());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    g[k] = sample_gamma(alpha[k], rng);
  }
  return g / g.sum();
}

inline double log_dirichlet_density(const Vector& p, const Vector& alpha) {
  double acc = std::lgamma(alpha.sum());
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    acc += -std::lgamma(alpha[k]) + (alpha[k] - 1.0) * std::log(p[k]);
  }
  return acc;
}

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Sample mean and its standard error of f(beta), beta ~ Dir(alpha).
inline McEstimate mc_dirichlet(const Vector& alpha, long n, Rng& rng, const std::function<double(const Vector&)>& f) {
  double sum = 0.0, sum_sq = 0.0;
  for (long i = 0; i < n; ++i) {
    const double v = f(sample_dirichlet(alpha, rng));
    sum += v;
    sum_sq += v * v;
  }
  const auto nd = static_cast<double>(n);
  const double mean = sum / nd;
  const double var = std::max(0.0, sum_sq / nd - mean * mean) * nd / (nd - 1.0);
  return {mean, std::sqrt(var / nd)};
}

/// Relative error with a small absolute floor so zero gradients compare cleanly.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
