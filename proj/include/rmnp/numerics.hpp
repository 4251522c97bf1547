#pragma once

// Special functions, distribution primitives, a portable seeded generator and
// a central-difference gradient checker.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rmnp/errors.hpp"

namespace rmnp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace numerics {

namespace detail {
// Shift target for the asymptotic expansions; below it we use recurrences.
inline constexpr double kAsymptoticFloor = 10.0;
}  // namespace detail

/// ln Gamma(x) for x > 0. Thin checked wrapper over the libm routine, which is
/// exact at 1 and 2 (the hand-rolled series was off by ~1e-14 there, enough to
/// push a uniform-Dirichlet KL below zero).
inline double ln_gamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw std::domain_error("ln_gamma: argument must be positive and finite, got " + std::to_string(x));
  }
  return std::lgamma(x);  // positive x only, so the sign global is never touched
}

/// psi(x) = d/dx ln Gamma(x) for x > 0.
inline double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw std::domain_error("digamma: argument must be positive and finite, got " + std::to_string(x));
  }
  double acc = 0.0;
  while (x < detail::kAsymptoticFloor) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv2 = 1.0 / (x * x);
  // Bernoulli terms B_2k / (2k x^2k), k = 1..6
  const double tail =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  return acc + std::log(x) - 0.5 / x - tail;
}

/// psi'(x), needed for gradients through digamma.
inline double trigamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw std::domain_error("trigamma: argument must be positive and finite, got " + std::to_string(x));
  }
  double acc = 0.0;
  while (x < detail::kAsymptoticFloor) {
    acc += 1.0 / (x * x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double tail =
      inv * (1.0 + inv * (0.5 + inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))));
  return acc + tail;
}

inline double softplus(double x) {
  // log(1 + e^x) without overflow
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace numerics

/// Diagonal Gaussian given by per-dimension mean and variance.
struct DiagGaussian {
  Vector mean;
  Vector variance;

  DiagGaussian() = default;
  DiagGaussian(Vector m, Vector v) : mean(std::move(m)), variance(std::move(v)) { validate(); }

  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }

  void validate() const {
    if (mean.size() != variance.size()) {
      throw ContractError("DiagGaussian: mean and variance lengths differ");
    }
    for (Eigen::Index d = 0; d < variance.size(); ++d) {
      if (!(variance[d] > 0.0)) {
        throw ContractError("DiagGaussian: variance must be strictly positive");
      }
    }
  }
};

/// Dirichlet concentration vector; every entry >= 1 so evidence alpha - 1 is nonnegative.
struct DirichletParams {
  Vector alpha;

  DirichletParams() = default;
  explicit DirichletParams(Vector a) : alpha(std::move(a)) { validate(); }
  DirichletParams(std::initializer_list<double> a) : alpha(Eigen::Map<const Vector>(a.begin(), static_cast<Eigen::Index>(a.size()))) {
    validate();
  }

  [[nodiscard]] Eigen::Index size() const { return alpha.size(); }
  [[nodiscard]] double strength() const { return alpha.sum(); }

  void validate() const {
    for (Eigen::Index m = 0; m < alpha.size(); ++m) {
      if (!(alpha[m] >= 1.0) || !std::isfinite(alpha[m])) {
        throw ContractError("DirichletParams: every concentration must be >= 1");
      }
    }
  }
};

/// Reproducible pseudorandom stream. The engine is mt19937_64, whose output
/// sequence is fixed by the C++ standard; the distributions below are written
/// out by hand because the standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  static constexpr const char* algorithm() { return "mt19937_64"; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) {
      throw ContractError("Rng::uniform_index: empty range");
    }
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = 0;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0;
    double v = 0.0;
    double s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    // row-major fill order so the stream maps to (account, dim) predictably
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        out(r, c) = normal();
      }
    }
    return out;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derive an independent child stream; used to give each phase its own seed.
  Rng fork() { return Rng(next_u64()); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

namespace numerics {

/// Differential entropy of a diagonal Gaussian: 0.5 * sum ln(2 pi e var).
inline double gaussian_entropy(const DiagGaussian& g) {
  g.validate();
  const double c = std::log(2.0 * std::numbers::pi * std::numbers::e);
  double h = 0.0;
  for (Eigen::Index d = 0; d < g.variance.size(); ++d) {
    h += 0.5 * (c + std::log(g.variance[d]));
  }
  return h;
}

/// KL(Dir(p) || Dir(q)) in closed form.
inline double dirichlet_kl(const DirichletParams& p, const DirichletParams& q) {
  if (p.size() != q.size()) {
    throw ContractError("dirichlet_kl: concentration vectors differ in length");
  }
  const double sp = p.strength();
  const double sq = q.strength();
  const double psi_sp = digamma(sp);
  double kl = ln_gamma(sp) - ln_gamma(sq);
  for (Eigen::Index m = 0; m < p.size(); ++m) {
    kl += ln_gamma(q.alpha[m]) - ln_gamma(p.alpha[m]);
    kl += (p.alpha[m] - q.alpha[m]) * (digamma(p.alpha[m]) - psi_sp);
  }
  return kl;
}

/// E[ln beta_m] under Dir(alpha): psi(alpha_m) - psi(sum alpha).
inline Vector dirichlet_expected_log(const DirichletParams& a) {
  const double psi_s = digamma(a.strength());
  Vector out(a.size());
  for (Eigen::Index m = 0; m < a.size(); ++m) {
    out[m] = digamma(a.alpha[m]) - psi_s;
  }
  return out;
}

/// Reparameterized draw mean + sqrt(var) * eps.
inline Vector sample_gaussian(const DiagGaussian& g, Rng& rng) {
  g.validate();
  Vector out(g.dim());
  for (Eigen::Index d = 0; d < g.dim(); ++d) {
    out[d] = g.mean[d] + std::sqrt(g.variance[d]) * rng.normal();
  }
  return out;
}

struct FiniteDiffResult {
  Vector grad;
  bool ok = true;
  std::string message;
};

/// Central differences (f(theta + h e_d) - f(theta - h e_d)) / 2h. A
/// non-finite evaluation marks the result failed instead of throwing.
inline FiniteDiffResult finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& theta, double h) {
  FiniteDiffResult res;
  res.grad = Vector::Zero(theta.size());
  Vector probe = theta;
  for (Eigen::Index d = 0; d < theta.size(); ++d) {
    probe[d] = theta[d] + h;
    const double fp = f(probe);
    probe[d] = theta[d] - h;
    const double fm = f(probe);
    probe[d] = theta[d];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      res.ok = false;
      res.message = "non-finite function value at coordinate " + std::to_string(d);
      res.grad[d] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    res.grad[d] = (fp - fm) / (2.0 * h);
  }
  return res;
}

}  // namespace numerics
}  // namespace rmnp
