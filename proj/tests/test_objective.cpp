#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "rmnp/objective.hpp"

using namespace rmnp;
using namespace rmnp::objective;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index k = 0;
  for (double x : xs) v[k++] = x;
  return v;
}

Matrix row2(double a, double b) {
  Matrix m(1, 2);
  m << a, b;
  return m;
}

DiagGaussian gauss(const Vector& var) { return DiagGaussian(Vector::Zero(var.size()), var); }

}  // namespace

TEST(InformationGain, ClosedForms) {
  EXPECT_NEAR(information_gain(gauss(vec({1.0, 2.0})), gauss(vec({1.0, 2.0}))), 0.0, 1e-15);
  EXPECT_NEAR(information_gain(gauss(vec({1.0})), gauss(vec({0.5}))), 0.34657359027997264, 1e-14);
  EXPECT_NEAR(information_gain(gauss(vec({3.0, 0.2, 7.0, 1.0})), gauss(vec({1.5, 0.1, 3.5, 0.5}))),
              4 * 0.5 * std::log(2.0), 1e-13);
  EXPECT_THROW(information_gain(gauss(vec({1.0})), gauss(vec({1.0, 1.0}))), ContractError);

  ad::Tape t;
  Matrix post(2, 2);
  post << 0.5, 1.0, 2.0, 2.0;
  Matrix g = objective::information_gain(t.constant(row2(1.0, 2.0)), t.constant(post)).value();
  EXPECT_NEAR(g(0, 0), 0.5 * (std::log(2.0) + std::log(2.0)), 1e-14);
  EXPECT_NEAR(g(1, 0), 0.5 * std::log(0.5), 1e-14);
}

TEST(ConfidenceWeights, Examples) {
  Vector rho = confidence_weights(Vector::Constant(3, 0.4), 20.0);
  for (int m = 0; m < 3; ++m) EXPECT_NEAR(rho[m], 1.0 / 3.0, 1e-15);
  const double tau = 20.0;
  rho = confidence_weights(vec({tau * std::log(2.0), 0.0, 0.0}), tau);
  EXPECT_NEAR(rho[0], 0.5, 1e-15);
  EXPECT_NEAR(rho[1], 0.25, 1e-15);
  EXPECT_NEAR(rho[2], 0.25, 1e-15);
  rho = confidence_weights(vec({5.0, -3.0, 0.7}), 1e9);
  for (int m = 0; m < 3; ++m) EXPECT_NEAR(rho[m], 1.0 / 3.0, 1e-8);
  EXPECT_THROW(confidence_weights(vec({1.0, 2.0, 3.0}), 0.0), ContractError);
  EXPECT_THROW(confidence_weights(vec({1.0, 2.0, 3.0}), -1.0), ContractError);
}

TEST(Ucd, Examples) {
  EXPECT_NEAR(ucd_loss(Vector::Constant(3, 1.0 / 3.0), DirichletParams{1.0, 1.0, 1.0}), 1.5, 1e-13);
  double prev = std::numeric_limits<double>::infinity();
  for (double a : {1.0, 3.0, 10.0, 100.0, 1e4, 1e6}) {
    const double l = ucd_loss(vec({0.0, 1.0, 0.0}), DirichletParams{2.0, a, 1.5});
    EXPECT_GT(l, 0.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-5);
  EXPECT_THROW(ucd_loss(vec({0.5, 0.5}), DirichletParams{1.0, 1.0, 1.0}), ContractError);
}

TEST(Ucd, MatchesMonteCarloMarginal) {
  Rng rng(23);
  for (int t = 0; t < 3; ++t) {
    Vector alpha(3);
    for (int m = 0; m < 3; ++m) alpha[m] = rng.uniform(1.0, 6.0);
    Vector rho = confidence_weights(rng.normal_matrix(3, 1).col(0) * 2.0, 1.0);
    auto mc = oracle::mc_dirichlet(alpha, 1000000, rng, [&](const Vector& beta) {
      return -(rho.array() * beta.array().log()).sum();
    });
    const double exact = ucd_loss(rho, DirichletParams(alpha));
    EXPECT_LT(std::abs(exact - mc.mean), 3.0 * mc.std_error) << "alpha=" << alpha.transpose();
  }
}

TEST(Ucd, Nonnegative) {
  Rng rng(12);
  for (int t = 0; t < 1000; ++t) {
    Vector alpha(3);
    for (int m = 0; m < 3; ++m) alpha[m] = 1.0 + std::exp(rng.uniform(-8.0, 8.0));
    Vector rho = confidence_weights(rng.normal_matrix(3, 1).col(0) * 5.0, 1.0);
    EXPECT_GE(ucd_loss(rho, DirichletParams(alpha)), 0.0);
  }
}

TEST(Decompose, Examples) {
  EXPECT_EQ(decompose_alpha(DirichletParams{2.0, 1.0, 1.0}, 0).alpha, vec({2.0, 1.0, 1.0}));
  EXPECT_EQ(decompose_alpha(DirichletParams{2.0, 3.0, 4.0}, 1).alpha, vec({1.0, 3.0, 1.0}));
  for (Eigen::Index m = 0; m < 3; ++m)
    EXPECT_EQ(decompose_alpha(DirichletParams{1.0, 1.0, 1.0}, m).alpha, Vector::Ones(3));
  EXPECT_THROW(decompose_alpha(DirichletParams{1.0, 1.0, 1.0}, 3), ContractError);
}

TEST(Ccr, Examples) {
  const Vector y = vec({1.0, 0.0});
  EXPECT_EQ(ccr_loss(DirichletParams{4.0, 2.0, 9.0}, {y, y, y}, y), 0.0);
  EXPECT_NEAR(ccr_loss(DirichletParams{1.0, 1.0, 1.0}, {vec({0.0, 1.0}), vec({0.3, 0.7}), y}, y), 0.0, 1e-14);
  const double expected = 2.0 * (std::log(3.0) - 5.0 / 6.0);
  EXPECT_NEAR(ccr_loss(DirichletParams{2.0, 1.0, 1.0}, {vec({0.0, 1.0}), y, y}, y), expected, 1e-12);
  EXPECT_THROW(ccr_loss(DirichletParams{2.0, 1.0, 1.0}, {vec({0.0, 1.0, 0.0}), y, y}, y), ContractError);
}

TEST(Ccr, NonnegativeAndPositiveOnlyWithConflictAndEvidence) {
  Rng rng(13);
  for (int t = 0; t < 500; ++t) {
    Vector alpha(3);
    std::vector<Vector> probs;
    for (int m = 0; m < 3; ++m) {
      alpha[m] = rng.uniform() < 0.3 ? 1.0 : 1.0 + rng.uniform(0.0, 20.0);
      const double p = rng.uniform() < 0.3 ? 1.0 : rng.uniform();
      probs.push_back(vec({p, 1.0 - p}));
    }
    const double l = ccr_loss(DirichletParams(alpha), probs, vec({1.0, 0.0}));
    EXPECT_GE(l, 0.0);
    bool active = false;
    for (int m = 0; m < 3; ++m) active = active || (alpha[m] > 1.0 && probs[static_cast<std::size_t>(m)][0] < 1.0);
    if (active)
      EXPECT_GT(l, 0.0);
    else
      EXPECT_EQ(l, 0.0);
  }
}

TEST(Ce, Examples) {
  const Matrix perfect = row2(1.0, 0.0);
  EXPECT_EQ(ce_loss(perfect, {perfect, perfect, perfect}, {0}), 0.0);
  const Matrix half = row2(0.5, 0.5);
  EXPECT_NEAR(ce_loss(half, {half, half, half}, {1}), 2.0 * std::log(2.0), 1e-15);
  EXPECT_NEAR(ce_loss(perfect, {half, perfect, perfect}, {0}), std::log(2.0) / 3.0, 1e-15);
  // clamped so a confident miss stays finite
  EXPECT_NEAR(ce_loss(perfect, {perfect, perfect, perfect}, {1}), -2.0 * std::log(1e-12), 1e-9);
  Matrix two(2, 2);
  two << 0.5, 0.5, 1.0, 0.0;
  EXPECT_NEAR(ce_loss(two, {two, two, two}, {0, 0}), std::log(2.0), 1e-15);
  EXPECT_THROW(ce_loss(two, {two, two, two}, {0}), ContractError);
}

TEST(Total, Decomposition) {
  const Vector ucd = vec({0.3, 1.1, 0.4});
  const Vector ccr = vec({0.0, 2.5, 0.1});
  auto b = total_loss(0.8, ucd, ccr, 0.2, 0.01, 20.0);
  EXPECT_NEAR(b.total, b.ce + b.lambda1 * b.ucd + b.lambda2 * b.ccr, 1e-12);
  EXPECT_NEAR(b.ucd, ucd.mean(), 1e-15);
  EXPECT_NEAR(b.ccr, ccr.mean(), 1e-15);
  EXPECT_EQ(total_loss(0.8, ucd, ccr, 0.0, 0.0, 20.0).total, 0.8);
  auto d = total_loss(0.8, ucd, ccr, 0.4, 0.01, 20.0);
  EXPECT_NEAR((d.total - d.ce - d.lambda2 * d.ccr), 2.0 * (b.total - b.ce - b.lambda2 * b.ccr), 1e-15);
  EXPECT_THROW(total_loss(0.8, ucd, ccr, -0.1, 0.0, 20.0), ContractError);
}

TEST(Gradients, ObjectiveTermsMatchFiniteDifferences) {
  Rng rng(14);
  const Eigen::Index batch = 3;
  Matrix alpha = (rng.normal_matrix(batch, 3).array().abs() * 3.0 + 1.0).matrix();
  Matrix prior = (rng.normal_matrix(1, 2).array().square() + 0.5).matrix();
  std::vector<Matrix> post, probs;
  for (int m = 0; m < 3; ++m) {
    post.push_back((rng.normal_matrix(batch, 2).array().square() * 0.3 + 0.05).matrix());
    Matrix p(batch, 2);
    for (Eigen::Index i = 0; i < batch; ++i) {
      const double a = rng.uniform(0.05, 0.95);
      p.row(i) << a, 1.0 - a;
    }
    probs.push_back(p);
  }
  Matrix onehot = Matrix::Zero(batch, 2);
  for (Eigen::Index i = 0; i < batch; ++i) onehot(i, i % 2) = 1.0;

  // inputs: alpha, prior variance, three posterior variances, three probability tables
  std::vector<Matrix> inputs{alpha, prior, post[0], post[1], post[2], probs[0], probs[1], probs[2]};
  auto loss = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
    std::vector<ad::Var> gains, uni;
    for (int m = 0; m < 3; ++m) {
      gains.push_back(objective::information_gain(v[1], v[2 + m]));
      uni.push_back(ad::softmax_rows(v[5 + m]));
    }
    ad::Var rho = objective::confidence_weights(ad::concat_cols(gains), 0.7);
    ad::Var oh = t.constant(onehot);
    ad::Var joint = ad::softmax_rows(v[5] + v[6]);
    auto terms = objective::total_loss(objective::ce_loss(joint, uni, oh), objective::ucd_loss(rho, v[0]),
                                       objective::ccr_loss(v[0], uni, oh), 0.3, 0.2, 0.7);
    return terms.total;
  };
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (auto& m : inputs) vars.push_back(tape.parameter(m));
  tape.backward(loss(tape, vars));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix g = tape.grad(vars[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto probe = inputs;
        probe[k].data()[i] += delta;
        ad::Tape t;
        std::vector<ad::Var> pv;
        for (auto& m : probe) pv.push_back(t.constant(m));
        return loss(t, pv).scalar();
      };
      const double fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
      EXPECT_LT(oracle::rel_err(g.data()[i], fd), 1e-5) << k << "/" << i;
    }
  }
}
