#pragma once

// Training objective: cross-entropy on joint and unimodal predictions,
// unimodal confidence distillation into the gate's Dirichlet, and
// conflict-weighted regularization of each modality's isolated concentration.

#include <cmath>
#include <numbers>
#include <vector>

#include "rmnp/anp.hpp"
#include "rmnp/numerics.hpp"
#include "rmnp/tape.hpp"

namespace rmnp::objective {

inline constexpr double kProbFloor = 1e-12;

struct LossBreakdown {
  double ce = 0.0;
  double ucd = 0.0;  // batch mean
  double ccr = 0.0;  // batch mean
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double tau = 1.0;
};

// ---------------------------------------------------------------------------
// tape level (rows = accounts)

/// H(prior) - H(posterior) = 0.5 sum_d ln(q_d / var_d), B x 1.
inline ad::Var information_gain(const ad::Var& prior_var, const ad::Var& post_var) {
  ad::Var log_q = ad::broadcast(ad::log(prior_var), post_var.rows(), post_var.cols());
  return ad::row_sum(log_q - ad::log(post_var)) * 0.5;
}

/// Temperature softmax across modalities, B x M.
inline ad::Var confidence_weights(const ad::Var& delta_h, double tau) {
  if (!(tau > 0.0)) {
    throw ContractError("confidence_weights: temperature must be positive");
  }
  return ad::softmax_rows(delta_h * (1.0 / tau));
}

/// sum_m rho_m (psi(S) - psi(alpha_m)), B x 1.
inline ad::Var ucd_loss(const ad::Var& rho, const ad::Var& alpha) {
  ad::Var psi_s = ad::digamma(ad::row_sum(alpha));
  return ad::row_sum(rho * (psi_s - ad::digamma(alpha)));
}

/// Keep alpha_m, set every other concentration to 1.
inline ad::Var decompose_alpha(const ad::Var& alpha, Eigen::Index m) {
  Matrix mask = Matrix::Zero(1, alpha.cols());
  mask(0, m) = 1.0;
  return (alpha - 1.0) * alpha.tape->constant(mask) + 1.0;
}

/// KL(Dir(alpha) || Dir(1)) per row, B x 1.
inline ad::Var kl_to_uniform(const ad::Var& alpha) {
  const auto k = static_cast<double>(alpha.cols());
  ad::Var s = ad::row_sum(alpha);
  ad::Var log_norm = ad::lgamma(s) - ad::row_sum(ad::lgamma(alpha)) - numerics::ln_gamma(k);
  ad::Var expected = ad::row_sum((alpha - 1.0) * (ad::digamma(alpha) - ad::digamma(s)));
  return log_norm + expected;
}

/// c_m = sum_k |y_k - p_k^m|, B x 1.
inline ad::Var conflict_weight(const ad::Var& probs, const ad::Var& onehot) {
  return ad::row_sum(ad::abs(onehot - probs));
}

/// sum_m c_m KL(Dir(decompose(alpha, m)) || Dir(1)), B x 1.
inline ad::Var ccr_loss(const ad::Var& alpha, const std::vector<ad::Var>& unimodal_probs, const ad::Var& onehot) {
  if (static_cast<Eigen::Index>(unimodal_probs.size()) != alpha.cols()) {
    throw ContractError("ccr_loss: one probability matrix per modality required");
  }
  ad::Var total;
  for (std::size_t m = 0; m < unimodal_probs.size(); ++m) {
    ad::Var term = conflict_weight(unimodal_probs[m], onehot) * kl_to_uniform(decompose_alpha(alpha, static_cast<Eigen::Index>(m)));
    total = m == 0 ? term : total + term;
  }
  return total;
}

/// Batch-mean negative log-likelihood of the labelled class.
inline ad::Var nll_mean(const ad::Var& probs, const ad::Var& onehot) {
  ad::Var p = ad::row_sum(ad::clamp(probs, kProbFloor, 1.0) * onehot);
  return -ad::mean(ad::log(p));
}

/// Joint cross-entropy plus the uniform average of the unimodal ones, 1 x 1.
inline ad::Var ce_loss(const ad::Var& joint, const std::vector<ad::Var>& unimodal, const ad::Var& onehot) {
  ad::Var loss = nll_mean(joint, onehot);
  if (unimodal.empty()) {
    return loss;
  }
  ad::Var uni;
  for (std::size_t m = 0; m < unimodal.size(); ++m) {
    ad::Var t = nll_mean(unimodal[m], onehot);
    uni = m == 0 ? t : uni + t;
  }
  return loss + uni * (1.0 / static_cast<double>(unimodal.size()));
}

struct LossTerms {
  ad::Var ce;       // 1 x 1
  ad::Var ucd;      // B x 1
  ad::Var ccr;      // B x 1
  ad::Var total;    // 1 x 1
  LossBreakdown breakdown;
};

/// total = ce + lambda1 mean(ucd) + lambda2 mean(ccr). A zero lambda still
/// reports the term but keeps it off the tape's total.
inline LossTerms total_loss(const ad::Var& ce, const ad::Var& ucd, const ad::Var& ccr, double lambda1, double lambda2,
                            double tau) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw ContractError("total_loss: lambda weights must be nonnegative");
  }
  LossTerms t{ce, ucd, ccr, ce, {}};
  ad::Var ucd_mean = ad::mean(ucd);
  ad::Var ccr_mean = ad::mean(ccr);
  if (lambda1 != 0.0) {
    t.total = t.total + ucd_mean * lambda1;
  }
  if (lambda2 != 0.0) {
    t.total = t.total + ccr_mean * lambda2;
  }
  t.breakdown = {ce.scalar(), ucd_mean.scalar(), ccr_mean.scalar(), t.total.scalar(), lambda1, lambda2, tau};
  return t;
}

// ---------------------------------------------------------------------------
// value level

inline double information_gain(const DiagGaussian& prior, const DiagGaussian& posterior) {
  if (prior.dim() != posterior.dim()) {
    throw ContractError("information_gain: dimension mismatch");
  }
  return numerics::gaussian_entropy(prior) - numerics::gaussian_entropy(posterior);
}

inline Vector confidence_weights(const Vector& delta_h, double tau) {
  ad::Tape tape;
  return confidence_weights(tape.constant(delta_h.transpose()), tau).value().row(0).transpose();
}

inline double ucd_loss(const Vector& rho, const DirichletParams& alpha) {
  if (rho.size() != alpha.size()) {
    throw ContractError("ucd_loss: rho and alpha differ in length");
  }
  ad::Tape tape;
  return ucd_loss(tape.constant(rho.transpose()), tape.constant(alpha.alpha.transpose())).scalar();
}

inline DirichletParams decompose_alpha(const DirichletParams& alpha, Eigen::Index m) {
  if (m < 0 || m >= alpha.size()) {
    throw ContractError("decompose_alpha: modality index out of range");
  }
  ad::Tape tape;
  return DirichletParams(decompose_alpha(tape.constant(alpha.alpha.transpose()), m).value().row(0).transpose());
}

/// unimodal_probs[m] is modality m's class distribution; y is one-hot.
inline double ccr_loss(const DirichletParams& alpha, const std::vector<Vector>& unimodal_probs, const Vector& y) {
  ad::Tape tape;
  std::vector<ad::Var> probs;
  for (const auto& p : unimodal_probs) {
    if (p.size() != y.size()) {
      throw ContractError("ccr_loss: probability vectors must match the label width");
    }
    probs.push_back(tape.constant(p.transpose()));
  }
  return ccr_loss(tape.constant(alpha.alpha.transpose()), probs, tape.constant(y.transpose())).scalar();
}

/// joint: N x 2; unimodal: one N x 2 per modality; labels in {0, 1}.
inline double ce_loss(const Matrix& joint, const std::vector<Matrix>& unimodal, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != joint.rows()) {
    throw ContractError("ce_loss: one label per row required");
  }
  Matrix onehot = Matrix::Zero(joint.rows(), joint.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  ad::Tape tape;
  std::vector<ad::Var> uni;
  for (const auto& u : unimodal) {
    uni.push_back(tape.constant(u));
  }
  return ce_loss(tape.constant(joint), uni, tape.constant(onehot)).scalar();
}

inline LossBreakdown total_loss(double ce, const Vector& ucd, const Vector& ccr, double lambda1, double lambda2,
                                double tau) {
  ad::Tape tape;
  return total_loss(tape.scalar(ce), tape.constant(ucd), tape.constant(ccr), lambda1, lambda2, tau).breakdown;
}

}  // namespace rmnp::objective
