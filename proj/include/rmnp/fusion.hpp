#pragma once

// Evidential gating over modalities and reliability-weighted product-of-experts
// fusion of the per-modality Gaussians into the joint latent posterior.

#include <string>
#include <string_view>
#include <vector>

#include "rmnp/anp.hpp"
#include "rmnp/encoders.hpp"
#include "rmnp/modality.hpp"
#include "rmnp/tape.hpp"

namespace rmnp::fusion {

enum class FusionMode {
  GpoeEvidential,  // belief masses from Dirichlet evidence weight each expert
  PoeUniform,      // every expert weight 1 (plain product of experts)
  GpoeMlp,         // softmax over the gate outputs, no evidence
};

inline std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::GpoeEvidential:
      return "gpoe_evidential";
    case FusionMode::PoeUniform:
      return "poe_uniform";
    case FusionMode::GpoeMlp:
      return "gpoe_mlp";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(std::string_view s) {
  for (auto m : {FusionMode::GpoeEvidential, FusionMode::PoeUniform, FusionMode::GpoeMlp}) {
    if (to_string(m) == s) {
      return m;
    }
  }
  throw ContractError("unknown fusion mode '" + std::string(s) + "'");
}

template <class T>
using GateParams = enc::MlpParams<T>;

inline GateParams<Matrix> init_gate(Eigen::Index d_h, Rng& rng, std::size_t n_modalities = kNumModalities) {
  const auto m = static_cast<Eigen::Index>(n_modalities);
  return enc::init_mlp({m * d_h, d_h, m}, rng);
}

// ---------------------------------------------------------------------------
// tape level

struct Opinion {
  ad::Var evidence;  // B x M, >= 0
  ad::Var alpha;     // evidence + 1
  ad::Var strength;  // B x 1
  ad::Var belief;    // B x M
  ad::Var eta;       // B x 1
  ad::Var logits;    // raw gate outputs, B x M
};

/// alpha = e + 1, S = sum alpha, b = e / S, eta = M / S.
inline Opinion opinion_from_evidence(const ad::Var& evidence) {
  Opinion o;
  o.evidence = evidence;
  o.alpha = evidence + 1.0;
  o.strength = ad::row_sum(o.alpha);
  o.belief = evidence / o.strength;
  o.eta = ad::reciprocal(o.strength) * static_cast<double>(evidence.cols());
  return o;
}

inline Opinion gate(const GateParams<ad::Var>& params, const std::vector<ad::Var>& reps) {
  ad::Var logits = enc::mlp_forward(params, ad::concat_cols(reps));
  Opinion o = opinion_from_evidence(ad::softplus(logits));
  o.logits = logits;
  return o;
}

/// Per-modality expert weights used by the fusion for the given mode.
inline ad::Var expert_weights(const Opinion& o, FusionMode mode) {
  switch (mode) {
    case FusionMode::GpoeEvidential:
      return o.belief;
    case FusionMode::GpoeMlp:
      return ad::softmax_rows(o.logits);
    case FusionMode::PoeUniform:
      break;
  }
  return o.belief.tape->constant(Matrix::Ones(o.belief.rows(), o.belief.cols()));
}

/// Precision-weighted fusion: each modality contributes weight b_m on its
/// likelihood precision 1/s_m and 1/M on its prior precision 1/q_m.
inline anp::Gaussian gpoe_fuse(const std::vector<anp::Summary>& summaries, const std::vector<anp::Prior>& priors,
                               const ad::Var& weights) {
  const std::size_t m_count = summaries.size();
  if (m_count == 0 || priors.size() != m_count || weights.cols() != static_cast<Eigen::Index>(m_count)) {
    throw ContractError("gpoe_fuse: one summary, prior and weight column per modality required");
  }
  const double prior_weight = 1.0 / static_cast<double>(m_count);
  ad::Var precision;
  ad::Var weighted_mean;
  for (std::size_t m = 0; m < m_count; ++m) {
    if (summaries[m].r.cols() != summaries.front().r.cols() || priors[m].u.cols() != summaries.front().r.cols()) {
      throw ContractError("gpoe_fuse: latent dimensions differ across modalities");
    }
    ad::Var b = ad::slice_cols(weights, static_cast<Eigen::Index>(m), 1);
    ad::Var lik_prec = b / summaries[m].s;
    ad::Var prior_prec = ad::reciprocal(priors[m].q) * prior_weight;
    ad::Var prec_m = lik_prec + prior_prec;
    ad::Var num_m = lik_prec * summaries[m].r + prior_prec * priors[m].u;
    precision = m == 0 ? prec_m : precision + prec_m;
    weighted_mean = m == 0 ? num_m : weighted_mean + num_m;
  }
  ad::Var var = ad::reciprocal(precision);
  return {var * weighted_mean, var};
}

// ---------------------------------------------------------------------------
// value level

struct EvidentialOpinion {
  Vector evidence;
  Vector alpha;
  double strength = 0.0;
  Vector belief;
  double eta = 0.0;
};

inline EvidentialOpinion opinion_from_evidence(const Vector& e) {
  for (Eigen::Index m = 0; m < e.size(); ++m) {
    if (!(e[m] >= 0.0)) {
      throw ContractError("opinion_from_evidence: evidence must be nonnegative");
    }
  }
  ad::Tape tape;
  Opinion o = opinion_from_evidence(tape.constant(e.transpose()));
  return {e, o.alpha.value().row(0).transpose(), o.strength.scalar(), o.belief.value().row(0).transpose(),
          o.eta.scalar()};
}

/// Gate for a single account.
inline EvidentialOpinion gate(const Vector& h_meta, const Vector& h_text, const Vector& h_graph,
                              GateParams<Matrix>& params) {
  if (h_meta.size() != h_text.size() || h_meta.size() != h_graph.size()) {
    throw ContractError("gate: modality representations differ in width");
  }
  ad::Tape tape;
  auto bound = enc::bind_constant(tape, params);
  Opinion o = gate(bound, {tape.constant(h_meta.transpose()), tape.constant(h_text.transpose()),
                           tape.constant(h_graph.transpose())});
  EvidentialOpinion out;
  out.evidence = o.evidence.value().row(0).transpose();
  out.alpha = o.alpha.value().row(0).transpose();
  out.strength = o.strength.scalar();
  out.belief = o.belief.value().row(0).transpose();
  out.eta = o.eta.scalar();
  return out;
}

/// Any number of modalities (tests use 1, 2 and 3).
inline DiagGaussian gpoe_fuse(const std::vector<anp::UnimodalLatentSummary>& summaries,
                              const std::vector<anp::UnimodalPrior>& priors, const Vector& belief) {
  if (summaries.size() != priors.size() || belief.size() != static_cast<Eigen::Index>(summaries.size())) {
    throw ContractError("gpoe_fuse: one summary, prior and weight per modality required");
  }
  ad::Tape tape;
  std::vector<anp::Summary> ts;
  std::vector<anp::Prior> tp;
  for (std::size_t m = 0; m < summaries.size(); ++m) {
    ts.push_back({tape.constant(summaries[m].r.transpose()), tape.constant(summaries[m].s.transpose()), {}});
    tp.push_back({tape.constant(priors[m].u.transpose()), tape.constant(priors[m].q.transpose())});
  }
  auto g = gpoe_fuse(ts, tp, tape.constant(belief.transpose()));
  return DiagGaussian(g.mean.value().row(0).transpose(), g.variance.value().row(0).transpose());
}

/// Plain product of experts: every weight 1.
inline DiagGaussian poe_fuse(const std::vector<anp::UnimodalLatentSummary>& summaries,
                             const std::vector<anp::UnimodalPrior>& priors) {
  return gpoe_fuse(summaries, priors, Vector::Ones(static_cast<Eigen::Index>(summaries.size())));
}

}  // namespace rmnp::fusion
