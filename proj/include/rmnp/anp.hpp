#pragma once

// Per-modality attentive neural process: a learnable context set queried by
// scaled dot-product attention, producing a target-specific Gaussian summary
// (r, s) and a context-level prior (u, q).

#include <cmath>
#include <string>
#include <vector>

#include "rmnp/encoders.hpp"
#include "rmnp/numerics.hpp"
#include "rmnp/tape.hpp"

namespace rmnp::anp {

inline constexpr double kPositivityFloor = 1e-6;

/// N_C x 2 one-hot labels, alternating classes so each class gets N_C / 2 rows.
inline Matrix class_balanced_labels(Eigen::Index n_context) {
  if (n_context < 2 || n_context % 2 != 0) {
    throw ContractError("context size must be a positive even number");
  }
  Matrix y = Matrix::Zero(n_context, 2);
  for (Eigen::Index k = 0; k < n_context; ++k) {
    y(k, k % 2) = 1.0;
  }
  return y;
}

/// Learnable context inputs plus the two heads that encode cat(C_X; C_Y).
/// The labels are fixed and rebuilt from keys.rows().
template <class T>
struct ContextParams {
  T keys;                        // C_X, N_C x d_s
  enc::MlpParams<T> mean_head;   // (d_s + 2) -> d_e
  enc::MlpParams<T> var_head;    // (d_s + 2) -> d_e, before the positivity map

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".keys", keys);
    mean_head.visit(prefix + ".mean_head", f);
    var_head.visit(prefix + ".var_head", f);
  }

  template <class U, class F>
  ContextParams<U> rebind(F&& f) {
    ContextParams<U> out;
    out.keys = f(keys);
    out.mean_head = mean_head.template rebind<U>(f);
    out.var_head = var_head.template rebind<U>(f);
    return out;
  }
};

inline ContextParams<Matrix> init_context(Eigen::Index n_context, Eigen::Index d_s, Eigen::Index d_e, Rng& rng) {
  (void)class_balanced_labels(n_context);
  ContextParams<Matrix> p;
  p.keys = rng.normal_matrix(n_context, d_s) / std::sqrt(static_cast<double>(d_s));
  p.mean_head = enc::init_mlp({d_s + 2, d_e, d_e}, rng);
  p.var_head = enc::init_mlp({d_s + 2, d_e, d_e}, rng);
  return p;
}

/// softplus(x) + floor
inline ad::Var positivity(const ad::Var& x) { return ad::softplus(x) + kPositivityFloor; }

// ---------------------------------------------------------------------------
// tape-level operations (rows = accounts)

struct ContextEncoding {
  ad::Var mean;      // R_ctx, N_C x d_e
  ad::Var variance;  // S_ctx, N_C x d_e, positive
};

inline ContextEncoding encode_context(const ContextParams<ad::Var>& ctx) {
  ad::Tape& tape = *ctx.keys.tape;
  ad::Var labels = tape.constant(class_balanced_labels(ctx.keys.rows()));
  ad::Var input = ad::concat_cols({ctx.keys, labels});
  return {enc::mlp_forward(ctx.mean_head, input), positivity(enc::mlp_forward(ctx.var_head, input))};
}

struct Summary {
  ad::Var r;  // B x d_e
  ad::Var s;  // B x d_e, positive
  ad::Var weights;  // B x N_C attention
};

/// One attention over the context keys shared by the mean and variance paths.
inline Summary cross_attend(const ad::Var& queries, const ad::Var& keys, const ContextEncoding& enc) {
  if (queries.cols() != keys.cols()) {
    throw ContractError("cross_attend: query width differs from context key width");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  ad::Var w = ad::softmax_rows(ad::matmul(queries, ad::transpose(keys)) * scale);
  return {ad::matmul(w, enc.mean), ad::matmul(w, enc.variance), w};
}

struct Prior {
  ad::Var u;  // 1 x d_e
  ad::Var q;  // 1 x d_e, positive
};

/// Column means of the encoded context rows.
inline Prior unimodal_prior(const ContextEncoding& enc) { return {ad::col_mean(enc.mean), ad::col_mean(enc.variance)}; }

struct Gaussian {
  ad::Var mean;      // B x d_e
  ad::Var variance;  // B x d_e
};

/// Conjugate combination of the likelihood N(r | z, s) with the prior N(u, q).
inline Gaussian unimodal_posterior(const Summary& s, const Prior& p) {
  ad::Var inv_s = ad::reciprocal(s.s);
  ad::Var inv_q = ad::reciprocal(p.q);
  ad::Var var = ad::reciprocal(inv_s + inv_q);
  ad::Var mean = var * (s.r * inv_s + p.u * inv_q);
  return {mean, var};
}

// ---------------------------------------------------------------------------
// value-level API

struct UnimodalLatentSummary {
  Vector r;
  Vector s;
};

struct UnimodalPrior {
  Vector u;
  Vector q;
};

struct EncodedContext {
  Matrix mean;
  Matrix variance;
};

inline EncodedContext encode_context(ContextParams<Matrix>& ctx) {
  ad::Tape tape;
  auto bound = enc::bind_constant(tape, ctx);
  auto e = encode_context(bound);
  return {e.mean.value(), e.variance.value()};
}

/// Attention weights of a single query over the context keys.
inline Vector attention_weights(const Vector& h, const Matrix& keys) {
  ad::Tape tape;
  auto e = ContextEncoding{tape.constant(Matrix::Zero(keys.rows(), 1)), tape.constant(Matrix::Ones(keys.rows(), 1))};
  auto s = cross_attend(tape.constant(h.transpose()), tape.constant(keys), e);
  return s.weights.value().row(0).transpose();
}

inline UnimodalLatentSummary cross_attend(const Vector& h, const Matrix& keys, const EncodedContext& ctx) {
  ad::Tape tape;
  ContextEncoding e{tape.constant(ctx.mean), tape.constant(ctx.variance)};
  auto s = cross_attend(tape.constant(h.transpose()), tape.constant(keys), e);
  return {s.r.value().row(0).transpose(), s.s.value().row(0).transpose()};
}

inline UnimodalPrior unimodal_prior(const EncodedContext& ctx) {
  if (ctx.mean.rows() == 0) {
    throw ContractError("unimodal_prior: empty context");
  }
  ad::Tape tape;
  auto p = unimodal_prior(ContextEncoding{tape.constant(ctx.mean), tape.constant(ctx.variance)});
  return {p.u.value().row(0).transpose(), p.q.value().row(0).transpose()};
}

inline DiagGaussian unimodal_posterior(const UnimodalLatentSummary& s, const UnimodalPrior& p) {
  if (s.r.size() != s.s.size() || s.r.size() != p.u.size() || p.u.size() != p.q.size()) {
    throw ContractError("unimodal_posterior: dimension mismatch");
  }
  ad::Tape tape;
  Summary ts{tape.constant(s.r.transpose()), tape.constant(s.s.transpose()), tape.constant(Matrix())};
  Prior tp{tape.constant(p.u.transpose()), tape.constant(p.q.transpose())};
  auto g = unimodal_posterior(ts, tp);
  return DiagGaussian(g.mean.value().row(0).transpose(), g.variance.value().row(0).transpose());
}

}  // namespace rmnp::anp
