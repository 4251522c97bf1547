#pragma once

// Model assembly, Monte-Carlo prediction, training and reporting.
//
// Row layout of the decoder batch: paths (joint, then one per modality) x
// latent draws x accounts, flattened as (p * K + k) * B + i so a single
// matmul serves every path.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rmnp/anp.hpp"
#include "rmnp/dataset.hpp"
#include "rmnp/encoders.hpp"
#include "rmnp/fusion.hpp"
#include "rmnp/metrics.hpp"
#include "rmnp/modality.hpp"
#include "rmnp/numerics.hpp"
#include "rmnp/objective.hpp"
#include "rmnp/tape.hpp"

namespace rmnp::pipeline {

inline constexpr double kLogStdMin = -15.0;
inline constexpr double kLogStdMax = 5.0;
inline constexpr std::size_t kPaths = kNumModalities + 1;  // joint first

struct Hyperparams {
  int epochs = 200;
  Eigen::Index batch_size = 1024;
  double learning_rate = 1e-3;
  double weight_decay = 3e-5;
  Eigen::Index hidden = 128;  // d_s = d_e = d_h
  int n_z_samples = 10;
  Eigen::Index n_context = 100;
  double lambda1 = 0.2;
  double lambda2 = 0.01;
  double tau = 20.0;
  std::size_t graph_layers = 2;
  Eigen::Index relation_dim = 16;
  std::uint64_t seed = 7;
  bool sample_logits = true;  // false: softmax of the decoder mean only

  void validate() const {
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0.0) || weight_decay < 0.0 || hidden < 1 ||
        n_z_samples < 1 || n_context < 2 || n_context % 2 != 0 || lambda1 < 0.0 || lambda2 < 0.0 || !(tau > 0.0) ||
        graph_layers < 1 || relation_dim < 1) {
      throw ContractError("Hyperparams: values out of range");
    }
  }
};

struct Ablations {
  bool no_ucd = false;
  bool no_ccr = false;
  bool mlp_gating = false;
  bool poe_uniform = false;

  void set(std::string_view name) {
    if (name == "no_ucd") {
      no_ucd = true;
    } else if (name == "no_ccr") {
      no_ccr = true;
    } else if (name == "mlp_gating") {
      mlp_gating = true;
    } else if (name == "poe_uniform") {
      poe_uniform = true;
    } else {
      throw ContractError("unknown ablation '" + std::string(name) + "'");
    }
  }

  [[nodiscard]] fusion::FusionMode mode() const {
    if (mlp_gating && poe_uniform) {
      throw ContractError("ablations mlp_gating and poe_uniform are mutually exclusive");
    }
    if (poe_uniform) {
      return fusion::FusionMode::PoeUniform;
    }
    return mlp_gating ? fusion::FusionMode::GpoeMlp : fusion::FusionMode::GpoeEvidential;
  }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (no_ucd) out.emplace_back("no_ucd");
    if (no_ccr) out.emplace_back("no_ccr");
    if (mlp_gating) out.emplace_back("mlp_gating");
    if (poe_uniform) out.emplace_back("poe_uniform");
    return out;
  }
};

/// Everything needed to rebuild the parameter shapes.
struct ModelConfig {
  Hyperparams hp;
  Ablations ablations;
  Eigen::Index d_text = 0;
  std::vector<std::string> relation_names;

  [[nodiscard]] double lambda1() const { return ablations.no_ucd ? 0.0 : hp.lambda1; }
  [[nodiscard]] double lambda2() const { return ablations.no_ccr ? 0.0 : hp.lambda2; }
};

template <class T>
struct ModelParams {
  enc::MlpParams<T> meta;
  enc::MlpParams<T> text;
  enc::HgnParams<T> graph;
  std::array<anp::ContextParams<T>, kNumModalities> context;
  fusion::GateParams<T> gate;
  enc::MlpParams<T> decoder;  // d_e -> d_h -> 4: two logit means, two log-stds

  template <class F>
  void visit(F&& f) {
    meta.visit("enc.metadata", f);
    text.visit("enc.text", f);
    graph.visit("enc.graph", f);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      context[m].visit("ctx." + std::string(to_string(static_cast<Modality>(m))), f);
    }
    gate.visit("gate", f);
    decoder.visit("decoder", f);
  }

  template <class U, class F>
  ModelParams<U> rebind(F&& f) {
    ModelParams<U> out;
    out.meta = meta.template rebind<U>(f);
    out.text = text.template rebind<U>(f);
    out.graph = graph.template rebind<U>(f);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      out.context[m] = context[m].template rebind<U>(f);
    }
    out.gate = gate.template rebind<U>(f);
    out.decoder = decoder.template rebind<U>(f);
    return out;
  }
};

struct RmnpModel {
  ModelConfig config;
  ModelParams<Matrix> params;
  std::optional<data::NormStats> norm;  // fitted on the training split

  [[nodiscard]] fusion::FusionMode mode() const { return config.ablations.mode(); }

  [[nodiscard]] std::size_t num_parameters() {
    std::size_t n = 0;
    params.visit([&](const std::string&, Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }
};

inline RmnpModel init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.hp.validate();
  (void)cfg.ablations.mode();
  if (cfg.d_text < 1) {
    throw ContractError("init_model: text embedding width must be positive");
  }
  const Eigen::Index d = cfg.hp.hidden;
  RmnpModel model;
  model.config = cfg;
  auto& p = model.params;
  p.meta = enc::init_mlp({data::kNumMetadata, d, d}, rng);
  p.text = enc::init_mlp({cfg.d_text, d, d}, rng);
  enc::HgnDims gd;
  gd.input = data::kNumMetadata + cfg.d_text;
  gd.hidden = d;
  gd.relation_dim = cfg.hp.relation_dim;
  gd.num_relations = cfg.relation_names.size();
  gd.layers = cfg.hp.graph_layers;
  p.graph = enc::init_hgn(gd, rng);
  for (auto& c : p.context) {
    c = anp::init_context(cfg.hp.n_context, d, d, rng);
  }
  p.gate = fusion::init_gate(d, rng);
  p.decoder = enc::init_mlp({d, d, 4}, rng);
  return model;
}

// ---------------------------------------------------------------------------
// inputs

/// Dataset tensors in the form the model consumes.
struct Inputs {
  Matrix meta;  // n x 13, normalized
  Matrix text;  // n x d_text
  Matrix x0;    // n x (13 + d_text)
  enc::GraphIndex graph;
  std::vector<int> labels;
};

inline void check_schema(const ModelConfig& cfg, const data::Dataset& ds) {
  if (ds.text.dim() != cfg.d_text) {
    throw ContractError("schema mismatch: text embedding width " + std::to_string(ds.text.dim()) +
                        ", model expects " + std::to_string(cfg.d_text));
  }
  if (ds.graph.relation_names != cfg.relation_names) {
    throw ContractError("schema mismatch: graph relations differ from the model's");
  }
  if (ds.accounts.features.cols() != data::kNumMetadata) {
    throw ContractError("schema mismatch: metadata column count");
  }
}

inline Inputs prepare_inputs(const RmnpModel& model, const data::Dataset& ds) {
  check_schema(model.config, ds);
  Inputs in;
  if (ds.accounts.normalized || !model.norm) {
    in.meta = ds.accounts.features;
  } else {
    data::Dataset copy;
    copy.accounts = ds.accounts;
    in.meta = data::apply_norm(std::move(copy), *model.norm).accounts.features;
  }
  in.text = ds.text.pooled;
  in.x0.resize(ds.size(), in.meta.cols() + in.text.cols());
  in.x0 << in.meta, in.text;
  in.graph = enc::build_graph_index(ds.graph);
  in.labels = ds.labels;
  return in;
}

inline Matrix gather(const Matrix& m, const ad::Index& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// tape-level forward

using Reps = std::array<ad::Var, kNumModalities>;

/// Modality representations for the batch rows. The graph encoder always runs
/// over every node.
inline Reps encode_reps(const ModelParams<ad::Var>& p, ad::Tape& tape, const Inputs& in, const ad::Index& batch) {
  Reps h;
  h[0] = enc::mlp_forward(p.meta, tape.constant(gather(in.meta, batch)));
  h[1] = enc::mlp_forward(p.text, tape.constant(gather(in.text, batch)));
  h[2] = ad::gather_rows(enc::hgn_forward(p.graph, in.graph, tape.constant(in.x0)), batch);
  return h;
}

/// Averaged class probabilities for each path, B x 2 each.
inline std::vector<ad::Var> decode_paths(const enc::MlpParams<ad::Var>& decoder, const std::vector<anp::Gaussian>& paths,
                                         int n_samples, bool sample_logits, Rng& rng) {
  if (paths.empty() || n_samples < 1) {
    throw ContractError("decode_paths: need at least one path and one sample");
  }
  ad::Tape& tape = *paths.front().mean.tape;
  const Eigen::Index b = paths.front().mean.rows();
  const Eigen::Index d = paths.front().mean.cols();
  const auto k_count = static_cast<Eigen::Index>(n_samples);
  const auto p_count = static_cast<Eigen::Index>(paths.size());
  std::vector<ad::Var> means;
  std::vector<ad::Var> stds;
  ad::Index target;
  target.reserve(static_cast<std::size_t>(p_count * k_count * b));
  for (Eigen::Index p = 0; p < p_count; ++p) {
    const auto& g = paths[static_cast<std::size_t>(p)];
    if (g.mean.rows() != b || g.mean.cols() != d) {
      throw ContractError("decode_paths: paths differ in shape");
    }
    ad::Var sd = ad::sqrt(g.variance);
    for (Eigen::Index k = 0; k < k_count; ++k) {
      means.push_back(g.mean);
      stds.push_back(sd);
      for (Eigen::Index i = 0; i < b; ++i) {
        target.push_back(p * b + i);
      }
    }
  }
  const Eigen::Index rows = p_count * k_count * b;
  ad::Var z = ad::concat_rows(means) + ad::concat_rows(stds) * tape.constant(rng.normal_matrix(rows, d));
  ad::Var out = enc::mlp_forward(decoder, z);
  ad::Var f = ad::slice_cols(out, 0, 2);
  Matrix eps = rng.normal_matrix(rows, 2);
  if (sample_logits) {
    ad::Var log_std = ad::clamp(ad::slice_cols(out, 2, 2), kLogStdMin, kLogStdMax);
    f = f + ad::exp(log_std) * tape.constant(eps);
  }
  ad::Var avg = ad::scatter_add_rows(ad::softmax_rows(f), target, p_count * b) * (1.0 / static_cast<double>(n_samples));
  std::vector<ad::Var> probs;
  for (Eigen::Index p = 0; p < p_count; ++p) {
    probs.push_back(ad::slice_rows(avg, p * b, b));
  }
  return probs;
}

struct Heads {
  std::array<anp::Summary, kNumModalities> summaries;
  std::array<anp::Prior, kNumModalities> priors;
  std::array<anp::Gaussian, kNumModalities> unimodal;
  fusion::Opinion opinion;
  ad::Var weights;  // expert weights used by the fusion
  anp::Gaussian joint;
  ad::Var joint_probs;
  std::array<ad::Var, kNumModalities> unimodal_probs;
};

/// Cross-attention, posteriors, gate, fusion and decoding for a batch.
inline Heads run_heads(const ModelParams<ad::Var>& p, const Reps& h, const ModelConfig& cfg, Rng& rng) {
  Heads out;
  std::vector<anp::Summary> sums;
  std::vector<anp::Prior> priors;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const anp::ContextEncoding ctx = anp::encode_context(p.context[m]);
    out.summaries[m] = anp::cross_attend(h[m], p.context[m].keys, ctx);
    out.priors[m] = anp::unimodal_prior(ctx);
    out.unimodal[m] = anp::unimodal_posterior(out.summaries[m], out.priors[m]);
    sums.push_back(out.summaries[m]);
    priors.push_back(out.priors[m]);
  }
  out.opinion = fusion::gate(p.gate, {h.begin(), h.end()});
  out.weights = fusion::expert_weights(out.opinion, cfg.ablations.mode());
  out.joint = fusion::gpoe_fuse(sums, priors, out.weights);
  std::vector<anp::Gaussian> paths{out.joint};
  paths.insert(paths.end(), out.unimodal.begin(), out.unimodal.end());
  auto probs = decode_paths(p.decoder, paths, cfg.hp.n_z_samples, cfg.hp.sample_logits, rng);
  out.joint_probs = probs[0];
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    out.unimodal_probs[m] = probs[m + 1];
  }
  return out;
}

inline Matrix one_hot(const std::vector<int>& labels, const ad::Index& batch) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(batch.size()), 2);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const int label = labels[static_cast<std::size_t>(batch[k])];
    if (label != data::kHuman && label != data::kBot) {
      throw ContractError("loss: unlabelled account in batch");
    }
    y(static_cast<Eigen::Index>(k), label) = 1.0;
  }
  return y;
}

/// Full objective on the batch's accounts.
inline objective::LossTerms batch_loss(const Heads& heads, const Matrix& onehot, const ModelConfig& cfg) {
  ad::Tape& tape = *heads.joint_probs.tape;
  ad::Var y = tape.constant(onehot);
  std::vector<ad::Var> uni(heads.unimodal_probs.begin(), heads.unimodal_probs.end());
  ad::Var ce = objective::ce_loss(heads.joint_probs, uni, y);
  std::vector<ad::Var> gains;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    gains.push_back(objective::information_gain(heads.priors[m].q, heads.unimodal[m].variance));
  }
  ad::Var rho = objective::confidence_weights(ad::concat_cols(gains), cfg.hp.tau);
  ad::Var ucd = objective::ucd_loss(rho, heads.opinion.alpha);
  ad::Var ccr = objective::ccr_loss(heads.opinion.alpha, uni, y);
  return objective::total_loss(ce, ucd, ccr, cfg.lambda1(), cfg.lambda2(), cfg.hp.tau);
}

struct LossEval {
  objective::LossBreakdown breakdown;
  std::vector<Matrix> grads;  // visit order; empty unless requested
};

/// Loss (and optionally gradients) for one batch at the given parameters.
inline LossEval compute_loss(ModelParams<Matrix>& params, const ModelConfig& cfg, const Inputs& in,
                             const ad::Index& batch, Rng& rng, bool with_grad) {
  ad::Tape tape;
  auto bound = params.template rebind<ad::Var>(
      [&](Matrix& m) { return with_grad ? tape.parameter(m) : tape.constant(m); });
  Heads heads = run_heads(bound, encode_reps(bound, tape, in, batch), cfg, rng);
  auto terms = batch_loss(heads, one_hot(in.labels, batch), cfg);
  LossEval out{terms.breakdown, {}};
  if (with_grad) {
    tape.backward(terms.total);
    bound.visit([&](const std::string&, ad::Var& v) { out.grads.push_back(tape.grad(v)); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// value-level forward

struct ForwardResult {
  DiagGaussian joint_first;  // first batch row, for quick inspection
  Matrix joint_mean;
  Matrix joint_variance;
  std::array<Matrix, kNumModalities> unimodal_mean;
  std::array<Matrix, kNumModalities> unimodal_variance;
  Matrix alpha;   // B x 3
  Matrix belief;  // B x 3
  Vector eta;
  Matrix weights;  // expert weights actually used
  Matrix joint_probs;
  std::array<Matrix, kNumModalities> unimodal_probs;
};

/// Modality representations for every account, computed once.
inline Reps encode_all(ModelParams<ad::Var>& bound, ad::Tape& tape, const Inputs& in) {
  ad::Index all(static_cast<std::size_t>(in.meta.rows()));
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i] = static_cast<Eigen::Index>(i);
  }
  return encode_reps(bound, tape, in, all);
}

inline ForwardResult collect(const Heads& h) {
  ForwardResult r;
  r.joint_mean = h.joint.mean.value();
  r.joint_variance = h.joint.variance.value();
  // a diverged model shows up here first during validation
  if (!r.joint_mean.allFinite() || !r.joint_variance.allFinite()) {
    throw NumericalError("non-finite joint posterior");
  }
  r.joint_first = DiagGaussian(r.joint_mean.row(0).transpose(), r.joint_variance.row(0).transpose());
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    r.unimodal_mean[m] = h.unimodal[m].mean.value();
    r.unimodal_variance[m] = h.unimodal[m].variance.value();
    r.unimodal_probs[m] = h.unimodal_probs[m].value();
  }
  r.alpha = h.opinion.alpha.value();
  r.belief = h.opinion.belief.value();
  r.eta = h.opinion.eta.value().col(0);
  r.weights = h.weights.value();
  r.joint_probs = h.joint_probs.value();
  return r;
}

/// Inference on a batch of accounts. Deterministic given rng.
inline ForwardResult forward(RmnpModel& model, const Inputs& in, const ad::Index& batch, Rng& rng) {
  if (batch.empty()) {
    throw ContractError("forward: empty batch");
  }
  for (Eigen::Index i : batch) {
    if (i < 0 || i >= in.meta.rows()) {
      throw ContractError("forward: account index out of range");
    }
  }
  ad::Tape tape;
  auto bound = enc::bind_constant(tape, model.params);
  return collect(run_heads(bound, encode_reps(bound, tape, in, batch), model.config, rng));
}

inline ForwardResult forward(RmnpModel& model, const data::Dataset& ds, const ad::Index& batch, Rng& rng) {
  return forward(model, prepare_inputs(model, ds), batch, rng);
}

/// Class probabilities from a single latent: n_samples draws of z, decoder
/// mean and log-std per draw, one draw of the logits each, softmax averaged.
inline Vector predict(RmnpModel& model, const DiagGaussian& latent, int n_samples, Rng& rng) {
  if (n_samples < 1) {
    throw ContractError("predict: need at least one sample");
  }
  if (latent.dim() != model.config.hp.hidden) {
    throw ContractError("predict: latent width does not match the decoder");
  }
  ad::Tape tape;
  auto dec = enc::bind_constant(tape, model.params.decoder);
  anp::Gaussian g{tape.constant(latent.mean.transpose()), tape.constant(latent.variance.transpose())};
  return decode_paths(dec, {g}, n_samples, model.config.hp.sample_logits, rng)[0].value().row(0).transpose();
}

// ---------------------------------------------------------------------------
// dataset-level prediction

struct PredictionReport {
  ad::Index accounts;
  Matrix joint;  // N x 2
  std::array<Matrix, kNumModalities> unimodal;
  Matrix belief;  // N x 3
  Vector eta;
  Vector entropy;
  std::vector<int> labels;
  std::optional<metrics::Metrics> metrics;  // when every account is labelled
};

/// Chunked inference over the given accounts; the graph encoder runs once.
inline PredictionReport predict_accounts(RmnpModel& model, const Inputs& in, const ad::Index& accounts, Rng& rng) {
  if (accounts.empty()) {
    throw ContractError("predict_accounts: no accounts");
  }
  const auto n = static_cast<Eigen::Index>(accounts.size());
  PredictionReport r;
  r.accounts = accounts;
  r.joint.resize(n, 2);
  for (auto& u : r.unimodal) {
    u.resize(n, 2);
  }
  r.belief.resize(n, kNumModalities);
  r.eta.resize(n);
  r.entropy.resize(n);
  Matrix reps_all[kNumModalities];
  {
    ad::Tape tape;
    auto bound = enc::bind_constant(tape, model.params);
    Reps h = encode_all(bound, tape, in);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      reps_all[m] = h[m].value();
    }
  }
  const Eigen::Index chunk = model.config.hp.batch_size;
  for (Eigen::Index start = 0; start < n; start += chunk) {
    const Eigen::Index len = std::min(chunk, n - start);
    ad::Index rows(accounts.begin() + start, accounts.begin() + start + len);
    ad::Tape tape;
    auto bound = enc::bind_constant(tape, model.params);
    Reps h;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      h[m] = tape.constant(gather(reps_all[m], rows));
    }
    ForwardResult f = collect(run_heads(bound, h, model.config, rng));
    r.joint.middleRows(start, len) = f.joint_probs;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      r.unimodal[m].middleRows(start, len) = f.unimodal_probs[m];
    }
    r.belief.middleRows(start, len) = f.belief;
    r.eta.segment(start, len) = f.eta;
  }
  bool labelled = true;
  for (Eigen::Index k = 0; k < n; ++k) {
    r.entropy[k] = metrics::entropy(r.joint.row(k));
    const int y = in.labels[static_cast<std::size_t>(accounts[static_cast<std::size_t>(k)])];
    r.labels.push_back(y);
    labelled = labelled && y != data::kUnlabeled;
  }
  if (labelled) {
    r.metrics = metrics::evaluate(r.joint, r.labels);
  }
  return r;
}

inline PredictionReport predict_split(RmnpModel& model, const data::Dataset& ds, data::Split split, Rng& rng) {
  return predict_accounts(model, prepare_inputs(model, ds), ds.indices(split), rng);
}

inline void write_per_account_csv(std::ostream& os, const PredictionReport& r) {
  using data::format_double;
  os << "account,label,p_human,p_bot,p_bot_metadata,p_bot_text,p_bot_graph,b_metadata,b_text,b_graph,eta,entropy\n";
  for (Eigen::Index k = 0; k < r.joint.rows(); ++k) {
    os << r.accounts[static_cast<std::size_t>(k)] << ',' << r.labels[static_cast<std::size_t>(k)] << ','
       << format_double(r.joint(k, 0)) << ',' << format_double(r.joint(k, 1));
    for (const auto& u : r.unimodal) {
      os << ',' << format_double(u(k, 1));
    }
    for (Eigen::Index m = 0; m < r.belief.cols(); ++m) {
      os << ',' << format_double(r.belief(k, m));
    }
    os << ',' << format_double(r.eta[k]) << ',' << format_double(r.entropy[k]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// training

struct EpochLog {
  int epoch = 0;
  double ce = 0.0;
  double ucd = 0.0;
  double ccr = 0.0;
  double total = 0.0;
  double val_acc = 0.0;
  double val_nll_x100 = 0.0;
};

inline void write_epoch_json(std::ostream& os, const EpochLog& e) {
  using data::format_double;
  os << "{\"epoch\":" << e.epoch << ",\"ce\":" << format_double(e.ce) << ",\"ucd\":" << format_double(e.ucd)
     << ",\"ccr\":" << format_double(e.ccr) << ",\"total\":" << format_double(e.total)
     << ",\"val_acc\":" << format_double(e.val_acc) << ",\"val_nll_x100\":" << format_double(e.val_nll_x100)
     << "}\n";
}

struct TrainOptions {
  std::ostream* log = nullptr;  // one JSON line per epoch
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  RmnpModel model;
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  void step(ModelParams<Matrix>& params, const std::vector<Matrix>& grads) {
    if (m_.empty()) {
      for (const auto& g : grads) {
        m_.push_back(Matrix::Zero(g.rows(), g.cols()));
        v_.push_back(Matrix::Zero(g.rows(), g.cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    std::size_t k = 0;
    params.visit([&](const std::string&, Matrix& p) {
      const Matrix& g = grads[k];
      m_[k] = kBeta1 * m_[k] + (1.0 - kBeta1) * g;
      v_[k] = kBeta2 * v_[k] + (1.0 - kBeta2) * g.cwiseProduct(g);
      p -= lr_ * wd_ * p;
      p.array() -= lr_ * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + kEps);
      ++k;
    });
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  double wd_;
  int t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

inline void check_finite(const objective::LossBreakdown& b, int epoch) {
  const char* bad = !std::isfinite(b.ce)    ? "ce"
                    : !std::isfinite(b.ucd) ? "ucd"
                    : !std::isfinite(b.ccr) ? "ccr"
                                            : nullptr;
  if (bad != nullptr) {
    throw NumericalError("non-finite " + std::string(bad) + " loss at epoch " + std::to_string(epoch));
  }
}

inline TrainResult train(const data::Dataset& dataset, const Hyperparams& hp, const Ablations& ablations,
                         const TrainOptions& opts = {}) {
  hp.validate();
  dataset.validate();
  ad::Index train_idx = dataset.indices(data::Split::Train);
  const ad::Index val_idx = dataset.indices(data::Split::Val);
  if (train_idx.empty()) {
    throw ContractError("train: empty train split");
  }
  if (val_idx.empty()) {
    throw ContractError("train: empty validation split");
  }
  ModelConfig cfg{hp, ablations, dataset.text.dim(), dataset.graph.relation_names};
  Rng root(hp.seed);
  Rng init_rng = root.fork();
  Rng shuffle_rng = root.fork();
  Rng sample_rng = root.fork();
  const std::uint64_t eval_seed = root.next_u64();

  TrainResult out;
  out.model = init_model(cfg, init_rng);
  RmnpModel& model = out.model;
  if (!dataset.accounts.normalized) {
    model.norm = data::normalize_features(dataset).second;
  }
  const Inputs in = prepare_inputs(model, dataset);
  AdamW opt(hp.learning_rate, hp.weight_decay);
  ModelParams<Matrix> best = model.params;
  double best_nll = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    EpochLog rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(train_idx.size(), start + static_cast<std::size_t>(hp.batch_size));
      ad::Index batch(train_idx.begin() + static_cast<std::ptrdiff_t>(start),
                      train_idx.begin() + static_cast<std::ptrdiff_t>(end));
      LossEval le = compute_loss(model.params, cfg, in, batch, sample_rng, true);
      check_finite(le.breakdown, epoch);
      opt.step(model.params, le.grads);
      const double w = static_cast<double>(batch.size()) / static_cast<double>(train_idx.size());
      rec.ce += w * le.breakdown.ce;
      rec.ucd += w * le.breakdown.ucd;
      rec.ccr += w * le.breakdown.ccr;
      rec.total += w * le.breakdown.total;
    }
    // same draws every epoch so validation NLL is comparable across epochs
    Rng eval_rng(eval_seed);
    PredictionReport val = predict_accounts(model, in, val_idx, eval_rng);
    rec.val_acc = val.metrics->accuracy;
    rec.val_nll_x100 = val.metrics->nll_x100;
    if (!std::isfinite(rec.val_nll_x100)) {
      throw NumericalError("non-finite validation NLL at epoch " + std::to_string(epoch));
    }
    if (rec.val_nll_x100 < best_nll) {
      best_nll = rec.val_nll_x100;
      best = model.params;
      out.best_epoch = epoch;
    }
    out.log.push_back(rec);
    if (opts.log != nullptr) {
      write_epoch_json(*opts.log, rec);
    }
    if (opts.on_epoch) {
      opts.on_epoch(rec);
    }
  }
  model.params = std::move(best);
  return out;
}

// ---------------------------------------------------------------------------
// reports

/// Predictive-entropy histograms, one per dataset, over the accounts of the
/// given split (Split::None means every account).
inline std::vector<metrics::EntropyHistogram> entropy_report(RmnpModel& model,
                                                             const std::vector<const data::Dataset*>& datasets,
                                                             Rng& rng, std::optional<data::Split> split = {}) {
  std::vector<metrics::EntropyHistogram> out;
  for (const data::Dataset* ds : datasets) {
    const Inputs in = prepare_inputs(model, *ds);
    ad::Index idx;
    if (split) {
      idx = ds->indices(*split);
    } else {
      for (Eigen::Index i = 0; i < ds->size(); ++i) {
        idx.push_back(i);
      }
    }
    PredictionReport r = predict_accounts(model, in, idx, rng);
    out.push_back(metrics::entropy_histogram({r.entropy.data(), r.entropy.data() + r.entropy.size()}));
  }
  return out;
}

struct TimingRow {
  Eigen::Index n_t = 0;
  double median_s = 0.0;
  double mean_s = 0.0;
  double std_s = 0.0;
  std::vector<double> samples;
};

/// Wall-clock of the per-batch work that scales with N_T (context attention,
/// fusion and decoding). Encoder outputs are precomputed; batches cycle over
/// the dataset's accounts when N_T exceeds its size.
inline std::vector<TimingRow> timing_probe(RmnpModel& model, const data::Dataset& ds,
                                           const std::vector<Eigen::Index>& batch_sizes, int repetitions = 5,
                                           std::uint64_t seed = 0) {
  if (repetitions < 1) {
    throw ContractError("timing_probe: need at least one repetition");
  }
  for (Eigen::Index nt : batch_sizes) {
    if (nt < 1) {
      throw ContractError("timing_probe: batch size must be positive");
    }
  }
  const Inputs in = prepare_inputs(model, ds);
  Matrix reps_all[kNumModalities];
  {
    ad::Tape tape;
    auto bound = enc::bind_constant(tape, model.params);
    Reps h = encode_all(bound, tape, in);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      reps_all[m] = h[m].value();
    }
  }
  Rng rng(seed);
  std::vector<TimingRow> rows;
  for (Eigen::Index nt : batch_sizes) {
    ad::Index idx(static_cast<std::size_t>(nt));
    for (Eigen::Index k = 0; k < nt; ++k) {
      idx[static_cast<std::size_t>(k)] = k % ds.size();
    }
    std::array<Matrix, kNumModalities> reps;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      reps[m] = gather(reps_all[m], idx);
    }
    TimingRow row;
    row.n_t = nt;
    for (int r = 0; r < repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      {
        ad::Tape tape;
        auto bound = enc::bind_constant(tape, model.params);
        Reps h;
        for (std::size_t m = 0; m < kNumModalities; ++m) {
          h[m] = tape.constant(reps[m]);
        }
        (void)run_heads(bound, h, model.config, rng);
      }
      const auto t1 = std::chrono::steady_clock::now();
      row.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::vector<double> sorted = row.samples;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    row.median_s = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (double s : row.samples) {
      row.mean_s += s / static_cast<double>(n);
    }
    for (double s : row.samples) {
      row.std_s += (s - row.mean_s) * (s - row.mean_s) / static_cast<double>(n);
    }
    row.std_s = std::sqrt(row.std_s);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_timing_csv(std::ostream& os, const std::vector<TimingRow>& rows) {
  os << "n_t,median_s,mean_s,std_s\n";
  for (const auto& r : rows) {
    os << r.n_t << ',' << data::format_double(r.median_s) << ',' << data::format_double(r.mean_s) << ','
       << data::format_double(r.std_s) << '\n';
  }
}

}  // namespace rmnp::pipeline
