#pragma once

// Modality encoders: a two-layer perceptron for metadata and pooled text, and
// a relation-aware graph attention network for the social graph.
//
// Parameter structs are templated on their leaf type: Matrix for stored
// weights, ad::Var once bound to a tape. rebind() maps one to the other and
// visit() walks the leaves in a fixed, checkpoint-stable order.

#include <cmath>
#include <string>
#include <vector>

#include "rmnp/dataset.hpp"
#include "rmnp/numerics.hpp"
#include "rmnp/tape.hpp"

namespace rmnp::enc {

inline constexpr double kHiddenSlope = 0.01;     // sigma in the perceptrons and node updates
inline constexpr double kAttentionSlope = 0.2;   // leaky rectifier on attention logits

/// Weights are stored (fan_in x fan_out) so a row batch maps as X W + b.
template <class T>
struct MlpParams {
  std::vector<T> weights;
  std::vector<T> biases;

  [[nodiscard]] std::size_t depth() const { return weights.size(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      f(prefix + ".w" + std::to_string(l), weights[l]);
      f(prefix + ".b" + std::to_string(l), biases[l]);
    }
  }

  template <class U, class F>
  MlpParams<U> rebind(F&& f) {
    MlpParams<U> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.weights.push_back(f(weights[l]));
      out.biases.push_back(f(biases[l]));
    }
    return out;
  }
};

/// Glorot-uniform matrix, bounds +-sqrt(6 / (fan_in + fan_out)).
inline Matrix glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (Eigen::Index r = 0; r < fan_in; ++r) {
    for (Eigen::Index c = 0; c < fan_out; ++c) {
      w(r, c) = rng.uniform(-bound, bound);
    }
  }
  return w;
}

/// dims = {in, hidden..., out}
inline MlpParams<Matrix> init_mlp(const std::vector<Eigen::Index>& dims, Rng& rng) {
  if (dims.size() < 2) {
    throw ContractError("init_mlp: need at least input and output widths");
  }
  MlpParams<Matrix> p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] < 1 || dims[l + 1] < 1) {
      throw ContractError("init_mlp: widths must be positive");
    }
    p.weights.push_back(glorot_uniform(dims[l], dims[l + 1], rng));
    p.biases.push_back(Matrix::Zero(1, dims[l + 1]));
  }
  return p;
}

/// Affine layers with the leaky rectifier between them and none after the last.
inline ad::Var mlp_forward(const MlpParams<ad::Var>& p, ad::Var x) {
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    if (x.cols() != p.weights[l].rows()) {
      throw ContractError("mlp_forward: input width " + std::to_string(x.cols()) + " does not match layer " +
                          std::to_string(l) + " fan-in " + std::to_string(p.weights[l].rows()));
    }
    x = ad::matmul(x, p.weights[l]) + p.biases[l];
    if (l + 1 < p.weights.size()) {
      x = ad::leaky_relu(x, kHiddenSlope);
    }
  }
  return x;
}

/// Bind stored parameters to a tape as constants (inference).
template <template <class> class P>
P<ad::Var> bind_constant(ad::Tape& tape, P<Matrix>& p) {
  return p.template rebind<ad::Var>([&](Matrix& m) { return tape.constant(m); });
}

template <template <class> class P>
Matrix run_constant(P<Matrix>& p, const Matrix& x, ad::Var (*fn)(const P<ad::Var>&, ad::Var)) {
  ad::Tape tape;
  auto bound = bind_constant(tape, p);
  return fn(bound, tape.constant(x)).value();
}

// ---------------------------------------------------------------------------
// metadata and text

inline Matrix encode_metadata(const Matrix& meta, MlpParams<Matrix>& params) {
  if (meta.cols() != data::kNumMetadata) {
    throw ContractError("encode_metadata: expected 13 metadata columns, got " + std::to_string(meta.cols()));
  }
  return run_constant<MlpParams>(params, meta, &mlp_forward);
}

inline Matrix encode_text(const data::TextEmbeddingTable& text, MlpParams<Matrix>& params) {
  if (params.weights.empty() || text.pooled.cols() != params.weights.front().rows()) {
    throw ContractError("encode_text: d_text does not match the text encoder");
  }
  return run_constant<MlpParams>(params, text.pooled, &mlp_forward);
}

// ---------------------------------------------------------------------------
// graph

/// Flattened edge list with the self relation appended last.
struct GraphIndex {
  Eigen::Index num_nodes = 0;
  std::size_t num_relations = 0;  // including self
  ad::Index src;
  ad::Index dst;
  ad::Index rel;

  [[nodiscard]] std::size_t num_edges() const { return src.size(); }
};

inline GraphIndex build_graph_index(const data::HeteroGraph& g) {
  GraphIndex gi;
  gi.num_nodes = g.num_nodes;
  gi.num_relations = g.num_relations() + 1;
  for (std::size_t r = 0; r < g.relations.size(); ++r) {
    for (const data::Edge& e : g.relations[r]) {
      if (e.src < 0 || e.dst < 0 || e.src >= g.num_nodes || e.dst >= g.num_nodes) {
        throw ContractError("encode_graph: dangling node index");
      }
      gi.src.push_back(e.src);
      gi.dst.push_back(e.dst);
      gi.rel.push_back(static_cast<Eigen::Index>(r));
    }
  }
  for (Eigen::Index i = 0; i < g.num_nodes; ++i) {
    gi.src.push_back(i);
    gi.dst.push_back(i);
    gi.rel.push_back(static_cast<Eigen::Index>(g.num_relations()));
  }
  return gi;
}

template <class T>
struct HgnLayer {
  T weight;          // d_in x d_out, shared node transform
  T relation_emb;    // (R + 1) x d_r
  T relation_proj;   // d_r x d_r
  T attention;       // (2 d_out + d_r) x 1: [target | source | relation]
  T residual;        // d_in x d_out

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".relation_emb", relation_emb);
    f(prefix + ".relation_proj", relation_proj);
    f(prefix + ".attention", attention);
    f(prefix + ".residual", residual);
  }

  template <class U, class F>
  HgnLayer<U> rebind(F&& f) {
    return HgnLayer<U>{f(weight), f(relation_emb), f(relation_proj), f(attention), f(residual)};
  }
};

template <class T>
struct HgnParams {
  // Optional input projection (empty when x0 already has the layer width).
  std::vector<T> input_proj;  // {weight, bias} or {}
  std::vector<HgnLayer<T>> layers;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    if (!input_proj.empty()) {
      f(prefix + ".input.w", input_proj[0]);
      f(prefix + ".input.b", input_proj[1]);
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].visit(prefix + ".layer" + std::to_string(l), f);
    }
  }

  template <class U, class F>
  HgnParams<U> rebind(F&& f) {
    HgnParams<U> out;
    for (auto& m : input_proj) {
      out.input_proj.push_back(f(m));
    }
    for (auto& l : layers) {
      out.layers.push_back(l.template rebind<U>(f));
    }
    return out;
  }
};

struct HgnDims {
  Eigen::Index input = 0;  // raw x0 width
  Eigen::Index hidden = 128;
  Eigen::Index relation_dim = 16;
  std::size_t num_relations = 1;  // excluding self
  std::size_t layers = 2;
  bool project_input = true;
};

inline HgnParams<Matrix> init_hgn(const HgnDims& dims, Rng& rng) {
  if (dims.layers < 1) {
    throw ContractError("init_hgn: need at least one layer");
  }
  HgnParams<Matrix> p;
  if (dims.project_input) {
    p.input_proj.push_back(glorot_uniform(dims.input, dims.hidden, rng));
    p.input_proj.push_back(Matrix::Zero(1, dims.hidden));
  }
  const auto r_total = static_cast<Eigen::Index>(dims.num_relations + 1);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const Eigen::Index d_in = (l == 0 && !dims.project_input) ? dims.input : dims.hidden;
    HgnLayer<Matrix> layer;
    layer.weight = glorot_uniform(d_in, dims.hidden, rng);
    layer.relation_emb = glorot_uniform(r_total, dims.relation_dim, rng);
    layer.relation_proj = glorot_uniform(dims.relation_dim, dims.relation_dim, rng);
    layer.attention = glorot_uniform(2 * dims.hidden + dims.relation_dim, 1, rng);
    layer.residual = glorot_uniform(d_in, dims.hidden, rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

/// Attention weights of one layer, one per edge of gi (target-normalized).
struct LayerTrace {
  Matrix attention;  // num_edges x 1
};

/// One attention layer: per-edge logits from [W h_i | W h_j | W_r r_ij],
/// leaky rectifier, softmax over each target's in-edges, weighted sum of
/// transformed sources plus a residual transform, then sigma.
inline ad::Var hgn_layer_forward(const HgnLayer<ad::Var>& p, const GraphIndex& gi, ad::Var h,
                                 LayerTrace* trace = nullptr) {
  const Eigen::Index n = gi.num_nodes;
  if (h.rows() != n || h.cols() != p.weight.rows()) {
    throw ContractError("encode_graph: node feature shape does not match layer input");
  }
  if (p.relation_emb.rows() != static_cast<Eigen::Index>(gi.num_relations)) {
    throw ContractError("encode_graph: relation count does not match parameters");
  }
  const Eigen::Index d = p.weight.cols();
  const Eigen::Index d_r = p.relation_proj.cols();
  ad::Var wh = ad::matmul(h, p.weight);
  ad::Var a_dst = ad::slice_rows(p.attention, 0, d);
  ad::Var a_src = ad::slice_rows(p.attention, d, d);
  ad::Var a_rel = ad::slice_rows(p.attention, 2 * d, d_r);
  ad::Var score_dst = ad::matmul(wh, a_dst);                                              // n x 1
  ad::Var score_src = ad::matmul(wh, a_src);                                              // n x 1
  ad::Var score_rel = ad::matmul(ad::matmul(p.relation_emb, p.relation_proj), a_rel);     // (R+1) x 1
  ad::Var logits = ad::gather_rows(score_dst, gi.dst) + ad::gather_rows(score_src, gi.src) +
                   ad::gather_rows(score_rel, gi.rel);
  ad::Var weights = ad::segment_softmax(ad::leaky_relu(logits, kAttentionSlope), gi.dst, n);
  if (trace != nullptr) {
    trace->attention = weights.value();
  }
  ad::Var messages = ad::gather_rows(wh, gi.src) * weights;  // broadcast over columns
  ad::Var aggregated = ad::scatter_add_rows(messages, gi.dst, n);
  return ad::leaky_relu(aggregated + ad::matmul(h, p.residual), kHiddenSlope);
}

inline ad::Var hgn_forward(const HgnParams<ad::Var>& p, const GraphIndex& gi, ad::Var x0,
                           std::vector<LayerTrace>* traces = nullptr) {
  ad::Var h = x0;
  if (!p.input_proj.empty()) {
    if (x0.cols() != p.input_proj[0].rows()) {
      throw ContractError("encode_graph: x0 width does not match the input projection");
    }
    h = ad::matmul(x0, p.input_proj[0]) + p.input_proj[1];
  }
  for (const auto& layer : p.layers) {
    LayerTrace t;
    h = hgn_layer_forward(layer, gi, h, traces ? &t : nullptr);
    if (traces) {
      traces->push_back(std::move(t));
    }
  }
  return h;
}

inline Matrix encode_graph(const data::HeteroGraph& g, const Matrix& x0, HgnParams<Matrix>& params,
                           std::vector<LayerTrace>* traces = nullptr) {
  const GraphIndex gi = build_graph_index(g);
  ad::Tape tape;
  auto bound = bind_constant(tape, params);
  return hgn_forward(bound, gi, tape.constant(x0), traces).value();
}

/// Graph input features: normalized metadata next to the pooled text embedding.
inline Matrix graph_input_features(const data::Dataset& ds) {
  Matrix x0(ds.size(), data::kNumMetadata + ds.text.dim());
  x0 << ds.accounts.features, ds.text.pooled;
  return x0;
}

}  // namespace rmnp::enc
