#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "oracles.hpp"
#include "rmnp/rmnp.hpp"

using namespace rmnp;
using namespace rmnp::pipeline;

namespace {

Hyperparams tiny_hp() {
  Hyperparams hp;
  hp.epochs = 2;
  hp.batch_size = 64;
  hp.hidden = 8;
  hp.n_context = 6;
  hp.n_z_samples = 3;
  hp.relation_dim = 4;
  hp.learning_rate = 5e-3;
  return hp;
}

data::Dataset tiny_data(std::uint64_t seed = 3, Eigen::Index n = 160) {
  data::SynthConfig c;
  c.n_accounts = n;
  c.d_text = 6;
  c.avg_degree = 3.0;
  c.seed = seed;
  return data::generate_synthetic(c).dataset;
}

RmnpModel tiny_model(const data::Dataset& ds, const Hyperparams& hp = tiny_hp(), Ablations ab = {}) {
  Rng rng(11);
  auto m = init_model(ModelConfig{hp, ab, ds.text.dim(), ds.graph.relation_names}, rng);
  m.norm = data::normalize_features(ds).second;
  return m;
}

ad::Index first(Eigen::Index n) {
  ad::Index idx;
  for (Eigen::Index i = 0; i < n; ++i) idx.push_back(i);
  return idx;
}

Vector softmax2(double a, double b) {
  const double m = std::max(a, b);
  Vector p(2);
  p << std::exp(a - m), std::exp(b - m);
  return p / p.sum();
}

// Mean logits of the decoder at a latent point, evaluated independently.
Vector decoder_mean_logits(RmnpModel& model, const Vector& z) {
  const auto& p = model.params.decoder;
  Eigen::RowVectorXd h = z.transpose() * p.weights[0] + p.biases[0];
  h = h.unaryExpr([](double x) { return x > 0.0 ? x : enc::kHiddenSlope * x; });
  Eigen::RowVectorXd out = h * p.weights[1] + p.biases[1];
  return out.head(2).transpose();
}

}  // namespace

TEST(Forward, OutputsOnSimplex) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng rng(1);
  auto r = forward(model, ds, first(ds.size()), rng);
  ASSERT_EQ(r.joint_probs.rows(), ds.size());
  auto check = [](const Matrix& p) {
    EXPECT_TRUE((p.array() >= 0.0).all());
    EXPECT_LT((p.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
  };
  check(r.joint_probs);
  for (const auto& u : r.unimodal_probs) check(u);
  EXPECT_LT((r.eta + r.belief.rowwise().sum() - Vector::Ones(ds.size())).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE((r.joint_variance.array() > 0.0).all());
}

TEST(Forward, RepeatedAccountGivesIdenticalLatents) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng rng(2);
  auto r = forward(model, ds, {5, 9, 5}, rng);
  // equal up to the last ulp: the blocked matrix product may vectorize a row
  // differently depending on where it sits in the batch
  auto same = [](const Matrix& m) { return m.row(0).isApprox(m.row(2), 1e-13); };
  EXPECT_TRUE(same(r.joint_mean));
  EXPECT_TRUE(same(r.joint_variance));
  EXPECT_TRUE(same(r.alpha));
  for (std::size_t m = 0; m < kNumModalities; ++m) EXPECT_TRUE(same(r.unimodal_mean[m]));
}

TEST(Forward, SeedDeterministic) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng a(3), b(3);
  auto x = forward(model, ds, first(40), a);
  auto y = forward(model, ds, first(40), b);
  EXPECT_EQ(x.joint_probs, y.joint_probs);
  for (std::size_t m = 0; m < kNumModalities; ++m) EXPECT_EQ(x.unimodal_probs[m], y.unimodal_probs[m]);
}

TEST(Forward, SchemaMismatch) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  data::SynthConfig c;
  c.n_accounts = 40;
  c.d_text = 5;
  auto other = data::generate_synthetic(c).dataset;
  Rng rng(1);
  EXPECT_THROW(forward(model, other, first(4), rng), ContractError);
  EXPECT_THROW(forward(model, ds, {ds.size()}, rng), ContractError);
}

TEST(Forward, PoeUniformReproducesProductOfExperts) {
  auto ds = tiny_data();
  Ablations ab;
  ab.poe_uniform = true;
  auto model = tiny_model(ds, tiny_hp(), ab);
  const Inputs in = prepare_inputs(model, ds);
  const ad::Index batch = first(25);
  ad::Tape tape;
  auto bound = enc::bind_constant(tape, model.params);
  Rng rng(4);
  Heads h = run_heads(bound, encode_reps(bound, tape, in, batch), model.config, rng);
  EXPECT_TRUE((h.weights.value().array() == 1.0).all());
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(batch.size()); ++i) {
    std::vector<anp::UnimodalLatentSummary> s;
    std::vector<anp::UnimodalPrior> q;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      s.push_back({h.summaries[m].r.value().row(i).transpose(), h.summaries[m].s.value().row(i).transpose()});
      q.push_back({h.priors[m].u.value().row(0).transpose(), h.priors[m].q.value().row(0).transpose()});
    }
    auto ref = fusion::poe_fuse(s, q);
    EXPECT_EQ(h.joint.mean.value().row(i).transpose(), ref.mean);
    EXPECT_EQ(h.joint.variance.value().row(i).transpose(), ref.variance);
  }
}

TEST(Predict, DeterministicCollapse) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  model.params.decoder.biases[1](0, 2) = -1e3;  // log-stds clamp at the floor
  model.params.decoder.biases[1](0, 3) = -1e3;
  model.params.decoder.weights[1].col(2).setZero();
  model.params.decoder.weights[1].col(3).setZero();
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    Vector mean = rng.normal_matrix(8, 1).col(0);
    DiagGaussian latent(mean, Vector::Constant(8, 1e-30));
    const Vector l = decoder_mean_logits(model, mean);
    const Vector expect = softmax2(l[0], l[1]);
    Vector p = predict(model, latent, 1, rng);
    EXPECT_LT((p - expect).cwiseAbs().maxCoeff(), 1e-6);
    model.config.hp.sample_logits = false;
    p = predict(model, latent, 1, rng);
    EXPECT_LT((p - expect).cwiseAbs().maxCoeff(), 1e-14);
    model.config.hp.sample_logits = true;
  }
  EXPECT_THROW(predict(model, DiagGaussian(Vector::Zero(8), Vector::Ones(8)), 0, rng), ContractError);
}

TEST(Predict, SymmetricDecoder) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  auto& w = model.params.decoder.weights[1];
  auto& b = model.params.decoder.biases[1];
  w.col(1) = w.col(0);
  b(0, 1) = b(0, 0);
  Rng rng(6);
  DiagGaussian latent(rng.normal_matrix(8, 1).col(0), Vector::Constant(8, 0.7));
  model.config.hp.sample_logits = false;
  Vector p = predict(model, latent, 50, rng);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  // with sampled logits each draw is asymmetric, the average is not
  model.config.hp.sample_logits = true;
  const int n = 100000;
  p = predict(model, latent, n, rng);
  EXPECT_LT(std::abs(p[0] - 0.5), 4.0 * 0.5 / std::sqrt(static_cast<double>(n)));
}

TEST(Predict, MonteCarloConverges) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng rng(7);
  DiagGaussian latent(rng.normal_matrix(8, 1).col(0), Vector::Constant(8, 0.5));
  // spread of a single-draw estimate
  double s = 0.0, s2 = 0.0;
  const int probes = 4000;
  for (int k = 0; k < probes; ++k) {
    const double v = predict(model, latent, 1, rng)[1];
    s += v;
    s2 += v * v;
  }
  const double sd = std::sqrt(std::max(0.0, s2 / probes - (s / probes) * (s / probes)));
  ASSERT_GT(sd, 0.0);
  const double small = predict(model, latent, 10, rng)[1];
  const double large = predict(model, latent, 100000, rng)[1];
  EXPECT_LT(std::abs(small - large), 3.0 * (sd / std::sqrt(10.0) + sd / std::sqrt(1e5)));
}

TEST(Metrics, PerfectPredictions) {
  Matrix p(4, 2);
  p << 1, 0, 0, 1, 0, 1, 1, 0;
  auto m = metrics::evaluate(p, {0, 1, 1, 0});
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.nll_x100, 0.0);
  EXPECT_EQ(m.brier, 0.0);
  EXPECT_EQ(m.ece, 0.0);
  EXPECT_EQ(m.mean_entropy, 0.0);
}

TEST(Metrics, UninformativePredictions) {
  Matrix p = Matrix::Constant(6, 2, 0.5);
  auto m = metrics::evaluate(p, {0, 1, 1, 0, 1, 1});
  EXPECT_NEAR(m.nll_x100, 69.31471805599453, 1e-12);
  EXPECT_NEAR(m.brier, 0.5, 1e-15);
  EXPECT_NEAR(m.mean_entropy, std::log(2.0), 1e-15);
}

TEST(Metrics, CalibratedEceAndHandF1) {
  // confidence 0.8 in every row, right on 8 of 10
  Matrix p(10, 2);
  std::vector<int> y;
  for (int i = 0; i < 10; ++i) {
    p.row(i) << 0.2, 0.8;
    y.push_back(i < 8 ? 1 : 0);
  }
  auto m = metrics::evaluate(p, y);
  EXPECT_NEAR(m.ece, 0.0, 1e-15);
  EXPECT_NEAR(m.accuracy, 0.8, 1e-15);
  // tp 8, fp 2, fn 0
  EXPECT_NEAR(m.f1, 16.0 / 18.0, 1e-15);
  EXPECT_NEAR(m.brier, 0.8 * 0.08 + 0.2 * 1.28, 1e-15);
}

TEST(Metrics, RejectsBadInput) {
  EXPECT_THROW(metrics::evaluate(Matrix(0, 2), {}), ContractError);
  EXPECT_THROW(metrics::evaluate(Matrix::Constant(1, 2, 0.6), {0}), ContractError);
  EXPECT_THROW(metrics::evaluate(Matrix::Constant(1, 2, 0.5), {2}), ContractError);
}

TEST(Metrics, EntropyBins) {
  Eigen::RowVectorXd half(2), sure(2);
  half << 0.5, 0.5;
  sure << 1.0, 0.0;
  EXPECT_NEAR(metrics::entropy(half), std::log(2.0), 1e-15);
  EXPECT_EQ(metrics::entropy(sure), 0.0);
  auto h = metrics::entropy_histogram({metrics::entropy(half), metrics::entropy(sure), 0.1});
  ASSERT_EQ(h.counts.size(), 30u);
  EXPECT_EQ(h.counts.back(), 1u);
  EXPECT_EQ(h.counts.front(), 1u);
  EXPECT_NEAR(h.edges.back(), std::log(2.0), 1e-15);
  std::ostringstream os;
  metrics::write_histogram_csv(os, h);
  EXPECT_EQ(os.str().substr(0, 25), "bin_left,bin_right,count\n");
}

TEST(Reports, EntropyReportAndTiming) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng rng(8);
  auto hs = entropy_report(model, {&ds, &ds}, rng, data::Split::Test);
  ASSERT_EQ(hs.size(), 2u);
  EXPECT_EQ(hs[0].n, ds.indices(data::Split::Test).size());
  auto all = entropy_report(model, {&ds}, rng);
  EXPECT_EQ(all[0].n, static_cast<std::size_t>(ds.size()));

  auto rows = timing_probe(model, ds, {16, 32}, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].n_t, 32);
  EXPECT_EQ(rows[0].samples.size(), 2u);
  EXPECT_GT(rows[0].median_s, 0.0);
  EXPECT_THROW(timing_probe(model, ds, {0}), ContractError);
  EXPECT_THROW(timing_probe(model, ds, {16}, 0), ContractError);
}

TEST(Reports, PerAccountCsv) {
  auto ds = tiny_data();
  auto model = tiny_model(ds);
  Rng rng(9);
  auto r = predict_split(model, ds, data::Split::Val, rng);
  ASSERT_TRUE(r.metrics.has_value());
  std::ostringstream os;
  write_per_account_csv(os, r);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "account,label,p_human,p_bot,p_bot_metadata,p_bot_text,p_bot_graph,b_metadata,b_text,b_graph,eta,entropy");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, r.accounts.size());
}

TEST(Ablations, Switches) {
  Ablations a;
  EXPECT_THROW(a.set("no_kl"), ContractError);
  a.set("no_ucd");
  a.set("no_ccr");
  ModelConfig cfg{tiny_hp(), a, 6, {}};
  EXPECT_EQ(cfg.lambda1(), 0.0);
  EXPECT_EQ(cfg.lambda2(), 0.0);
  a.set("mlp_gating");
  EXPECT_EQ(a.mode(), fusion::FusionMode::GpoeMlp);
  a.set("poe_uniform");
  EXPECT_THROW((void)a.mode(), ContractError);
}

TEST(Training, BaselineObjectiveIsCrossEntropyOnly) {
  auto ds = tiny_data();
  Ablations ab;
  ab.no_ucd = ab.no_ccr = ab.poe_uniform = true;
  auto model = tiny_model(ds, tiny_hp(), ab);
  const Inputs in = prepare_inputs(model, ds);
  Rng rng(10);
  auto le = compute_loss(model.params, model.config, in, ds.indices(data::Split::Train), rng, false);
  EXPECT_EQ(le.breakdown.total, le.breakdown.ce);
  EXPECT_GT(le.breakdown.ucd, 0.0);  // still reported, just not weighted
}

TEST(Training, GradientsMatchFiniteDifferences) {
  auto ds = tiny_data(3, 60);
  Hyperparams hp = tiny_hp();
  hp.hidden = 4;
  hp.n_context = 4;
  hp.relation_dim = 2;
  hp.lambda1 = 0.5;
  hp.lambda2 = 0.3;
  hp.tau = 2.0;
  auto model = tiny_model(ds, hp);
  const Inputs in = prepare_inputs(model, ds);
  const ad::Index batch = ds.indices(data::Split::Train);
  Rng r0(12);
  auto le = compute_loss(model.params, model.config, in, batch, r0, true);
  std::vector<Matrix*> ptrs;
  model.params.visit([&](const std::string&, Matrix& m) { ptrs.push_back(&m); });
  ASSERT_EQ(ptrs.size(), le.grads.size());
  Rng pick(13);
  int checked = 0;
  for (std::size_t k = 0; k < ptrs.size(); ++k) {
    for (int rep = 0; rep < 3; ++rep) {
      const auto i = static_cast<Eigen::Index>(pick.uniform_index(static_cast<std::uint64_t>(ptrs[k]->size())));
      auto eval = [&](double d) {
        const double keep = ptrs[k]->data()[i];
        ptrs[k]->data()[i] = keep + d;
        Rng r(12);
        const double v = compute_loss(model.params, model.config, in, batch, r, false).breakdown.total;
        ptrs[k]->data()[i] = keep;
        return v;
      };
      const double fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
      EXPECT_LT(oracle::rel_err(le.grads[k].data()[i], fd, 1e-5), 1e-4) << "tensor " << k << " coord " << i;
      ++checked;
    }
  }
  EXPECT_GT(checked, 30);
}

TEST(Training, BitIdenticalAcrossRuns) {
  auto ds = tiny_data();
  auto a = train(ds, tiny_hp(), {});
  auto b = train(ds, tiny_hp(), {});
  std::vector<Matrix> pa, pb;
  a.model.params.visit([&](const std::string&, Matrix& m) { pa.push_back(m); });
  b.model.params.visit([&](const std::string&, Matrix& m) { pb.push_back(m); });
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k], pb[k]);
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_EQ(a.log[1].total, b.log[1].total);
}

TEST(Training, NoSignalStaysAtChance) {
  data::SynthConfig c;
  c.n_accounts = 4000;  // ~600 validation accounts keep chance accuracy within a few points
  c.bot_fraction = 0.5;
  c.d_text = 6;
  c.class_separation = {0.0, 0.0, 0.0};
  c.edge_homophily = 0.5;
  c.avg_degree = 3.0;
  auto ds = data::generate_synthetic(c).dataset;
  Hyperparams hp = tiny_hp();
  hp.epochs = 20;
  hp.batch_size = 256;
  auto res = train(ds, hp, {});
  ASSERT_EQ(res.log.size(), 20u);
  const double acc = res.log.back().val_acc;
  EXPECT_GE(acc, 0.45);
  EXPECT_LE(acc, 0.55);
}

TEST(Training, EpochLogIsJsonLines) {
  auto ds = tiny_data();
  std::ostringstream os;
  TrainOptions opts;
  opts.log = &os;
  int seen = 0;
  opts.on_epoch = [&](const EpochLog&) { ++seen; };
  auto res = train(ds, tiny_hp(), {}, opts);
  EXPECT_EQ(seen, 2);
  std::istringstream is(os.str());
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "ce", "ucd", "ccr", "total", "val_acc", "val_nll_x100"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_NEAR(j["total"].get<double>(), res.log[static_cast<std::size_t>(rows)].total, 1e-12);
    ++rows;
  }
  EXPECT_EQ(rows, 2);
}

TEST(Training, Errors) {
  auto ds = tiny_data();
  auto no_train = ds;
  for (auto& s : no_train.split)
    if (s == data::Split::Train) s = data::Split::Test;
  EXPECT_THROW(train(no_train, tiny_hp(), {}), ContractError);
  Hyperparams bad = tiny_hp();
  bad.n_z_samples = 0;
  EXPECT_THROW(train(ds, bad, {}), ContractError);

  objective::LossBreakdown b;
  b.ucd = std::nan("");
  try {
    check_finite(b, 4);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("ucd"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTrip) {
  auto ds = tiny_data();
  auto res = train(ds, tiny_hp(), {});
  const auto dir = std::filesystem::temp_directory_path() / "rmnp_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.bin";
  save_checkpoint(res.model, path);
  RmnpModel back = load_checkpoint(path);
  EXPECT_EQ(back.config.hp.hidden, res.model.config.hp.hidden);
  EXPECT_EQ(back.config.relation_names, res.model.config.relation_names);
  ASSERT_TRUE(back.norm.has_value());
  EXPECT_EQ(back.norm->mean, res.model.norm->mean);
  Rng a(14), b(14);
  EXPECT_EQ(forward(res.model, ds, first(30), a).joint_probs, forward(back, ds, first(30), b).joint_probs);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XMNP", 4);
  }
  EXPECT_THROW(load_checkpoint(path), LoadError);
  save_checkpoint(res.model, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
  EXPECT_THROW(load_checkpoint(path), LoadError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), LoadError);
  std::filesystem::remove_all(dir);
}
