// rmnp_cli: synth | train | eval | perturb | report

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "rmnp/rmnp.hpp"

namespace fs = std::filesystem;
using namespace rmnp;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ofstream open_file(const fs::path& p) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream os(p, std::ios::binary);
  if (!os) {
    throw UsageError(p.string() + ": cannot open for writing");
  }
  return os;
}

data::Split parse_split(const std::string& s) {
  static const std::map<std::string, data::Split> names{
      {"train", data::Split::Train}, {"val", data::Split::Val}, {"test", data::Split::Test}, {"all", data::Split::None}};
  auto it = names.find(s);
  if (it == names.end()) {
    throw UsageError("unknown split '" + s + "' (train, val, test, all)");
  }
  return it->second;
}

ad::Index split_indices(const data::Dataset& ds, data::Split s) {
  if (s != data::Split::None) {
    return ds.indices(s);
  }
  ad::Index all(static_cast<std::size_t>(ds.size()));
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i] = static_cast<Eigen::Index>(i);
  }
  return all;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  data::SynthConfig cfg;
  std::vector<double> sep{4.0, 4.0, 4.0};
  std::string camouflage_modality = "text";
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  data::SynthConfig cfg = a.cfg;
  std::copy(a.sep.begin(), a.sep.end(), cfg.class_separation.begin());
  cfg.camouflaged_modality = parse_modality(a.camouflage_modality);
  cfg.validate();
  auto res = data::generate_synthetic(cfg);
  data::save_dataset(res.dataset, a.out);

  const auto& ds = res.dataset;
  const auto bots = std::count(ds.labels.begin(), ds.labels.end(), data::kBot);
  std::cout << "accounts " << ds.size() << " (bots " << bots << ", humans " << ds.size() - bots << ")\n";
  std::cout << "splits train " << ds.indices(data::Split::Train).size() << " val "
            << ds.indices(data::Split::Val).size() << " test " << ds.indices(data::Split::Test).size() << '\n';
  for (std::size_t r = 0; r < ds.graph.num_relations(); ++r) {
    std::cout << "relation " << ds.graph.relation_names[r] << ": " << ds.graph.relations[r].size() << " edges\n";
  }
  if (cfg.camouflage_fraction > 0.0) {
    std::cout << "camouflaged bots (" << to_string(cfg.camouflaged_modality) << "): " << res.camouflaged.size() << '\n';
  }
  if (std::all_of(a.sep.begin(), a.sep.end(), [](double s) { return s == 0.0; })) {
    std::cout << "note: zero-signal configuration (class separation 0,0,0)";
    if (cfg.edge_homophily != 0.5) {
      std::cout << "; edge homophily " << cfg.edge_homophily << " still carries label signal";
    }
    std::cout << '\n';
  }
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  pipeline::Hyperparams hp;
  std::vector<std::string> ablate;
  bool mean_logits = false;
  std::string data;
  std::string out;
  std::string log;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  pipeline::Hyperparams hp = a.hp;
  hp.sample_logits = !a.mean_logits;
  pipeline::Ablations ab;
  for (const auto& name : a.ablate) {
    ab.set(name);
  }
  (void)ab.mode();  // rejects incompatible switches before any work
  hp.validate();
  const data::Dataset ds = data::load_dataset(a.data);

  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl") : fs::path(a.log);
  std::ofstream log = open_file(log_path);
  pipeline::TrainOptions opts;
  opts.log = &log;
  if (!a.quiet) {
    opts.on_epoch = [&](const pipeline::EpochLog& e) {
      std::cerr << "epoch " << e.epoch << " total " << e.total << " val_acc " << e.val_acc << " val_nll_x100 "
                << e.val_nll_x100 << '\n';
    };
  }
  auto res = pipeline::train(ds, hp, ab, opts);
  pipeline::save_checkpoint(res.model, a.out);

  // run record: resolved config plus where everything went
  nlohmann::ordered_json rec;
  rec["config"] = pipeline::config_to_json(res.model.config);
  rec["data"] = a.data;
  rec["checkpoint"] = a.out;
  rec["log"] = log_path.string();
  rec["best_epoch"] = res.best_epoch;
  open_file(a.out + ".run.json") << rec.dump(2) << '\n';
  std::cout << "best epoch " << res.best_epoch << ", checkpoint " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string out;
  std::string per_account;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  auto model = pipeline::load_checkpoint(a.model);
  const auto ds = data::load_dataset(a.data);
  const auto split = parse_split(a.split);
  Rng rng(a.seed);
  const auto in = pipeline::prepare_inputs(model, ds);
  const auto idx = split_indices(ds, split);
  if (idx.empty()) {
    throw UsageError("split '" + a.split + "' is empty");
  }
  auto report = pipeline::predict_accounts(model, in, idx, rng);
  if (!report.metrics) {
    throw UsageError("split '" + a.split + "' contains unlabelled accounts; metrics need labels");
  }
  std::ostringstream table;
  metrics::write_metrics_header(table);
  metrics::write_metrics_row(table, *report.metrics);
  if (a.out.empty()) {
    std::cout << table.str();
  } else {
    open_file(a.out) << table.str();
  }
  if (!a.per_account.empty()) {
    auto os = open_file(a.per_account);
    pipeline::write_per_account_csv(os, report);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct PerturbArgs {
  std::string data;
  double proportion = 0.0;
  std::uint64_t seed = 7;
  std::string out;
};

int cmd_perturb(const PerturbArgs& a) {
  auto ds = data::load_dataset(a.data);
  const bool any_label = std::any_of(ds.labels.begin(), ds.labels.end(), [](int y) { return y != data::kUnlabeled; });
  if (!any_label) {
    throw UsageError(a.data + ": no labels, camouflage edges need human and bot accounts");
  }
  const std::size_t before = ds.graph.num_edges();
  Rng rng(a.seed);
  ds.graph = data::inject_camouflage_edges(std::move(ds.graph), ds.labels, a.proportion, rng);
  data::save_dataset(ds, a.out);
  std::cout << "edges " << before << " -> " << ds.graph.num_edges() << ", wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string model;
  std::vector<std::string> data;
  std::string out_dir;
  std::string split = "all";
  std::vector<Eigen::Index> batch_sizes{256, 512, 1024, 2048};
  int repetitions = 5;
  bool no_timing = false;
  std::uint64_t seed = 0;
};

int cmd_report(const ReportArgs& a) {
  auto model = pipeline::load_checkpoint(a.model);
  std::vector<data::Dataset> sets;
  for (const auto& d : a.data) {
    sets.push_back(data::load_dataset(d));
  }
  std::vector<const data::Dataset*> ptrs;
  for (const auto& s : sets) {
    ptrs.push_back(&s);
  }
  const auto split = parse_split(a.split);
  std::optional<data::Split> filter;
  if (split != data::Split::None) {
    filter = split;
  }
  Rng rng(a.seed);
  auto hists = pipeline::entropy_report(model, ptrs, rng, filter);

  const fs::path dir(a.out_dir);
  auto summary = open_file(dir / "entropy_summary.csv");
  summary << "index,dataset,n,mean_entropy,std_entropy\n";
  for (std::size_t k = 0; k < hists.size(); ++k) {
    auto os = open_file(dir / ("entropy_" + std::to_string(k) + ".csv"));
    metrics::write_histogram_csv(os, hists[k]);
    summary << k << ',' << a.data[k] << ',' << hists[k].n << ',' << data::format_double(hists[k].mean) << ','
            << data::format_double(hists[k].std) << '\n';
    std::cout << a.data[k] << ": n " << hists[k].n << " mean entropy " << hists[k].mean << '\n';
  }
  if (!a.no_timing) {
    auto rows = pipeline::timing_probe(model, sets.front(), a.batch_sizes, a.repetitions, a.seed);
    auto os = open_file(dir / "timing.csv");
    pipeline::write_timing_csv(os, rows);
  }
  std::cout << "wrote " << a.out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Single-threaded build; RMNP_THREADS is accepted for compatibility and has
  // nothing to cap.
  [[maybe_unused]] const char* threads = std::getenv("RMNP_THREADS");

  CLI::App app{"Reliable multimodal neural process bot detector"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset directory");
  s->add_option("--n", synth.cfg.n_accounts, "number of accounts")->capture_default_str();
  s->add_option("--bot-frac", synth.cfg.bot_fraction, "fraction of bot accounts")->capture_default_str();
  s->add_option("--sep", synth.sep, "class separation for metadata,text,graph")
      ->delimiter(',')
      ->expected(3)
      ->capture_default_str();
  s->add_option("--homophily", synth.cfg.edge_homophily, "probability an edge joins same-label accounts")
      ->capture_default_str();
  s->add_option("--degree", synth.cfg.avg_degree, "average out-degree per relation")->capture_default_str();
  s->add_option("--d-text", synth.cfg.d_text, "text embedding width")->capture_default_str();
  s->add_option("--camouflage", synth.cfg.camouflage_fraction, "fraction of bots camouflaged")->capture_default_str();
  s->add_option("--camouflage-modality", synth.camouflage_modality, "metadata, text or graph")->capture_default_str();
  s->add_option("--shift", synth.cfg.shift, "translation of both class means in within-class sd, orthogonal to the class axis")->capture_default_str();
  s->add_option("--seed", synth.cfg.seed)->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model on a dataset directory");
  t->add_option("--data", train.data, "dataset directory")->required();
  t->add_option("--out", train.out, "checkpoint path")->required();
  t->add_option("--log", train.log, "epoch log (default <out>.log.jsonl)");
  t->add_option("--ablate", train.ablate, "no_ucd, no_ccr, mlp_gating or poe_uniform (repeatable)");
  t->add_option("--lambda1", train.hp.lambda1)->capture_default_str();
  t->add_option("--lambda2", train.hp.lambda2)->capture_default_str();
  t->add_option("--tau", train.hp.tau)->capture_default_str();
  t->add_option("--epochs", train.hp.epochs)->capture_default_str();
  t->add_option("--batch", train.hp.batch_size)->capture_default_str();
  t->add_option("--lr", train.hp.learning_rate)->capture_default_str();
  t->add_option("--wd", train.hp.weight_decay, "decoupled weight decay")->capture_default_str();
  t->add_option("--hidden", train.hp.hidden, "shared width of every representation")->capture_default_str();
  t->add_option("--z-samples", train.hp.n_z_samples)->capture_default_str();
  t->add_option("--context", train.hp.n_context, "context points per modality")->capture_default_str();
  t->add_option("--layers", train.hp.graph_layers, "graph attention layers")->capture_default_str();
  t->add_option("--relation-dim", train.hp.relation_dim)->capture_default_str();
  t->add_option("--seed", train.hp.seed)->capture_default_str();
  t->add_flag("--mean-logits", train.mean_logits, "decode with the logit mean only, no logit sampling");
  t->add_flag("--quiet", train.quiet, "no per-epoch progress on stderr");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "metrics of a checkpoint on a dataset split");
  e->add_option("--model", eval.model)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--split", eval.split, "train, val, test or all")->capture_default_str();
  e->add_option("--out", eval.out, "metrics CSV (default stdout)");
  e->add_option("--per-account", eval.per_account, "per-account CSV");
  e->add_option("--seed", eval.seed, "sampling seed")->capture_default_str();

  PerturbArgs perturb;
  auto* p = app.add_subcommand("perturb", "inject human-to-bot camouflage edges");
  p->add_option("--data", perturb.data)->required();
  p->add_option("--proportion", perturb.proportion)->required();
  p->add_option("--seed", perturb.seed)->capture_default_str();
  p->add_option("--out", perturb.out)->required();

  ReportArgs report;
  auto* r = app.add_subcommand("report", "entropy histograms and timing table");
  r->add_option("--model", report.model)->required();
  r->add_option("--data", report.data, "dataset directory (repeatable)")->required();
  r->add_option("--out-dir", report.out_dir)->required();
  r->add_option("--split", report.split, "train, val, test or all")->capture_default_str();
  r->add_option("--batch-sizes", report.batch_sizes)->delimiter(',')->capture_default_str();
  r->add_option("--reps", report.repetitions)->capture_default_str();
  r->add_flag("--no-timing", report.no_timing);
  r->add_option("--seed", report.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*p) return cmd_perturb(perturb);
    if (*r) return cmd_report(report);
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
