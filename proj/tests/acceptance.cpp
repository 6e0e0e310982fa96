// Copyright 2026 The stdim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Acceptance checks. Each criterion prints exactly one line:
//   criterion N: PASS|FAIL <details>
// and the process exits non-zero on FAIL.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "stdim/stdim.hpp"

namespace fs = std::filesystem;
using namespace stdim;

namespace {

struct Outcome {
  bool pass = false;
  std::string details;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

void progress(const std::string& msg) { std::cerr << "  " << msg << std::endl; }

// ---------------------------------------------------------------------------

Outcome criterion_infonce() {
  Rng rng(101);
  std::uniform_int_distribution<int> size(2, 8);
  double worst = 0;
  for (int k = 0; k < 100; ++k) {
    const Index b = size(rng);
    const MatrixD s = standard_normal(b, b, rng) * 4.0;
    worst = std::max(worst, std::abs(infonce_loss(s) - oracle::infonce(s)));
  }
  const double uniform = std::abs(infonce_loss(MatrixD(MatrixD::Zero(4, 4))) - std::log(4.0));
  MatrixD m = MatrixD::Zero(2, 2);
  m(0, 0) = m(1, 1) = 10.0;
  const double margin = std::abs(infonce_loss(m) - std::log1p(std::exp(-10.0)));
  return {worst <= 1e-10 && uniform <= 1e-9 && margin <= 1e-9,
          "max_oracle_diff=" + fmt(worst) + " ln4_diff=" + fmt(uniform) + " margin_diff=" + fmt(margin)};
}

Outcome criterion_gradients() {
  Rng rng(202);
  double worst_scores = 0;
  for (int k = 0; k < 20; ++k) {
    const MatrixD s = standard_normal(4, 4, rng) * 3.0;
    MatrixD g;
    infonce_loss(s, &g);
    const MatrixD n = oracle::central_difference([](const MatrixD& x) { return infonce_loss(x); }, s, 1e-4);
    worst_scores = std::max(worst_scores, oracle::max_relative_error(g, n));
  }
  double worst_params = 0;
  std::string where;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = stdim_gradient_check(seed);
    if (r.max_rel_error >= worst_params) {
      worst_params = r.max_rel_error;
      where = r.worst_param;
    }
  }
  return {worst_scores < 1e-5 && worst_params < 1e-3,
          "infonce_rel=" + fmt(worst_scores) + " stdim_rel=" + fmt(worst_params) + " (" + where + ")"};
}

// Spectral radius via Gelfand's formula: ||A^k||^(1/k) -> rho(A).
double gelfand_radius(const MatrixD& a) {
  MatrixD p = a;
  int k = 1;
  double log_scale = 0;
  for (int i = 0; i < 10; ++i) {  // k = 1024 by repeated squaring, renormalized
    p = p * p;
    log_scale *= 2;
    k *= 2;
    const double n = p.norm();
    if (n == 0) return 0;
    p /= n;
    log_scale += std::log(n);
  }
  return std::exp(log_scale / k);
}

Outcome criterion_simulation() {
  SimCorpusConfig cfg;
  cfg.master_seed = 303;
  double max_rho = 0;
  Index matrices = 0;
  for (Index g = 0; g < cfg.n_graphs_downstream; ++g) {
    Rng rng = make_rng(cfg.master_seed, "downstream/graph", {static_cast<std::uint64_t>(g)});
    max_rho = std::max(max_rho, gelfand_radius(random_stable_transition(cfg.n_nodes, 0.8, rng).entries));
    ++matrices;
  }
  for (Index i = 0; i < cfg.pretrain_series; ++i) {
    Rng rng = make_rng(cfg.master_seed, "pretrain/graph", {static_cast<std::uint64_t>(i)});
    max_rho = std::max(max_rho, gelfand_radius(random_stable_transition(cfg.n_nodes, 0.8, rng).entries));
    ++matrices;
  }

  bool rate_one = true, decimate = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng ra(seed);
    const auto a = random_stable_transition(10, 0.8, ra);
    Rng r1(seed + 1000), r2(seed + 1000), r3(seed + 2000), r4(seed + 2000);
    rate_one = rate_one && generate_svar(a, 300, 1, 1.0, r1) == generate_var(a, 300, 1.0, r2);
    const MatrixD svar = generate_svar(a, 300, 2, 1.0, r3);
    const MatrixD full = generate_var(a, 600, 1.0, r4);
    for (Index t = 0; t < 300; ++t) decimate = decimate && svar.col(t) == full.col(2 * t);
  }

  SimCorpusConfig small;
  small.pretrain_series = 4;
  small.pretrain_length = 1000;
  small.pretrain_split = {700, 200, 100};
  small.n_graphs_downstream = 20;
  small.downstream_length = 200;
  small.downstream_split = {60, 20, 20};
  small.master_seed = 42;
  auto same = [](const SimSplits& x, const SimSplits& y) {
    const std::vector<SimSeries>* xs[3] = {&x.train, &x.val, &x.test};
    const std::vector<SimSeries>* ys[3] = {&y.train, &y.val, &y.test};
    for (int s = 0; s < 3; ++s) {
      if (xs[s]->size() != ys[s]->size()) return false;
      for (std::size_t i = 0; i < xs[s]->size(); ++i)
        if ((*xs[s])[i].values != (*ys[s])[i].values || (*xs[s])[i].label != (*ys[s])[i].label) return false;
    }
    return true;
  };
  const bool reproducible = same(build_pretrain_corpus(small), build_pretrain_corpus(small)) &&
                            same(build_downstream_corpus(small), build_downstream_corpus(small));
  return {max_rho < 1.0 && rate_one && decimate && reproducible,
          "matrices=" + std::to_string(matrices) + " max_rho=" + fmt(max_rho, 6) + " rate1_equal=" +
              std::to_string(rate_one) + " decimate_equal=" + std::to_string(decimate) +
              " seed_reproducible=" + std::to_string(reproducible)};
}

// Desk pre-training corpus: 5 VAR series x 10 channels x 2000 steps.
SimCorpusConfig desk_pretrain_corpus(Index series, std::uint64_t seed) {
  SimCorpusConfig c;
  c.pretrain_series = series;
  c.pretrain_length = 2000;
  c.pretrain_split = {1400, 400, 200};
  c.n_graphs_downstream = 0;
  c.downstream_split = {0, 0, 0};
  c.master_seed = seed;
  return c;
}

Outcome criterion_pretraining() {
  const auto corpus = build_pretrain_corpus(desk_pretrain_corpus(5, 404));
  Hyperparams hp;
  hp.max_epochs = 12;
  hp.patience = 12;
  hp.seed = 4;
  PretrainOptions opts;
  opts.eval_rounds = 16;
  opts.on_epoch = [](const EpochRecord& e) {
    progress("pretrain epoch " + std::to_string(e.epoch) + " loss=" + fmt(e.train_loss) + " val=" + fmt(e.val_metric));
  };
  const auto r = pretrain<float>(EncoderConfig::sim(), normalized_values(corpus.train),
                                 normalized_values(corpus.val), hp, opts);
  const auto test = evaluate_contrastive(r.encoder, r.heads, normalized_values(corpus.test), 32, 4040, 32);
  const auto& first = r.history.epochs.front();
  const auto& best = r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)];
  const double threshold = 3.0 / 32.0;
  const bool decreased = best.train_loss < first.train_loss;
  return {test.ls_accuracy > threshold && decreased,
          "test_ls_accuracy=" + fmt(test.ls_accuracy) + " (threshold " + fmt(threshold) + ", batches " +
              std::to_string(test.batches) + ") loss epoch1=" + fmt(first.train_loss) + " best_epoch" +
              std::to_string(best.epoch) + "=" + fmt(best.train_loss)};
}

SimCorpusConfig desk_downstream_corpus(Index graphs, Index length, std::uint64_t seed) {
  SimCorpusConfig c;
  c.pretrain_series = 0;
  c.n_graphs_downstream = graphs;
  c.samples_per_graph = 5;
  c.downstream_length = length;
  c.downstream_split = {graphs * 4, graphs / 2, graphs / 2};
  c.mixed_graph_labels = true;
  c.master_seed = seed;
  return c;
}

Outcome criterion_window_baseline() {
  const auto corpus = build_downstream_corpus(desk_downstream_corpus(2000, 200, 505));
  const DownstreamData data{to_labeled(corpus.train), to_labeled(corpus.val), to_labeled(corpus.test)};
  Hyperparams hp;
  hp.batch_size = 64;
  hp.max_epochs = 10;
  hp.patience = 4;
  hp.seed = 5;
  WindowBaselineOptions opts;
  opts.on_epoch = [](const EpochRecord& e) {
    progress("window epoch " + std::to_string(e.epoch) + " loss=" + fmt(e.train_loss) + " val=" + fmt(e.val_metric));
  };
  const auto real = window_supervised_baseline<float>(EncoderConfig::sim(), data, hp, opts);
  opts.shuffle_labels = true;
  const auto control = window_supervised_baseline<float>(EncoderConfig::sim(), data, hp, opts);
  const bool ok = real.test_accuracy > 0.55 && std::abs(control.test_accuracy - 0.5) <= 0.05;
  return {ok, "test_accuracy=" + fmt(real.test_accuracy) + " shuffled_control=" + fmt(control.test_accuracy) +
                  " windows=" + std::to_string(real.test_windows)};
}

// Desk learning curve. The pre-training corpus is independent of the
// downstream graphs.
struct DeskCurve {
  Index pretrain_series = 50;
  Index pretrain_epochs = 8;
  Index graphs = 200;
  Index length = 200;
  Index max_epochs = 100;
  Index patience = 12;
  Index trials = 10;
};

Outcome criterion_transfer(const DeskCurve& d) {
  const auto t0 = Clock::now();
  const auto pc = build_pretrain_corpus(desk_pretrain_corpus(d.pretrain_series, 606));
  Hyperparams phup;
  phup.max_epochs = d.pretrain_epochs;
  phup.patience = d.pretrain_epochs;
  phup.seed = 6;
  PretrainOptions popts;
  popts.on_epoch = [](const EpochRecord& e) {
    progress("pretrain epoch " + std::to_string(e.epoch) + " loss=" + fmt(e.train_loss) + " val=" + fmt(e.val_metric));
  };
  const auto pre = pretrain<float>(EncoderConfig::sim(), normalized_values(pc.train), normalized_values(pc.val),
                                   phup, popts);
  const Checkpoint ckpt = pre.checkpoint();
  progress("pre-training done in " + fmt(seconds_since(t0)) + " s");

  auto dcfg = desk_downstream_corpus(d.graphs, d.length, 607);
  dcfg.downstream_split = {d.graphs * 3, d.graphs, d.graphs};
  const auto dc = build_downstream_corpus(dcfg);
  const CurveData data{to_labeled(dc.train), to_labeled(dc.val), to_labeled(dc.test)};
  CurveConfig cfg;
  cfg.train_sizes = {10, 20, 40, 80};
  cfg.n_trials = d.trials;
  cfg.master_seed = 608;
  cfg.hyper.max_epochs = d.max_epochs;
  cfg.hyper.patience = d.patience;
  const auto result = run_learning_curve<float>(cfg, data, &ckpt, [](const CurveRecord& r) {
    progress(std::string(mode_name(r.mode)) + " size=" + std::to_string(r.train_size) + " trial=" +
             std::to_string(r.trial) + " acc=" + fmt(r.value));
  });
  const auto s = summarize(result);
  const Index lo = cfg.train_sizes.front(), hi = cfg.train_sizes.back();
  auto mean = [&](const char* mode, Index size) { return s.at({mode, size}).mean; };
  const double npt_lo = mean("NPT", lo), fpt_lo = mean("FPT", lo), ufpt_lo = mean("UFPT", lo);
  const double gap_lo = 0.5 * (fpt_lo + ufpt_lo) - npt_lo;
  const double gap_hi = 0.5 * (mean("FPT", hi) + mean("UFPT", hi)) - mean("NPT", hi);
  const bool ok = fpt_lo >= npt_lo && ufpt_lo >= npt_lo && gap_hi < gap_lo;
  std::string table;
  for (auto size : cfg.train_sizes)
    table += " size" + std::to_string(size) + "[NPT=" + fmt(mean("NPT", size), 3) + " FPT=" + fmt(mean("FPT", size), 3) +
             " UFPT=" + fmt(mean("UFPT", size), 3) + "]";
  return {ok, "gap_smallest=" + fmt(gap_lo) + " gap_largest=" + fmt(gap_hi) + table + " elapsed=" +
                  fmt(seconds_since(t0), 4) + "s"};
}

Outcome criterion_freeze() {
  auto cfg = desk_downstream_corpus(12, 100, 707);
  cfg.downstream_split = {40, 10, 10};
  const auto dc = build_downstream_corpus(cfg);
  const DownstreamData data{to_labeled(dc.train), to_labeled(dc.val), to_labeled(dc.test)};
  Encoder<float> enc(EncoderConfig::sim());
  CriticHeads<float> heads(EncoderConfig::sim());
  Rng rng(7);
  enc.init(rng);
  heads.init(rng);
  const Checkpoint ckpt = make_checkpoint<float>(enc, &heads, nullptr);
  auto hp = Hyperparams::downstream_defaults();
  hp.max_epochs = 3;
  hp.patience = 3;
  const auto fpt = train_downstream<float>(TrainMode::FPT, &ckpt, EncoderConfig::sim(), data, {}, hp);
  const auto ufpt = train_downstream<float>(TrainMode::UFPT, &ckpt, EncoderConfig::sim(), data, {}, hp);

  std::vector<const Param<float>*> orig, frozen, tuned;
  enc.for_each_param([&](const Param<float>& p) { orig.push_back(&p); });
  fpt.encoder.for_each_param([&](const Param<float>& p) { frozen.push_back(&p); });
  ufpt.encoder.for_each_param([&](const Param<float>& p) { tuned.push_back(&p); });
  Index identical = 0, changed = 0;
  for (std::size_t i = 0; i < orig.size(); ++i) {
    identical += orig[i]->value == frozen[i]->value ? 1 : 0;
    changed += orig[i]->value == tuned[i]->value ? 0 : 1;
  }
  const auto n = static_cast<Index>(orig.size());
  return {identical == n && changed > 0, "fpt_identical=" + std::to_string(identical) + "/" + std::to_string(n) +
                                             " ufpt_changed=" + std::to_string(changed) + "/" + std::to_string(n)};
}

Outcome criterion_auc() {
  Rng rng(808);
  std::uniform_int_distribution<int> len(2, 60), coarse(0, 9), lab(0, 1);
  int mismatches = 0, fixtures = 0;
  while (fixtures < 1000) {
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse(rng) / 9.0;
      y[i] = lab(rng);
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    ++fixtures;
    if (compute_auc(s, y) != oracle::pair_auc(s, y)) ++mismatches;
  }
  const double tie = compute_auc(std::vector<double>{0.5, 0.5, 0.2}, std::vector<int>{1, 0, 0});
  return {mismatches == 0 && tie == 0.75,
          "fixtures=" + std::to_string(fixtures) + " mismatches=" + std::to_string(mismatches) + " tie=" + fmt(tie)};
}

// ---------------------------------------------------------------------------
// Pipeline plumbing through the CLI.

int run(const std::string& cmd, const fs::path& log) {
  progress("$ " + cmd);
  return std::system((cmd + " >> " + log.string() + " 2>&1").c_str());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::trunc) << text; }

Outcome criterion_plumbing(const std::string& cli, const fs::path& work) {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  // In-process round trips.
  {
    Encoder<float> enc(EncoderConfig::sim());
    CriticHeads<float> heads(EncoderConfig::sim());
    SequenceClassifier<float> clf(ClassifierConfig{});
    Rng rng(9);
    enc.init(rng);
    heads.init(rng);
    clf.init(rng);
    const auto ck = make_checkpoint<float>(enc, &heads, &clf);
    save_checkpoint(work / "roundtrip.ntc", ck);
    const auto back = load_checkpoint(work / "roundtrip.ntc");
    Encoder<float> enc2(checkpoint_encoder_config(back));
    CriticHeads<float> heads2(checkpoint_encoder_config(back));
    SequenceClassifier<float> clf2(ClassifierConfig{});
    restore_params<float>(back, enc2, "encoder.");
    restore_params<float>(back, heads2, "critic.");
    restore_params<float>(back, clf2, "classifier.");
    bool exact = true;
    auto compare = [&](auto& a, auto& b) {
      std::vector<const Param<float>*> pa, pb;
      a.for_each_param([&](const Param<float>& p) { pa.push_back(&p); });
      b.for_each_param([&](const Param<float>& p) { pb.push_back(&p); });
      exact = exact && pa.size() == pb.size();
      for (std::size_t i = 0; exact && i < pa.size(); ++i) exact = pa[i]->value == pb[i]->value;
    };
    compare(enc, enc2);
    compare(heads, heads2);
    compare(clf, clf2);
    check(exact, "checkpoint round trip");
  }
  {
    SubjectDataset ds;
    ds.n_components = 53;
    ds.label_names = {{"control", 0}, {"patient", 1}};
    Rng rng(10);
    for (int i = 0; i < 4; ++i)
      ds.subjects.push_back({"sub-" + std::to_string(i), i % 2, standard_normal(53, 140, rng)});
    save_subject_dataset(work / "subjects", ds);
    const auto back = load_subject_dataset(work / "subjects" / "manifest.json");
    bool exact = back.subjects.size() == ds.subjects.size();
    for (std::size_t i = 0; exact && i < ds.subjects.size(); ++i)
      exact = back.subjects[i].values == ds.subjects[i].values && back.subjects[i].label == ds.subjects[i].label;
    check(exact, "subject dataset round trip");
  }

  // simgen -> pretrain -> curve, twice at one worker and once at four.
  write_text(work / "sim.json", R"({"pretrain_series": 2, "pretrain_length": 600, "pretrain_split": [400, 100, 100],
  "n_graphs_downstream": 16, "samples_per_graph": 5, "downstream_length": 60,
  "downstream_split": [60, 10, 10], "mixed_graph_labels": true})");
  write_text(work / "pretrain.json", R"({"variant": "sim", "anchor_stride": 4,
  "hyper": {"max_epochs": 2, "patience": 2, "batch_size": 32}})");
  write_text(work / "curve.json", R"({"train_sizes": [2, 4], "n_trials": 2,
  "hyper": {"max_epochs": 2, "patience": 2, "batch_size": 8},
  "classifier": {"hidden": 16, "head_hidden": 16}})");
  const std::string q = " --quiet --seed 99 ";
  const fs::path data = work / "sim", ckpt = work / "pre.ntc", log = work / "cli.log";
  const bool pipeline_ok =
      run(cli + q + "simgen --config " + (work / "sim.json").string() + " --out " + data.string(), log) == 0 &&
      run(cli + q + "pretrain --data " + data.string() + " --config " + (work / "pretrain.json").string() +
          " --out " + ckpt.string(), log) == 0;
  check(pipeline_ok, "simgen/pretrain");
  std::vector<fs::path> outs{work / "curve_a", work / "curve_b", work / "curve_w4"};
  for (std::size_t i = 0; pipeline_ok && i < outs.size(); ++i) {
    const std::string workers = i == 2 ? " --workers 4 " : " --workers 1 ";
    check(run(cli + q + workers + "curve --config " + (work / "curve.json").string() + " --ckpt " + ckpt.string() +
              " --data " + data.string() + " --out " + outs[i].string(), log) == 0,
          "curve run " + std::to_string(i));
  }
  Index records = 0;
  if (failures.empty()) {
    const std::string a = slurp(outs[0] / "curve.csv"), b = slurp(outs[1] / "curve.csv");
    check(!a.empty() && a == b, "curve.csv byte-identical at --workers 1");
    const auto ra = read_curve_csv(outs[0] / "curve.csv");
    const auto r4 = read_curve_csv(outs[2] / "curve.csv");
    records = static_cast<Index>(ra.size());
    bool same = ra.size() == r4.size() && ra.size() == 3 * 2 * 2;
    for (std::size_t i = 0; same && i < ra.size(); ++i)
      same = ra[i].mode == r4[i].mode && ra[i].train_size == r4[i].train_size && ra[i].trial == r4[i].trial &&
             ra[i].value == r4[i].value && ra[i].seed == r4[i].seed;
    check(same, "records value-identical at --workers 4");
    // Reload reproduces every field written.
    CurveResult rr;
    rr.records = ra;
    emit_report(rr, work / "curve_reload");
    check(slurp(work / "curve_reload" / "curve.csv") == a, "curve.csv reload");
  }
  std::string details = "records=" + std::to_string(records);
  for (const auto& f : failures) details += " failed:" + f;
  return {failures.empty(), details};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stdim acceptance checks"};
  int criterion = 0;
  std::string cli, workdir = "acceptance_work";
  DeskCurve desk;
  app.add_option("--criterion", criterion, "Criterion number (1-9)")->required()->check(CLI::Range(1, 9));
  app.add_option("--cli", cli, "Path to the stdim executable (criterion 9)");
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--curve-trials", desk.trials, "Trials per learning-curve cell (criterion 6)");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = fs::path(workdir) / ("criterion_" + std::to_string(criterion));
  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);

  const auto t0 = Clock::now();
  Outcome out;
  try {
    switch (criterion) {
      case 1: out = criterion_infonce(); break;
      case 2: out = criterion_gradients(); break;
      case 3: out = criterion_simulation(); break;
      case 4: out = criterion_pretraining(); break;
      case 5: out = criterion_window_baseline(); break;
      case 6: out = criterion_transfer(desk); break;
      case 7: out = criterion_freeze(); break;
      case 8: out = criterion_auc(); break;
      case 9:
        if (cli.empty()) throw ConfigError("criterion 9 needs --cli");
        out = criterion_plumbing(cli, work);
        break;
    }
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double limits[] = {1, 60, 60, 300, 300, 900, 60, 1, 600};
  const double elapsed = seconds_since(t0);
  const double limit = limits[criterion - 1];
  if (elapsed >= limit) {
    out.pass = false;
    out.details += " runtime over budget";
  }
  std::cout << "criterion " << criterion << ": " << (out.pass ? "PASS" : "FAIL") << " " << out.details
            << " runtime=" << fmt(elapsed, 4) << "s/" << fmt(limit, 4) << "s" << std::endl;
  return out.pass ? 0 : 1;
}
