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

// Command-line front end: corpus generation, pre-training, contrastive
// evaluation, downstream training, learning curves and gradient checks.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "stdim/stdim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<stdim::Index> workers;
  bool quiet = false;
};

Globals g;

void log(const std::string& msg) {
  if (!g.quiet) std::cerr << msg << '\n';
}

json read_json_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw stdim::IoError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw stdim::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw stdim::IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw stdim::IoError("cannot create '" + dir.string() + "': " + ec.message());
}

bool is_subject_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) return false;
  try {
    return json::parse(in).contains("subjects");
  } catch (const json::exception&) {
    return false;
  }
}

// A simgen output directory holds pretrain/ and downstream/ corpora; a corpus
// directory may also be given directly.
fs::path corpus_dir(const fs::path& data, const std::string& kind) {
  if (fs::exists(data / kind / "manifest.json")) return data / kind;
  if (fs::exists(data / "manifest.json")) return data;
  throw stdim::IoError("no " + kind + " corpus under '" + data.string() + "'");
}

stdim::EpochCallback epoch_logger(const std::string& what) {
  return [what](const stdim::EpochRecord& r) {
    log(what + " epoch " + std::to_string(r.epoch) + " loss=" + stdim::format_double(r.train_loss) +
        " val=" + stdim::format_double(r.val_metric));
  };
}

/// Pool / val / test for the downstream subcommands. Subject datasets are split
/// by a seeded stratified draw; simulated corpora use their own splits.
stdim::CurveData load_downstream_data(const fs::path& data, stdim::Index test_size, stdim::Index val_size,
                                      std::uint64_t seed) {
  const fs::path manifest = fs::is_regular_file(data) ? data : data / "manifest.json";
  if (is_subject_manifest(manifest)) {
    const auto ds = stdim::load_subject_dataset(manifest);
    return stdim::split_subjects(stdim::to_labeled(ds.subjects), test_size, val_size, seed);
  }
  const auto splits = stdim::read_corpus(corpus_dir(data, "downstream"));
  return {stdim::to_labeled(splits.train), stdim::to_labeled(splits.val), stdim::to_labeled(splits.test)};
}

void cmd_simgen(const std::string& config_path, const std::string& out) {
  stdim::SimCorpusConfig cfg = read_json_file(config_path).get<stdim::SimCorpusConfig>();
  if (g.seed) cfg.master_seed = *g.seed;
  cfg.validate();
  const fs::path dir(out);
  log("generating pre-training corpus");
  stdim::write_corpus(dir / "pretrain", stdim::build_pretrain_corpus(cfg), "pretrain", cfg);
  log("generating downstream corpus");
  stdim::write_corpus(dir / "downstream", stdim::build_downstream_corpus(cfg), "downstream", cfg);
  std::cout << json{{"out", dir.string()}, {"master_seed", cfg.master_seed}}.dump() << '\n';
}

void cmd_pretrain(const std::string& data, const std::string& config_path, const std::string& out) {
  const json j = read_json_file(config_path);
  const auto splits = stdim::read_corpus(corpus_dir(data, "pretrain"));
  if (splits.train.empty()) throw stdim::ConfigError("pre-training corpus is empty");
  const auto channels = splits.train.front().values.rows();

  stdim::EncoderConfig enc = stdim::EncoderConfig::sim(channels);
  if (j.contains("encoder")) enc = j.at("encoder").get<stdim::EncoderConfig>();
  else if (j.value("variant", std::string("sim")) == "real") enc = stdim::EncoderConfig::real(channels);
  stdim::Hyperparams hp;
  if (j.contains("hyper")) hp = j.at("hyper").get<stdim::Hyperparams>();
  if (g.seed) hp.seed = *g.seed;
  stdim::PretrainOptions opts;
  opts.anchor_stride = j.value("anchor_stride", opts.anchor_stride);
  opts.eval_batch_size = j.value("eval_batch_size", opts.eval_batch_size);
  opts.eval_rounds = j.value("eval_rounds", opts.eval_rounds);
  opts.on_epoch = epoch_logger("pretrain");

  const auto result = stdim::pretrain<float>(enc, stdim::normalized_values(splits.train),
                                             stdim::normalized_values(splits.val), hp, opts);
  auto ckpt = result.checkpoint();
  ckpt.metadata["hyper"] = hp;
  stdim::save_checkpoint(out, ckpt);
  result.history.write_jsonl(fs::path(out).string() + ".history.jsonl");
  const auto& best = result.history.epochs.at(static_cast<std::size_t>(result.history.best_epoch));
  std::cout << json{{"checkpoint", out}, {"best_epoch", best.epoch}, {"val_accuracy", best.val_metric}}.dump()
            << '\n';
}

void cmd_eval_contrastive(const std::string& ckpt_path, const std::string& data, stdim::Index batch,
                          const std::string& split) {
  const auto ckpt = stdim::load_checkpoint(ckpt_path);
  const auto cfg = stdim::checkpoint_encoder_config(ckpt);
  stdim::Encoder<float> encoder(cfg);
  stdim::CriticHeads<float> heads(cfg);
  stdim::restore_params<float>(ckpt, encoder, "encoder.");
  stdim::restore_params<float>(ckpt, heads, "critic.");
  const auto splits = stdim::read_corpus(corpus_dir(data, "pretrain"));
  const auto& series = split == "train" ? splits.train : split == "val" ? splits.val : splits.test;
  if (split != "train" && split != "val" && split != "test")
    throw stdim::ConfigError("split must be train, val or test");
  const auto values = stdim::normalized_values(series);
  const auto ev = stdim::evaluate_contrastive(encoder, heads, values, batch, g.seed.value_or(0));
  std::cout << json{{"split", split},
                    {"batch_size", batch},
                    {"ls_accuracy", ev.ls_accuracy},
                    {"ss_accuracy", ev.ss_accuracy},
                    {"loss", ev.loss},
                    {"batches", ev.batches}}
                   .dump()
            << '\n';
}

void cmd_downstream(const std::string& mode_str, const std::string& ckpt_path, const std::string& data,
                    const std::string& config_path, const std::string& out) {
  const json j = read_json_file(config_path);
  const auto mode = stdim::parse_mode(mode_str);
  stdim::Hyperparams hp = stdim::Hyperparams::downstream_defaults();
  if (j.contains("hyper")) stdim::from_json(j.at("hyper"), hp);
  if (g.seed) hp.seed = *g.seed;
  stdim::DownstreamOptions opts;
  opts.window_hop = j.value("window_hop", opts.window_hop);
  if (j.contains("metric")) opts.stop_metric = stdim::parse_metric(j.at("metric").get<std::string>());
  opts.on_epoch = epoch_logger(mode_str);

  const auto cd = load_downstream_data(data, j.value("test_size", stdim::Index{64}),
                                       j.value("val_size", stdim::Index{32}), hp.seed);
  std::optional<stdim::Checkpoint> ckpt;
  if (!ckpt_path.empty()) ckpt = stdim::load_checkpoint(ckpt_path);
  const auto channels = cd.pool.at(0).values.rows();
  stdim::EncoderConfig npt = ckpt ? stdim::checkpoint_encoder_config(*ckpt)
                                  : (channels == 53 ? stdim::EncoderConfig::real() : stdim::EncoderConfig::sim(channels));
  if (j.contains("npt_encoder")) npt = j.at("npt_encoder").get<stdim::EncoderConfig>();
  stdim::ClassifierConfig clf;
  if (j.contains("classifier")) clf = j.at("classifier").get<stdim::ClassifierConfig>();
  clf.input_dim = (ckpt ? stdim::checkpoint_encoder_config(*ckpt) : npt).latent_dim;

  const stdim::DownstreamData d{cd.pool, cd.val, cd.test};
  const auto r = stdim::train_downstream<float>(mode, ckpt ? &*ckpt : nullptr, npt, d, clf, hp, opts);

  const fs::path dir(out);
  ensure_dir(dir);
  stdim::save_checkpoint(dir / "checkpoint.ntc", stdim::make_checkpoint<float>(r.encoder, nullptr, &r.classifier));
  r.history.write_jsonl(dir / "history.jsonl");
  auto metrics_json = [](const stdim::EvalMetrics& m) {
    json o{{"accuracy", m.accuracy}, {"loss", m.loss}};
    o["auc"] = std::isnan(m.auc) ? json(nullptr) : json(m.auc);
    return o;
  };
  const json report{{"mode", stdim::mode_name(mode)},
                    {"best_epoch", r.history.epochs.at(static_cast<std::size_t>(r.history.best_epoch)).epoch},
                    {"val", metrics_json(r.val)},
                    {"test", metrics_json(r.test)}};
  write_json_file(dir / "metrics.json", report);
  std::cout << report.dump() << '\n';
}

void cmd_curve(const std::string& config_path, const std::string& ckpt_path, const std::string& data,
               const std::string& out) {
  stdim::CurveConfig cfg = read_json_file(config_path).get<stdim::CurveConfig>();
  if (!data.empty()) cfg.data = data;
  if (g.seed) cfg.master_seed = *g.seed;
  if (g.workers) cfg.workers = *g.workers;
  if (cfg.data.empty()) throw stdim::ConfigError("curve needs a data directory (--data or \"data\" in the config)");

  std::optional<stdim::Checkpoint> ckpt;
  if (!ckpt_path.empty()) ckpt = stdim::load_checkpoint(ckpt_path);
  const auto cd = load_downstream_data(cfg.data, cfg.test_size, cfg.val_size, cfg.master_seed);
  const auto result = stdim::run_learning_curve<float>(cfg, cd, ckpt ? &*ckpt : nullptr, [](const stdim::CurveRecord& r) {
    log(std::string(stdim::mode_name(r.mode)) + " size=" + std::to_string(r.train_size) +
        " trial=" + std::to_string(r.trial) + " " + r.metric + "=" + stdim::format_double(r.value));
  });
  stdim::emit_report(result, out);
  std::cout << json{{"out", out}, {"records", result.records.size()}}.dump() << '\n';
}

int cmd_gradcheck(double eps, double tol) {
  const auto r = stdim::stdim_gradient_check(g.seed.value_or(0), 4, eps);
  const bool ok = r.max_rel_error < tol;
  std::cout << json{{"max_rel_error", r.max_rel_error},
                    {"worst_param", r.worst_param},
                    {"worst_index", r.worst_index},
                    {"coordinates", r.coordinates},
                    {"tolerance", tol},
                    {"pass", ok}}
                   .dump()
            << '\n';
  return ok ? 0 : 1;
}

int exit_code_for(const std::string& kind) {
  if (kind == "config") return 2;
  if (kind == "io") return 3;
  if (kind == "format" || kind == "truncated" || kind == "schema" || kind == "unknown_tensor") return 4;
  if (kind == "dimension") return 5;
  if (kind == "numeric") return 6;
  return 1;
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
  return exit_code_for(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stdim: spatiotemporal contrastive pre-training on simulated and subject time series"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  stdim::Index workers = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Master seed override");
  auto* workers_opt = app.add_option("--workers", workers, "Concurrent curve cells")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.fallthrough();

  std::string config, out, data, ckpt, mode, split = "test";
  stdim::Index batch = 32;
  double eps = 1e-4, tol = 1e-3;

  auto* simgen = app.add_subcommand("simgen", "Generate pre-training and downstream corpora");
  simgen->add_option("--config", config, "Corpus config (JSON)")->check(CLI::ExistingFile);
  simgen->add_option("--out", out, "Output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Pre-train encoder and critic heads");
  pretrain->add_option("--data", data, "simgen output or pre-training corpus directory")->required();
  pretrain->add_option("--config", config, "Pre-training config (JSON)")->check(CLI::ExistingFile);
  pretrain->add_option("--out", out, "Checkpoint path")->required();

  auto* evalc = app.add_subcommand("eval-contrastive", "Contrastive accuracy of a checkpoint");
  evalc->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  evalc->add_option("--data", data, "simgen output or pre-training corpus directory")->required();
  evalc->add_option("--batch", batch, "Candidates per anchor")->check(CLI::Range(2, 1 << 20));
  evalc->add_option("--split", split, "train, val or test");

  auto* down = app.add_subcommand("downstream", "Train the sequence classifier");
  down->add_option("--mode", mode, "npt, fpt or ufpt")->required();
  down->add_option("--ckpt", ckpt, "Pre-trained checkpoint (fpt, ufpt)")->check(CLI::ExistingFile);
  down->add_option("--data", data, "simgen output, downstream corpus or subject dataset")->required();
  down->add_option("--config", config, "Downstream config (JSON)")->check(CLI::ExistingFile);
  down->add_option("--out", out, "Output directory")->required();

  auto* curve = app.add_subcommand("curve", "Learning curve over training-set sizes");
  curve->add_option("--config", config, "Curve config (JSON)")->required()->check(CLI::ExistingFile);
  curve->add_option("--ckpt", ckpt, "Pre-trained checkpoint")->check(CLI::ExistingFile);
  curve->add_option("--data", data, "Overrides the config's data directory");
  curve->add_option("--out", out, "Report directory")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the contrastive loss");
  gradcheck->add_option("--epsilon", eps, "Central-difference step");
  gradcheck->add_option("--tolerance", tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }
  if (*seed_opt) g.seed = seed;
  if (*workers_opt) g.workers = workers;

  try {
    if (*simgen) cmd_simgen(config, out);
    else if (*pretrain) cmd_pretrain(data, config, out);
    else if (*evalc) cmd_eval_contrastive(ckpt, data, batch, split);
    else if (*down) cmd_downstream(mode, ckpt, data, config, out);
    else if (*curve) cmd_curve(config, ckpt, data, out);
    else if (*gradcheck) return cmd_gradcheck(eps, tol);
  } catch (const stdim::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const json::exception& e) {
    return fail("config", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
