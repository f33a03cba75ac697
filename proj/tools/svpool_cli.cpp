// Copyright (c) 2026 The svpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// svpool command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "svpool/svpool.hpp"

namespace fs = std::filesystem;
using namespace svpool;

namespace {

struct Overrides {
  std::string config_file;
  std::map<std::string, std::string> values;
  bool no_attn_vad = false;
  bool no_d2 = false;
};

std::string Dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

void AddConfigOptions(CLI::App* app, Overrides& ov) {
  app->add_option("--config", ov.config_file, "key=value run configuration file");
  for (const auto& k : ConfigKeys()) {
    app->add_option_function<std::string>(
        "--" + Dashed(k.name), [&ov, name = std::string(k.name)](const std::string& v) {
          ov.values[name] = v;
        },
        k.help);
  }
  app->add_flag("--no-attn-vad", ov.no_attn_vad, "disable attentive VAD");
  app->add_flag("--no-d2", ov.no_d2, "disable the D2 block");
}

// File first, then flags.
RunConfig Resolve(const Overrides& ov) {
  RunConfig cfg;
  if (!ov.config_file.empty()) cfg.load_file(ov.config_file);
  for (const auto& [k, v] : ov.values) cfg.set(k, v);
  if (ov.no_attn_vad) cfg.set("use_attn_vad", "false");
  if (ov.no_d2) cfg.set("use_d2", "false");
  return cfg;
}

void EmitConfig(const RunConfig& cfg, const fs::path& artifact) {
  auto path = artifact;
  path += ".cfg";
  cfg.write(path);
}

Backend<float> LoadBackend(const RunConfig& cfg, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw DataError("checkpoint '" + ckpt.string() + "' does not exist");
  Backend<float> model(cfg.model(), 0, InitMode::kZeros);
  NamedTensors records;
  for (auto& r : read_checkpoint(ckpt)) {
    if (r.first.rfind("aam.", 0) != 0) records.push_back(std::move(r));
  }
  RestoreTensors<float>(records, {&model.params()});
  return model;
}

Split LoadSplitFor(const RunConfig& cfg, const fs::path& manifest) {
  auto split = load_split(manifest);
  CheckSplitMatchesModel(split, cfg.model(), manifest.string().c_str());
  return split;
}

void PrintReport(const MetricReport& r, const std::optional<fs::path>& csv) {
  WriteReportTable(std::cout, r);
  std::cout << "\n";
  WriteReportCsv(std::cout, r);
  if (csv) {
    std::ofstream os(*csv, std::ios::trunc);
    if (!os) throw DataError("cannot write '" + csv->string() + "'");
    WriteReportCsv(os, r);
  }
}

// ---------------------------------------------------------------------------

int CmdGenSynth(const RunConfig& cfg, const fs::path& out) {
  const auto splits = make_synthetic_splits(cfg, out);
  const auto& corpus = splits.corpus;
  std::error_code ec;
  fs::create_directories(out / "feats", ec);
  if (ec) throw DataError("cannot create '" + (out / "feats").string() + "': " + ec.message());
  for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
    write_feature(out / corpus.entries[i].path, corpus.features[i]);
  }
  write_speakers(out / "speakers.tsv", corpus.speakers);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = kSplitNames[s];
    write_manifest(out / (name + ".tsv"), splits.manifests[s].entries);
  }
  write_trials(out / "valid_trials.tsv", splits.valid_trials, splits.manifests[1]);
  write_trials(out / "test_trials.tsv", splits.test_trials, splits.manifests[2]);
  cfg.write(out / "config.cfg");
  std::cout << "wrote " << corpus.entries.size() << " utterances of " << corpus.speakers.size()
            << " speakers to " << out.string() << "\n";
  return 0;
}

int CmdTrain(const RunConfig& cfg, const fs::path& data) {
  const auto mcfg = cfg.model();
  const auto tcfg = cfg.train();
  auto train_split = LoadSplitFor(cfg, data / "train.tsv");
  auto valid = LoadSplitFor(cfg, data / "valid.tsv");
  auto valid_trials = read_trials(data / "valid_trials.tsv", valid.manifest);
  std::optional<Split> test;
  std::vector<TrialPair> test_trials;
  if (fs::exists(data / "test.tsv") && fs::exists(data / "test_trials.tsv")) {
    test = LoadSplitFor(cfg, data / "test.tsv");
    test_trials = read_trials(data / "test_trials.tsv", test->manifest);
  }
  fs::create_directories(tcfg.checkpoint_dir);
  cfg.write(tcfg.checkpoint_dir / "config.cfg");
  TrainData td{&train_split, &valid, &valid_trials, test ? &*test : nullptr,
               test ? &test_trials : nullptr};
  auto res = train(mcfg, tcfg, td, &std::cout);
  write_scores(tcfg.checkpoint_dir / "valid_scores.tsv", res.val_scores);
  std::cout << "best validation EER " << res.best_val_eer << " at step " << res.best_step
            << " (untrained " << res.untrained_val_eer << ")\n";
  if (res.test_report) {
    write_scores(tcfg.checkpoint_dir / "test_scores.tsv", res.test_scores);
    std::ofstream txt(tcfg.checkpoint_dir / "report.txt", std::ios::trunc);
    WriteReportTable(txt, *res.test_report);
    PrintReport(*res.test_report, tcfg.checkpoint_dir / "report.csv");
  }
  return 0;
}

int CmdEmbed(const RunConfig& cfg, const fs::path& ckpt, const fs::path& manifest,
             const fs::path& out) {
  auto model = LoadBackend(cfg, ckpt);
  auto split = LoadSplitFor(cfg, manifest);
  auto emb = embed_all(model, split.features);
  std::vector<std::string> ids;
  for (const auto& e : split.manifest.entries) ids.push_back(e.utterance_id);
  write_embeddings(out, ids, emb);
  EmitConfig(cfg, out);
  return 0;
}

std::vector<ScoredTrial> ScoreEndToEnd(const RunConfig& cfg, Backend<float>& model,
                                       const fs::path& manifest, const fs::path& trials) {
  auto split = LoadSplitFor(cfg, manifest);
  auto tr = read_trials(trials, split.manifest);
  return score_trials(embed_all(model, split.features), tr);
}

int CmdScore(const RunConfig& cfg, const fs::path& ckpt, const fs::path& manifest,
             const fs::path& trials, const fs::path& out) {
  auto model = LoadBackend(cfg, ckpt);
  write_scores(out, ScoreEndToEnd(cfg, model, manifest, trials));
  EmitConfig(cfg, out);
  return 0;
}

struct EvalArgs {
  std::string scores, val_scores, checkpoint, manifest, trials, val_manifest, val_trials, out_csv;
};

int CmdEval(const RunConfig& cfg, const EvalArgs& a) {
  std::vector<ScoredTrial> test, val;
  if (!a.scores.empty()) {
    if (!a.checkpoint.empty()) throw UsageError("give either --scores or --checkpoint, not both");
    test = read_scores(a.scores);
    if (!a.val_scores.empty()) val = read_scores(a.val_scores);
  } else {
    if (a.checkpoint.empty() || a.manifest.empty() || a.trials.empty()) {
      throw UsageError("eval needs --scores, or --checkpoint with --manifest and --trials");
    }
    auto model = LoadBackend(cfg, a.checkpoint);
    test = ScoreEndToEnd(cfg, model, a.manifest, a.trials);
    if (!a.val_manifest.empty() || !a.val_trials.empty()) {
      if (a.val_manifest.empty() || a.val_trials.empty()) {
        throw UsageError("--val-manifest and --val-trials go together");
      }
      val = ScoreEndToEnd(cfg, model, a.val_manifest, a.val_trials);
    }
  }
  std::optional<std::span<const ScoredTrial>> val_span;
  if (!val.empty()) val_span = std::span<const ScoredTrial>(val);
  auto report = evaluate_trials(test, val_span);
  std::optional<fs::path> csv;
  if (!a.out_csv.empty()) {
    csv = a.out_csv;
    EmitConfig(cfg, *csv);
  }
  PrintReport(report, csv);
  return 0;
}

int CmdGradCheck(const RunConfig& cfg, ModelCheckOptions opts) {
  const auto mcfg = cfg.model();
  opts.seed = cfg.get_size("seed");
  opts.aam_scale = cfg.get_double("aam_scale");
  opts.aam_margin = cfg.get_double("aam_margin");
  const auto res = model_grad_check(mcfg, opts);
  const auto& worst = res.worst();
  std::cout << "checked " << res.checked() << " coordinates (eps " << opts.eps << ", input "
            << opts.batch << "x" << mcfg.input_c << "x" << mcfg.input_l << "x"
            << opts.frames << ")\n";
  if (res.skipped_at_kinks() > 0) {
    std::cout << "skipped " << res.skipped_at_kinks()
              << " coordinates whose probes crossed a relu/clamp/max kink\n";
  }
  std::cout << "worst relative error " << std::scientific << std::setprecision(3)
            << worst.max_rel_err << " at " << worst.worst_param << "[" << worst.worst_index
            << "] analytic " << worst.worst_analytic << " numeric " << worst.worst_numeric
            << "\n";
  const bool ok = worst.max_rel_err < 1e-4 && res.model.checked > 0;
  std::cout << (ok ? "PASS" : "FAIL") << " (threshold 1e-4)\n";
  return ok ? 0 : 3;
}

int CmdParamCount(const RunConfig& cfg) {
  const auto mcfg = cfg.model();
  Backend<float> model(mcfg, 0, InitMode::kZeros);
  std::size_t total = 0;
  for (const auto& [name, n] : model.parameter_breakdown()) {
    std::cout << std::left << std::setw(12) << name << std::right << std::setw(10) << n << "\n";
    total += n;
  }
  std::cout << std::left << std::setw(12) << "total" << std::right << std::setw(10) << total
            << "  (" << std::fixed << std::setprecision(2) << static_cast<double>(total) / 1e6
            << " M)\n" << std::defaultfloat;
  struct Ref {
    std::size_t c, l;
    const char* name;
    double ref, lo, hi;
  };
  const Ref refs[] = {{768, 13, "Base", 2.9e6, 2.5e6, 3.3e6}, {1024, 25, "Large", 3.0e6, 2.6e6, 3.4e6}};
  for (const auto& r : refs) {
    if (mcfg.input_c == r.c && mcfg.input_l == r.l) {
      const bool in = static_cast<double>(total) >= r.lo && static_cast<double>(total) <= r.hi;
      std::cout << r.name << " reference " << r.ref / 1e6 << " M, accepted range [" << r.lo / 1e6
                << ", " << r.hi / 1e6 << "] M: " << (in ? "within" : "OUTSIDE") << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ConfigureAllocator();
  CLI::App app{"svpool: layer-stack speaker verification backend"};
  app.require_subcommand(1);
  Overrides ov;

  fs::path out_dir;
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic corpus with trial lists");
  AddConfigOptions(gen, ov);
  gen->add_option("--out", out_dir, "output directory")->required();

  fs::path data_dir;
  auto* tr = app.add_subcommand("train", "train and select on validation EER");
  AddConfigOptions(tr, ov);
  tr->add_option("--data", data_dir, "corpus directory from gen-synth")->required();

  std::string ckpt, manifest, trials, out_file;
  auto* emb = app.add_subcommand("embed", "write embeddings for a manifest");
  AddConfigOptions(emb, ov);
  emb->add_option("--checkpoint", ckpt)->required();
  emb->add_option("--manifest", manifest)->required();
  emb->add_option("--out", out_file)->required();

  auto* sc = app.add_subcommand("score", "score a trial list");
  AddConfigOptions(sc, ov);
  sc->add_option("--checkpoint", ckpt)->required();
  sc->add_option("--manifest", manifest)->required();
  sc->add_option("--trials", trials)->required();
  sc->add_option("--out", out_file)->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "EER, EER* and minDCF from scores or end to end");
  AddConfigOptions(ev, ov);
  ev->add_option("--scores", ea.scores, "score file (label<TAB>score)");
  ev->add_option("--val-scores", ea.val_scores, "validation scores for the EER* threshold");
  ev->add_option("--checkpoint", ea.checkpoint);
  ev->add_option("--manifest", ea.manifest);
  ev->add_option("--trials", ea.trials);
  ev->add_option("--val-manifest", ea.val_manifest);
  ev->add_option("--val-trials", ea.val_trials);
  ev->add_option("--out-csv", ea.out_csv, "also write the report CSV here");

  ModelCheckOptions gco;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of model + AAM loss");
  AddConfigOptions(gc, ov);
  gc->add_option("--batch", gco.batch, "utterances in the check batch")->capture_default_str();
  gc->add_option("--frames", gco.frames, "frames per utterance")->capture_default_str();
  gc->add_option("--coords-per-param", gco.coords_per_param,
                 "sampled coordinates per tensor (0: all)")
      ->capture_default_str();
  gc->add_option("--eps", gco.eps, "first extrapolation step (central step with --central)")
      ->capture_default_str();
  gc->add_flag_callback("--central", [&gco] { gco.method = NumericMethod::kCentral; },
                        "single central difference instead of extrapolation");

  auto* pc = app.add_subcommand("param-count", "learnable parameters per module");
  AddConfigOptions(pc, ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const auto cfg = Resolve(ov);
    if (*gen) return CmdGenSynth(cfg, out_dir);
    if (*tr) return CmdTrain(cfg, data_dir);
    if (*emb) return CmdEmbed(cfg, ckpt, manifest, out_file);
    if (*sc) return CmdScore(cfg, ckpt, manifest, trials, out_file);
    if (*ev) return CmdEval(cfg, ea);
    if (*gc) return CmdGradCheck(cfg, gco);
    if (*pc) return CmdParamCount(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
