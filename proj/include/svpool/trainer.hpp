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

// Training loop with validation-EER model selection.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "svpool/autodiff.hpp"
#include "svpool/batch.hpp"
#include "svpool/error.hpp"
#include "svpool/feature_io.hpp"
#include "svpool/metrics.hpp"
#include "svpool/model.hpp"
#include "svpool/objectives.hpp"
#include "svpool/optim.hpp"
#include "svpool/text_io.hpp"

namespace svpool {

struct TrainConfig {
  std::size_t total_steps = 2000;
  double max_lr = 0.003;
  double warmup_frac = 0.10;
  std::size_t batch_size = 128;
  std::size_t crop_t = 150;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  std::filesystem::path checkpoint_dir = "run";
  double aam_scale = kAamScale;
  double aam_margin = kAamMargin;

  ScheduleConfig schedule() const { return {total_steps, max_lr, warmup_frac}; }

  void Validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) {
      throw UsageError("warmup_frac must lie in (0, 1)");
    }
    if (!(max_lr > 0.0)) throw UsageError("max_lr must be positive");
    if (batch_size < 1 || crop_t < 1) throw UsageError("batch_size and crop_t must be >= 1");
    if (eval_every < 1) throw UsageError("eval_every must be >= 1");
  }
};

// Features of one manifest split held in memory.
struct Split {
  Manifest manifest;
  std::vector<Tensor<float>> features;
  std::vector<int> labels;  // speaker class, in order of first appearance
  std::vector<std::string> speakers;
};

inline Split MakeSplit(Manifest manifest, std::vector<Tensor<float>> features) {
  Split s;
  s.manifest = std::move(manifest);
  s.features = std::move(features);
  std::unordered_map<std::string, int> cls;
  for (const auto& e : s.manifest.entries) {
    auto [it, fresh] = cls.emplace(e.speaker_id, static_cast<int>(s.speakers.size()));
    if (fresh) s.speakers.push_back(e.speaker_id);
    s.labels.push_back(it->second);
  }
  return s;
}

inline Split load_split(const std::filesystem::path& manifest_path) {
  auto m = read_manifest(manifest_path);
  CheckManifestPaths(m);
  std::vector<Tensor<float>> feats;
  for (const auto& e : m.entries) {
    auto x = read_feature(m.resolve(e));
    if (x.dim(2) != e.frames) {
      throw DataError("utterance '" + e.utterance_id + "': manifest says " +
                      std::to_string(e.frames) + " frames, file has " +
                      std::to_string(x.dim(2)));
    }
    feats.push_back(std::move(x));
  }
  return MakeSplit(std::move(m), std::move(feats));
}

inline void CheckSplitMatchesModel(const Split& s, const ModelConfig& cfg, const char* name) {
  for (std::size_t i = 0; i < s.features.size(); ++i) {
    const auto& x = s.features[i];
    if (x.dim(0) != cfg.input_c || x.dim(1) != cfg.input_l) {
      throw DataError(std::string(name) + " utterance '" + s.manifest.entries[i].utterance_id +
                      "' is " + x.shape().str() + " but the model expects input_c=" +
                      std::to_string(cfg.input_c) + ", input_l=" + std::to_string(cfg.input_l));
    }
  }
}

// Eval-mode embeddings, one full-length utterance at a time.
template <typename T>
std::vector<std::vector<float>> embed_all(Backend<T>& model,
                                          const std::vector<Tensor<float>>& features) {
  NoGradGuard guard;
  std::vector<std::vector<float>> out;
  out.reserve(features.size());
  for (const auto& x : features) {
    Tensor<T> batch = x.template cast<T>().reshaped(Shape{1, x.dim(0), x.dim(1), x.dim(2)});
    auto e = model.forward(batch, false);
    std::vector<float> v(e.value().numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(e.value()[i]);
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<ScoredTrial> score_trials(const std::vector<std::vector<float>>& embeddings,
                                             const std::vector<TrialPair>& trials) {
  std::vector<ScoredTrial> out;
  out.reserve(trials.size());
  for (const auto& t : trials) {
    const auto& a = embeddings.at(t.enroll);
    const auto& b = embeddings.at(t.test);
    out.push_back({cosine_score<float>(a, b), t.label});
  }
  return out;
}

struct LogRow {
  std::size_t step = 0;
  double lr = 0.0;
  std::optional<double> loss;
  std::optional<double> val_eer;
};

struct TrainResult {
  std::size_t best_step = 0;
  double best_val_eer = 0.0;
  double untrained_val_eer = 0.0;
  std::vector<LogRow> log;
  std::vector<ScoredTrial> val_scores;   // best checkpoint
  std::vector<ScoredTrial> test_scores;  // best checkpoint, empty without a test split
  std::optional<MetricReport> test_report;
  std::filesystem::path best_checkpoint;
};

inline void WriteLogHeader(std::ostream& os) { os << "step,lr,loss,val_eer\n"; }

inline void WriteLogRow(std::ostream& os, const LogRow& r) {
  os << r.step << ',' << FormatDouble(r.lr) << ',' << (r.loss ? FormatDouble(*r.loss) : "")
     << ',' << (r.val_eer ? FormatDouble(*r.val_eer) : "") << '\n';
  os.flush();
}

struct TrainData {
  const Split* train = nullptr;
  const Split* valid = nullptr;
  const std::vector<TrialPair>* valid_trials = nullptr;
  const Split* test = nullptr;  // optional
  const std::vector<TrialPair>* test_trials = nullptr;
};

// Runs total_steps Adam updates on the AAM-softmax loss, scoring the
// validation trials at step 0, every eval_every steps and at the end. The
// checkpoint with the lowest validation EER (earliest on ties) is kept as
// checkpoint_dir/best.ckpt and used for the final test report. Writes
// checkpoint_dir/metrics.csv as it goes.
inline TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const TrainData& data,
                         std::ostream* progress = nullptr) {
  tcfg.Validate();
  if (!data.train || !data.valid || !data.valid_trials) {
    throw UsageError("training needs train and valid splits with validation trials");
  }
  if (data.train->features.empty()) throw DataError("training manifest is empty");
  CheckSplitMatchesModel(*data.train, mcfg, "train");
  CheckSplitMatchesModel(*data.valid, mcfg, "valid");
  if (data.test) CheckSplitMatchesModel(*data.test, mcfg, "test");

  std::filesystem::create_directories(tcfg.checkpoint_dir);
  const auto best_path = tcfg.checkpoint_dir / "best.ckpt";
  const auto log_path = tcfg.checkpoint_dir / "metrics.csv";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write '" + log_path.string() + "'");
  WriteLogHeader(log);

  Backend<float> model(mcfg, tcfg.seed);
  AamHead<float> head(data.train->speakers.size(), mcfg.embed_dim, tcfg.seed + 1,
                      static_cast<float>(tcfg.aam_scale), static_cast<float>(tcfg.aam_margin));
  Adam<float> opt(LearnableParams<float>({&model.params(), &head.params()}));
  SpeakerBalancedSampler sampler(data.train->labels, tcfg.seed + 2);
  std::mt19937_64 crop_rng(tcfg.seed + 3);

  TrainResult res;
  res.best_checkpoint = best_path;
  auto validate = [&]() {
    auto emb = embed_all(model, data.valid->features);
    return eer(score_trials(emb, *data.valid_trials)).eer;
  };
  auto save_best = [&]() {
    write_checkpoint(best_path, CollectTensors<float>({&model.params(), &head.params()}));
  };

  {
    LogRow row{0, 0.0, std::nullopt, validate()};
    res.untrained_val_eer = *row.val_eer;
    res.best_val_eer = *row.val_eer;
    res.best_step = 0;
    save_best();
    WriteLogRow(log, row);
    res.log.push_back(row);
    if (progress) *progress << "step 0 val_eer " << *row.val_eer << std::endl;
  }

  const auto sched = tcfg.schedule();
  for (std::size_t step = 1; step <= tcfg.total_steps; ++step) {
    const double lr = one_cycle_lr(step, sched);
    auto picks = sampler.next(tcfg.batch_size);
    auto batch = assemble_batch(data.train->features, data.train->labels, picks, tcfg.crop_t,
                                crop_rng);
    opt.zero_grad();
    auto emb = model.forward(batch.x, true);
    auto loss = head.loss(emb, batch.labels);
    const double loss_v = static_cast<double>(loss.item());
    if (!std::isfinite(loss_v)) {
      throw NumericalError("loss diverged at step " + std::to_string(step) +
                           "; best checkpoint kept at " + best_path.string());
    }
    loss.backward();
    try {
      opt.step(lr);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step) +
                           "; best checkpoint kept at " + best_path.string());
    }
    LogRow row{step, lr, loss_v, std::nullopt};
    if (step % tcfg.eval_every == 0 || step == tcfg.total_steps) {
      row.val_eer = validate();
      if (*row.val_eer < res.best_val_eer) {
        res.best_val_eer = *row.val_eer;
        res.best_step = step;
        save_best();
      }
      if (progress) {
        *progress << "step " << step << " lr " << lr << " loss " << loss_v << " val_eer "
                  << *row.val_eer << std::endl;
      }
    }
    WriteLogRow(log, row);
    res.log.push_back(row);
  }

  RestoreTensors<float>(read_checkpoint(best_path), {&model.params(), &head.params()});
  res.val_scores = score_trials(embed_all(model, data.valid->features), *data.valid_trials);
  if (data.test && data.test_trials) {
    res.test_scores = score_trials(embed_all(model, data.test->features), *data.test_trials);
    res.test_report = evaluate_trials(res.test_scores, std::span<const ScoredTrial>(res.val_scores));
  }
  return res;
}

}  // namespace svpool
