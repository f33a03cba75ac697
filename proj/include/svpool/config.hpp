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

// Flat key=value run configuration. Every key has a default; files and
// command-line overrides may only set known keys.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "svpool/error.hpp"
#include "svpool/model.hpp"
#include "svpool/synth.hpp"
#include "svpool/text_io.hpp"
#include "svpool/trainer.hpp"
#include "svpool/trials.hpp"

namespace svpool {

enum class ValueKind { kSize, kDouble, kBool, kString, kPoolMode, kDoubleList };

struct ConfigKey {
  const char* name;
  ValueKind kind;
  const char* fallback;
  const char* help;
};

// Order here is the order of the emitted resolved config.
inline const std::vector<ConfigKey>& ConfigKeys() {
  static const std::vector<ConfigKey> keys = {
      // model
      {"input_c", ValueKind::kSize, "768", "hidden size of the input layer stack"},
      {"input_l", ValueKind::kSize, "13", "number of stacked layers"},
      {"c_backbone", ValueKind::kSize, "512", "backbone channels after the input projection"},
      {"d2_bottleneck", ValueKind::kSize, "128", "D2 bottleneck channels"},
      {"d2_layers", ValueKind::kSize, "4", "dense MDConv layers"},
      {"d2_growth", ValueKind::kSize, "128", "channels per MDConv layer"},
      {"kernel_h", ValueKind::kSize, "3", "MDConv kernel extent along layers"},
      {"kernel_w", ValueKind::kSize, "3", "MDConv kernel extent along frames"},
      {"heads", ValueKind::kSize, "4", "layer attention heads"},
      {"head_dim", ValueKind::kSize, "128", "channels per head"},
      {"asp_bottleneck", ValueKind::kSize, "128", "attentive statistics bottleneck"},
      {"embed_dim", ValueKind::kSize, "192", "speaker embedding size"},
      {"use_attn_vad", ValueKind::kBool, "true", "enable attentive VAD"},
      {"use_d2", ValueKind::kBool, "true", "enable the D2 block"},
      {"pool_mode", ValueKind::kPoolMode, "mca", "layer pooling: mca or superb"},
      // training
      {"total_steps", ValueKind::kSize, "2000", "optimizer steps"},
      {"max_lr", ValueKind::kDouble, "0.003", "one-cycle peak learning rate"},
      {"warmup_frac", ValueKind::kDouble, "0.1", "fraction of steps spent warming up"},
      {"batch_size", ValueKind::kSize, "128", "utterances per batch"},
      {"crop_t", ValueKind::kSize, "150", "frames per training crop"},
      {"seed", ValueKind::kSize, "0", "model init / sampling seed"},
      {"eval_every", ValueKind::kSize, "100", "steps between validation scoring"},
      {"checkpoint_dir", ValueKind::kString, "run", "output directory for training"},
      {"aam_scale", ValueKind::kDouble, "30", "AAM-softmax scale"},
      {"aam_margin", ValueKind::kDouble, "0.2", "AAM-softmax margin"},
      // synthetic corpus and trials
      {"data_seed", ValueKind::kSize, "0", "corpus and trial-list seed"},
      {"n_speakers", ValueKind::kSize, "96", "speakers in the synthetic corpus"},
      {"n_train_speakers", ValueKind::kSize, "64", "speakers in the train split"},
      {"n_valid_speakers", ValueKind::kSize, "16", "speakers in the valid split"},
      {"n_test_speakers", ValueKind::kSize, "16", "speakers in the test split"},
      {"utts_per_speaker", ValueKind::kSize, "8", "utterances per speaker"},
      {"t_min", ValueKind::kSize, "150", "shortest synthetic utterance"},
      {"t_max", ValueKind::kSize, "300", "longest synthetic utterance"},
      {"speaker_profile", ValueKind::kDoubleList, "", "per-layer speaker weight (empty: mid-layer bump)"},
      {"noise_sigma", ValueKind::kDouble, "0.3", "white noise level"},
      {"nuisance_rank", ValueKind::kSize, "4", "rank of the shared nuisance subspace"},
      {"nuisance_scale", ValueKind::kDouble, "1", "nuisance amplitude"},
      {"session_scale", ValueKind::kDouble, "1", "per-utterance nuisance offset scale"},
      {"target_pos_ratio", ValueKind::kDouble, "0.5", "share of target trials"},
      {"max_positives", ValueKind::kSize, "0", "cap on target trials (0: all)"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : ConfigKeys()) values_[k.name] = k.fallback;
  }

  static const ConfigKey* Find(std::string_view key) {
    for (const auto& k : ConfigKeys()) {
      if (key == k.name) return &k;
    }
    return nullptr;
  }

  // Validates the key and the value's syntax.
  void set(const std::string& key, const std::string& value) {
    const auto* k = Find(key);
    if (!k) throw UsageError("unknown config key '" + key + "'");
    CheckValue(*k, value);
    values_[key] = value;
  }

  // Lines of key=value; '#' starts a comment.
  void load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config '" + path.string() + "'");
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto e = line.find_last_not_of(" \t\r");
      line = line.substr(b, e - b + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key=value");
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      try {
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const UsageError& err) {
        throw UsageError(path.string() + ":" + std::to_string(n) + ": " + err.what());
      }
    }
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    return it->second;
  }

  std::size_t get_size(const std::string& key) const {
    std::size_t v = 0;
    ParseSize(get(key), v);
    return v;
  }
  double get_double(const std::string& key) const {
    double v = 0;
    ParseDouble(get(key), v);
    return v;
  }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }
  std::vector<double> get_list(const std::string& key) const {
    std::vector<double> out;
    std::string_view s = get(key);
    while (!s.empty()) {
      const auto comma = s.find(',');
      double v = 0;
      ParseDouble(s.substr(0, comma), v);
      out.push_back(v);
      s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
    }
    return out;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.input_c = get_size("input_c");
    m.input_l = get_size("input_l");
    m.c_backbone = get_size("c_backbone");
    m.d2_bottleneck = get_size("d2_bottleneck");
    m.d2_layers = get_size("d2_layers");
    m.d2_growth = get_size("d2_growth");
    m.kernel_h = get_size("kernel_h");
    m.kernel_w = get_size("kernel_w");
    m.heads = get_size("heads");
    m.head_dim = get_size("head_dim");
    m.asp_bottleneck = get_size("asp_bottleneck");
    m.embed_dim = get_size("embed_dim");
    m.use_attn_vad = get_bool("use_attn_vad");
    m.use_d2 = get_bool("use_d2");
    m.pool_mode = get("pool_mode") == "mca" ? PoolMode::kMca : PoolMode::kSuperb;
    try {
      m.Validate();
    } catch (const ShapeError& e) {
      throw UsageError(std::string("invalid model config: ") + e.what());
    }
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.total_steps = get_size("total_steps");
    t.max_lr = get_double("max_lr");
    t.warmup_frac = get_double("warmup_frac");
    t.batch_size = get_size("batch_size");
    t.crop_t = get_size("crop_t");
    t.seed = get_size("seed");
    t.eval_every = get_size("eval_every");
    t.checkpoint_dir = get("checkpoint_dir");
    t.aam_scale = get_double("aam_scale");
    t.aam_margin = get_double("aam_margin");
    t.Validate();
    return t;
  }

  SyntheticSpec synth() const {
    SyntheticSpec s;
    s.n_speakers = get_size("n_speakers");
    s.utts_per_speaker = get_size("utts_per_speaker");
    s.c = get_size("input_c");
    s.l = get_size("input_l");
    s.t_min = get_size("t_min");
    s.t_max = get_size("t_max");
    s.profile = get_list("speaker_profile");
    s.noise_sigma = get_double("noise_sigma");
    s.nuisance_rank = get_size("nuisance_rank");
    s.nuisance_scale = get_double("nuisance_scale");
    s.session_scale = get_double("session_scale");
    s.seed = get_size("data_seed");
    return s;
  }

  // Speaker-disjoint train/valid/test partition of the synthetic corpus.
  struct SplitSizes {
    std::size_t train, valid, test;
  };
  SplitSizes splits() const {
    const SplitSizes s{get_size("n_train_speakers"), get_size("n_valid_speakers"),
                       get_size("n_test_speakers")};
    const std::size_t n = get_size("n_speakers");
    if (n < 2) throw UsageError("n_speakers must be >= 2 (trials need two speakers)");
    if (s.train + s.valid + s.test != n) {
      throw UsageError("n_train_speakers + n_valid_speakers + n_test_speakers = " +
                       std::to_string(s.train + s.valid + s.test) + " but n_speakers = " +
                       std::to_string(n));
    }
    if (s.train < 2 || s.valid < 2 || s.test < 2) {
      throw UsageError("every split needs at least 2 speakers");
    }
    if (get_size("utts_per_speaker") < 2) {
      throw UsageError("utts_per_speaker must be >= 2 (positives need two utterances)");
    }
    return s;
  }

  TrialOptions trials() const {
    TrialOptions t;
    t.target_pos_ratio = get_double("target_pos_ratio");
    t.seed = get_size("data_seed");
    t.max_positives = get_size("max_positives");
    return t;
  }

  void write(std::ostream& os) const {
    for (const auto& k : ConfigKeys()) os << k.name << " = " << values_.at(k.name) << '\n';
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write '" + path.string() + "'");
    write(os);
  }

 private:
  static void CheckValue(const ConfigKey& k, const std::string& v) {
    auto bad = [&](const char* what) {
      throw UsageError(std::string("config key '") + k.name + "' expects " + what + ", got '" +
                       v + "'");
    };
    switch (k.kind) {
      case ValueKind::kSize: {
        std::size_t x;
        if (!ParseSize(v, x)) bad("a non-negative integer");
        break;
      }
      case ValueKind::kDouble: {
        double x;
        if (!ParseDouble(v, x) || !std::isfinite(x)) bad("a finite number");
        break;
      }
      case ValueKind::kBool:
        if (v != "true" && v != "false") bad("true or false");
        break;
      case ValueKind::kPoolMode:
        if (v != "mca" && v != "superb") bad("mca or superb");
        break;
      case ValueKind::kDoubleList: {
        std::string_view s = v;
        while (!s.empty()) {
          const auto comma = s.find(',');
          double x;
          if (!ParseDouble(s.substr(0, comma), x)) bad("a comma-separated list of numbers");
          s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
        }
        break;
      }
      case ValueKind::kString:
        if (v.empty()) bad("a non-empty string");
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

// The configured synthetic corpus cut into speaker-disjoint train/valid/test
// splits, with trial lists for valid and test.
struct SyntheticSplits {
  SyntheticCorpus corpus;
  std::array<Manifest, 3> manifests;  // train, valid, test
  std::array<std::vector<SpeakerAttr>, 3> speakers;
  std::array<std::vector<Tensor<float>>, 3> features;
  std::vector<TrialPair> valid_trials, test_trials;
};

inline constexpr const char* kSplitNames[3] = {"train", "valid", "test"};

inline SyntheticSplits make_synthetic_splits(const RunConfig& cfg,
                                             const std::filesystem::path& base_dir = {}) {
  const auto sizes = cfg.splits();
  const auto spec = cfg.synth();
  SyntheticSplits out;
  out.corpus = synth_dataset(spec);
  const std::size_t upp = spec.utts_per_speaker;
  const std::size_t bounds[4] = {0, sizes.train, sizes.train + sizes.valid, spec.n_speakers};
  for (std::size_t s = 0; s < 3; ++s) {
    const auto first = static_cast<std::ptrdiff_t>(bounds[s] * upp);
    const auto last = static_cast<std::ptrdiff_t>(bounds[s + 1] * upp);
    auto& m = out.manifests[s];
    m.base_dir = base_dir;
    m.entries.assign(out.corpus.entries.begin() + first, out.corpus.entries.begin() + last);
    out.features[s].assign(out.corpus.features.begin() + first,
                           out.corpus.features.begin() + last);
    out.speakers[s].assign(out.corpus.speakers.begin() + static_cast<std::ptrdiff_t>(bounds[s]),
                           out.corpus.speakers.begin() + static_cast<std::ptrdiff_t>(bounds[s + 1]));
    if (s == 0) continue;
    auto opts = cfg.trials();
    opts.seed += s;
    (s == 1 ? out.valid_trials : out.test_trials) = build_trials(out.speakers[s], m.entries, opts);
  }
  return out;
}

}  // namespace svpool
