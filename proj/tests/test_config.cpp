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


#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"

namespace svpool {
namespace {

using testing::TempDir;

TEST(RunConfig, DefaultsMatchTheLibraryDefaults) {
  RunConfig cfg;
  const ModelConfig m = cfg.model();
  const ModelConfig ref;
  EXPECT_EQ(m.input_c, ref.input_c);
  EXPECT_EQ(m.c_backbone, ref.c_backbone);
  EXPECT_EQ(m.embed_dim, 192u);
  EXPECT_TRUE(m.use_attn_vad);
  EXPECT_TRUE(m.use_d2);
  EXPECT_EQ(m.pool_mode, PoolMode::kMca);
  const TrainConfig t = cfg.train();
  EXPECT_EQ(t.total_steps, 2000u);
  EXPECT_EQ(t.max_lr, 0.003);
  EXPECT_EQ(t.batch_size, 128u);
  EXPECT_EQ(t.crop_t, 150u);
  EXPECT_EQ(t.aam_scale, 30.0);
  EXPECT_EQ(t.aam_margin, 0.2);
  const auto s = cfg.splits();
  EXPECT_EQ(s.train + s.valid + s.test, 96u);
  EXPECT_TRUE(cfg.synth().profile.empty());
}

TEST(RunConfig, FileThenOverrides) {
  TempDir dir("cfg");
  {
    std::ofstream os(dir / "a.cfg");
    os << "# comment\n\n  input_c = 32  \npool_mode=superb # trailing\nspeaker_profile=0,1,0.5\n";
  }
  RunConfig cfg;
  cfg.load_file(dir / "a.cfg");
  cfg.set("input_c", "48");
  EXPECT_EQ(cfg.get_size("input_c"), 48u);
  EXPECT_EQ(cfg.model().pool_mode, PoolMode::kSuperb);
  EXPECT_EQ(cfg.get_list("speaker_profile"), (std::vector<double>{0, 1, 0.5}));
}

TEST(RunConfig, UnknownKeysAndBadValuesAreUsageErrors) {
  RunConfig cfg;
  EXPECT_THROW(cfg.set("input_channels", "3"), UsageError);
  EXPECT_THROW(cfg.set("input_c", "-3"), UsageError);
  EXPECT_THROW(cfg.set("input_c", "3.5"), UsageError);
  EXPECT_THROW(cfg.set("max_lr", "nan"), UsageError);
  EXPECT_THROW(cfg.set("use_d2", "yes"), UsageError);
  EXPECT_THROW(cfg.set("pool_mode", "mean"), UsageError);
  EXPECT_THROW(cfg.set("speaker_profile", "1,,2"), UsageError);
  EXPECT_THROW(cfg.set("checkpoint_dir", ""), UsageError);

  TempDir dir("cfg");
  {
    std::ofstream os(dir / "b.cfg");
    os << "input_c=32\nbogus=1\n";
  }
  try {
    cfg.load_file(dir / "b.cfg");
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("b.cfg:2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(cfg.load_file(dir / "missing.cfg"), UsageError);
}

TEST(RunConfig, InvalidCombinationsAreUsageErrors) {
  RunConfig cfg;
  cfg.set("head_dim", "64");
  EXPECT_THROW(cfg.model(), UsageError);
  cfg = RunConfig{};
  cfg.set("n_speakers", "1");
  EXPECT_THROW(cfg.splits(), UsageError);
  cfg = RunConfig{};
  cfg.set("n_train_speakers", "63");
  EXPECT_THROW(cfg.splits(), UsageError);
  cfg = RunConfig{};
  cfg.set("utts_per_speaker", "1");
  EXPECT_THROW(cfg.splits(), UsageError);
  cfg = RunConfig{};
  cfg.set("warmup_frac", "1");
  EXPECT_THROW(cfg.train(), UsageError);
}

TEST(RunConfig, WrittenConfigReloadsToTheSameValues) {
  RunConfig cfg;
  cfg.set("input_c", "24");
  cfg.set("use_attn_vad", "false");
  cfg.set("speaker_profile", "0.25,1");
  std::ostringstream first;
  cfg.write(first);
  for (const auto& k : ConfigKeys()) {
    EXPECT_NE(first.str().find(std::string(k.name) + " = "), std::string::npos) << k.name;
  }
  TempDir dir("cfg");
  cfg.write(dir / "r.cfg");
  RunConfig back;
  back.load_file(dir / "r.cfg");
  std::ostringstream second;
  back.write(second);
  EXPECT_EQ(first.str(), second.str());
}

}  // namespace
}  // namespace svpool
