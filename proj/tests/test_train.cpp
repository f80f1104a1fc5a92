#include "uoe/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "uoe/checkpoint.hpp"
#include "uoe/corpus.hpp"
#include "uoe/model.hpp"

using uoe::ArrayRecord;
using uoe::DenseModel;
using uoe::DenseTrainer;
using uoe::RoutingMode;
using uoe::StepMetrics;
using uoe::TrainConfig;
using uoe::Trainer;
using uoe::UoeModel;
using uoe::UoeModelConfig;
using uoe::UoeTrainer;

namespace {

UoeModelConfig train_test_config() {
  UoeModelConfig cfg;
  cfg.layers = 1;
  cfg.d = 16;
  cfg.n_a = 2;
  cfg.d_h = 8;
  cfg.n_m = 2;
  cfg.d_e = 16;
  cfg.l_p = 4;
  cfg.k_attn = 1;
  cfg.k_mlp = 1;
  cfg.vocab_size = 256;
  cfg.max_len = 32;
  cfg.gate_hidden = 8;
  cfg.seed = 7;
  return cfg;
}

std::vector<std::uint8_t> repeated_pattern_corpus(std::size_t copies) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(copies * 64);
  for (std::size_t r = 0; r < copies; ++r)
    for (std::size_t i = 0; i < 64; ++i)
      bytes.push_back(static_cast<std::uint8_t>((i * 37 + 11) % 256));
  return bytes;
}

void make_shift_batch(std::size_t b, std::size_t l,
                      std::vector<std::size_t>& inputs,
                      std::vector<std::size_t>& targets) {
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < l; ++i) {
      inputs.push_back((s * 31 + i * 7 + 3) % 256);
      targets.push_back((s * 31 + i * 7 + 10) % 256);
    }
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(static_cast<bool>(f)) << path;
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
}

std::string temp_path(const std::string& leaf) {
  return testing::TempDir() + leaf;
}

// ---------------------------------------------------------------------------
// Corpus windowing and the unigram baseline.

TEST(Corpus, WindowsAreContiguousWithShiftedTargets) {
  std::vector<std::uint8_t> bytes;
  for (std::uint8_t i = 0; i < 10; ++i) bytes.push_back(i);
  EXPECT_EQ(uoe::window_count(bytes.size(), 4), 2u);
  std::vector<std::size_t> in, tg;
  uoe::fill_window(bytes, 4, 0, in, tg);
  uoe::fill_window(bytes, 4, 1, in, tg);
  EXPECT_EQ(in, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(tg, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_THROW(uoe::fill_window(bytes, 4, 2, in, tg), uoe::BoundsError);
}

TEST(Corpus, ExactWindowFitNeedsTheLookaheadByte) {
  EXPECT_EQ(uoe::window_count(8, 4), 1u);   // second window lacks a target
  EXPECT_EQ(uoe::window_count(9, 4), 2u);
  EXPECT_EQ(uoe::window_count(4, 4), 0u);
  EXPECT_EQ(uoe::window_count(5, 4), 1u);
}

TEST(Corpus, UnigramBaselineMatchesClosedForms) {
  std::vector<std::uint8_t> uniform;
  for (int i = 0; i < 256; ++i) uniform.push_back(std::uint8_t(i));
  EXPECT_NEAR(uoe::unigram_baseline_ppl(uniform), 256.0, 1e-9);
  EXPECT_NEAR(uoe::unigram_baseline_ppl({65, 65, 65, 65}), 1.0, 1e-12);
  EXPECT_NEAR(uoe::unigram_baseline_ppl({65, 66, 65, 66}), 2.0, 1e-12);
}

TEST(Corpus, MissingFileIsRejected) {
  EXPECT_THROW(uoe::load_corpus_bytes("/nonexistent/corpus.bin"),
               uoe::FormatError);
}

// ---------------------------------------------------------------------------
// Checkpoint container format.

TEST(CheckpointFormat, RoundTripPreservesEveryByte) {
  std::vector<ArrayRecord> arrays;
  arrays.push_back(uoe::record_from_values<double>(
      "weights", {2, 3}, {0.5, -1.25, 3.75, 0.0, -0.0, 1e300}));
  arrays.push_back(
      uoe::record_from_values<float>("bias", {4}, {1.5f, -2.5f, 0.0f, 3e8f}));
  arrays.push_back(uoe::record_from_u64("counter", 0x0123456789abcdefULL));

  const auto bytes = uoe::serialize_checkpoint(arrays);
  const auto back = uoe::deserialize_checkpoint(bytes);
  ASSERT_EQ(back.size(), arrays.size());
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    EXPECT_EQ(back[i].name, arrays[i].name);
    EXPECT_EQ(back[i].dims, arrays[i].dims);
    EXPECT_EQ(back[i].dtype, arrays[i].dtype);
    EXPECT_EQ(back[i].raw, arrays[i].raw);
  }
  EXPECT_EQ(uoe::serialize_checkpoint(back), bytes);
  EXPECT_EQ(uoe::u64_from_record(back[2]), 0x0123456789abcdefULL);
  const auto w = uoe::values_from_record<double>(back[0]);
  EXPECT_EQ(w[5], 1e300);
  EXPECT_TRUE(std::signbit(w[4]));
}

TEST(CheckpointFormat, ExtremeU64ValuesSurvive) {
  for (std::uint64_t v :
       {std::uint64_t{0}, std::uint64_t{1}, (std::uint64_t{1} << 53) + 1,
        std::numeric_limits<std::uint64_t>::max()}) {
    EXPECT_EQ(uoe::u64_from_record(uoe::record_from_u64("v", v)), v);
  }
}

TEST(CheckpointFormat, CorruptMagicIsRejected) {
  auto bytes = uoe::serialize_checkpoint(
      {uoe::record_from_values<double>("a", {1}, {1.0})});
  bytes[0] = 'X';
  try {
    uoe::deserialize_checkpoint(bytes);
    FAIL() << "corrupt magic was accepted";
  } catch (const uoe::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(CheckpointFormat, BitFlipFailsTheChecksum) {
  auto bytes = uoe::serialize_checkpoint(
      {uoe::record_from_values<double>("a", {2}, {1.0, 2.0})});
  bytes[bytes.size() / 2] ^= 0x40;
  try {
    uoe::deserialize_checkpoint(bytes);
    FAIL() << "bit flip was accepted";
  } catch (const uoe::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }
}

TEST(CheckpointFormat, TruncationIsRejected) {
  auto bytes = uoe::serialize_checkpoint(
      {uoe::record_from_values<double>("a", {2}, {1.0, 2.0})});
  bytes.resize(bytes.size() - 6);
  EXPECT_THROW(uoe::deserialize_checkpoint(bytes), uoe::FormatError);
}

TEST(CheckpointFormat, DtypeTagMustMatchTheRequestedType) {
  const auto rec = uoe::record_from_values<double>("a", {1}, {1.0});
  EXPECT_THROW(uoe::values_from_record<float>(rec), uoe::FormatError);
}

// ---------------------------------------------------------------------------
// Optimizer steps.

TEST(TrainStep, ZeroLearningRateLeavesParametersBitIdentical) {
  TrainConfig tc;
  tc.adam.lr = 0.0;
  UoeTrainer<double> trainer(UoeModel<double>::init(train_test_config()), tc);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : trainer.model().parameters())
    before.push_back(t.data());
  std::vector<std::size_t> in, tg;
  make_shift_batch(2, 16, in, tg);
  trainer.train_step(in, tg, 2);
  auto after = trainer.model().parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    EXPECT_EQ(after[i].second.data(), before[i])
        << "parameter " << after[i].first;
}

TEST(TrainStep, LossDropsOverAFewSteps) {
  TrainConfig tc;
  tc.adam.lr = 3e-3;
  UoeTrainer<double> trainer(UoeModel<double>::init(train_test_config()), tc);
  std::vector<std::size_t> in, tg;
  make_shift_batch(2, 16, in, tg);
  const double first = trainer.train_step(in, tg, 2).nll;
  double last = first;
  for (int i = 0; i < 24; ++i) last = trainer.train_step(in, tg, 2).nll;
  EXPECT_LT(last, first - 0.5);
}

TEST(TrainStep, MemorizesARepeatedPatternWithinTwoHundredSteps) {
  auto cfg = train_test_config();
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 4;
  tc.seq_len = 32;
  tc.adam.lr = 3e-3;
  tc.data_seed = 99;
  UoeTrainer<double> trainer(UoeModel<double>::init(cfg), tc);
  const auto corpus = repeated_pattern_corpus(32);
  const auto history = trainer.run(corpus, "", "");
  ASSERT_EQ(history.size(), 200u);
  EXPECT_LT(history.back().second.ppl, 2.0);

  // Smoothed by a window of 20, the loss should never move up materially.
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 20 <= history.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = i; j < i + 20; ++j) acc += history[j].second.nll;
    smooth.push_back(acc / 20.0);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i)
    EXPECT_LT(smooth[i], smooth[i - 1] + 0.01) << "at step " << i;
  EXPECT_LT(smooth.back(), smooth.front());
}

TEST(TrainStep, AccumulatedGradientsMatchTheSingleLargeBatch) {
  auto cfg = train_test_config();
  std::vector<std::size_t> in, tg;
  make_shift_batch(4, 16, in, tg);
  const std::vector<std::size_t> in_a(in.begin(), in.begin() + 32),
      tg_a(tg.begin(), tg.begin() + 32), in_b(in.begin() + 32, in.end()),
      tg_b(tg.begin() + 32, tg.end());

  for (RoutingMode mode : {RoutingMode::kData, RoutingMode::kExpert}) {
    cfg.attn_mode = cfg.mlp_mode = mode;
    cfg.max_len = 16;
    if (mode == RoutingMode::kExpert) cfg.alpha = 0.0;
    TrainConfig tc;
    UoeTrainer<double> whole(UoeModel<double>::init(cfg), tc);
    UoeTrainer<double> accum(UoeModel<double>::init(cfg), tc);

    whole.train_step(in, tg, 4);
    accum.micro_step(in_a, tg_a, 2, 0.5);
    accum.micro_step(in_b, tg_b, 2, 0.5);
    accum.apply_update();

    auto pw = whole.model().parameters();
    auto pa = accum.model().parameters();
    for (std::size_t i = 0; i < pw.size(); ++i) {
      const auto& a = pw[i].second.data();
      const auto& b = pa[i].second.data();
      for (std::size_t j = 0; j < a.size(); ++j)
        ASSERT_NEAR(a[j], b[j], 1e-10)
            << pw[i].first << "[" << j << "] mode " << uoe::to_string(mode);
    }
  }
}

TEST(TrainStep, NonFiniteLossHaltsWithGatingDiagnostics) {
  TrainConfig tc;
  UoeTrainer<double> trainer(UoeModel<double>::init(train_test_config()), tc);
  trainer.model().embedding.mutable_data()[0] =
      std::numeric_limits<double>::infinity();
  std::vector<std::size_t> in(32, 0), tg(32, 1);
  try {
    trainer.train_step(in, tg, 2);
    FAIL() << "non-finite loss did not halt";
  } catch (const uoe::TrainingHaltError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite loss"), std::string::npos);
    EXPECT_NE(msg.find("block 0 attn"), std::string::npos);
    EXPECT_NE(msg.find("loads=["), std::string::npos);
  }
}

TEST(TrainStep, MetricsReportLoadEntropyAndFlopsRatio) {
  auto cfg = train_test_config();
  cfg.attn_mode = cfg.mlp_mode = RoutingMode::kFull;
  TrainConfig tc;
  UoeTrainer<double> trainer(UoeModel<double>::init(cfg), tc);
  std::vector<std::size_t> in, tg;
  make_shift_batch(2, 16, in, tg);
  const auto m = trainer.train_step(in, tg, 2);
  // Full activation: every patch picks both experts, so loads are even.
  EXPECT_NEAR(m.expert_load_entropy, std::log(2.0), 1e-12);
  EXPECT_GT(m.flops_ratio, 1.0);
  EXPECT_GT(m.lbal, 0.0);

  DenseTrainer<double> dense(DenseModel<double>::init(cfg), tc);
  const auto md = dense.train_step(in, tg, 2);
  EXPECT_EQ(md.flops_ratio, 1.0);
  EXPECT_EQ(md.expert_load_entropy, 0.0);
  EXPECT_EQ(md.lbal, 0.0);
}

// ---------------------------------------------------------------------------
// Trainer checkpoints.

TEST(TrainerCheckpoint, SaveLoadSaveProducesIdenticalBytes) {
  TrainConfig tc;
  tc.steps = 3;
  tc.batch_size = 2;
  tc.seq_len = 16;
  UoeTrainer<double> a(UoeModel<double>::init(train_test_config()), tc);
  const auto corpus = repeated_pattern_corpus(8);
  a.run(corpus, "", "");
  const auto path1 = temp_path("ckpt_a.uoe");
  const auto path2 = temp_path("ckpt_b.uoe");
  a.save(path1);

  UoeTrainer<double> b(UoeModel<double>::init(train_test_config()), tc);
  b.load(path1);
  b.save(path2);
  EXPECT_EQ(slurp(path1), slurp(path2));
  EXPECT_EQ(b.step(), 3u);
}

TEST(TrainerCheckpoint, ForwardAfterRoundTripIsBitIdentical) {
  TrainConfig tc;
  tc.steps = 2;
  tc.batch_size = 2;
  tc.seq_len = 16;
  UoeTrainer<double> a(UoeModel<double>::init(train_test_config()), tc);
  const auto corpus = repeated_pattern_corpus(8);
  a.run(corpus, "", "");
  const auto path = temp_path("ckpt_replay.uoe");
  a.save(path);

  UoeTrainer<double> b(UoeModel<double>::init(train_test_config()), tc);
  b.load(path);
  std::vector<std::size_t> in, tg;
  make_shift_batch(2, 16, in, tg);
  const auto la = a.model().forward(in, 2);
  const auto lb = b.model().forward(in, 2);
  EXPECT_EQ(la.logits.data(), lb.logits.data());
  EXPECT_EQ(la.balance.data(), lb.balance.data());
}

TEST(TrainerCheckpoint, ResumedRunContinuesTheExactTrajectory) {
  const auto corpus = repeated_pattern_corpus(16);
  TrainConfig six;
  six.steps = 6;
  six.batch_size = 2;
  six.seq_len = 16;
  UoeTrainer<double> whole(UoeModel<double>::init(train_test_config()), six);
  const auto full_history = whole.run(corpus, "", "");

  TrainConfig three = six;
  three.steps = 3;
  UoeTrainer<double> first(UoeModel<double>::init(train_test_config()), three);
  first.run(corpus, "", "");
  const auto path = temp_path("ckpt_resume.uoe");
  first.save(path);

  UoeTrainer<double> second(UoeModel<double>::init(train_test_config()),
                            three);
  second.load(path);
  const auto tail = second.run(corpus, "", "");
  ASSERT_EQ(tail.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(tail[i].second.nll, full_history[3 + i].second.nll);
    EXPECT_EQ(tail[i].second.lbal, full_history[3 + i].second.lbal);
  }
}

TEST(TrainerCheckpoint, MissingArrayIsRejected) {
  TrainConfig tc;
  UoeTrainer<double> a(UoeModel<double>::init(train_test_config()), tc);
  const auto path = temp_path("ckpt_missing.uoe");
  a.save(path);
  auto arrays = uoe::read_checkpoint(path);
  arrays.pop_back();  // drop the rng counter
  uoe::write_checkpoint(path, arrays);
  UoeTrainer<double> b(UoeModel<double>::init(train_test_config()), tc);
  EXPECT_THROW(b.load(path), uoe::FormatError);
}

// ---------------------------------------------------------------------------
// Determinism of a full run.

TEST(Determinism, SameSeedProducesIdenticalCsvAndCheckpointBytes) {
  const auto corpus = repeated_pattern_corpus(16);
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 2;
  tc.seq_len = 16;
  const auto csv1 = temp_path("run1.csv"), csv2 = temp_path("run2.csv");
  const auto ck1 = temp_path("run1.uoe"), ck2 = temp_path("run2.uoe");

  UoeTrainer<double> t1(UoeModel<double>::init(train_test_config()), tc);
  t1.run(corpus, csv1, ck1);
  UoeTrainer<double> t2(UoeModel<double>::init(train_test_config()), tc);
  t2.run(corpus, csv2, ck2);

  const auto c1 = slurp(csv1), c2 = slurp(csv2);
  EXPECT_FALSE(c1.empty());
  EXPECT_EQ(c1, c2);
  EXPECT_EQ(slurp(ck1), slurp(ck2));

  // Header plus one row per step, comma-separated.
  const std::string text(c1.begin(), c1.end());
  EXPECT_EQ(text.rfind("step,nll,ppl,lbal,expert_load_entropy,flops_ratio\n",
                       0),
            0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
}

}  // namespace
