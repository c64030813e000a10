#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "echwr/trainer.hpp"
#include "test_util.hpp"

using namespace echwr;

namespace {

TrainConfig schedule_cfg() {
  TrainConfig c;
  c.epochs = 300;
  c.warmup_epochs = 30;
  c.lr_primary = 1e-3;
  c.lr_aux = 2.5e-4;
  return c;
}

// Closed-form schedule written out independently.
double schedule_oracle(double e, double peak, double W, double E) {
  if (e < W) return peak * e / W;
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * (e - W) / (E - W)));
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = 1;
  c.batch_size = 16;
  c.aux_dim = 16;
  c.aux_heads = 2;
  c.text_layers = 1;
  c.ffn_hidden = 32;
  c.num_registers = 2;
  c.text_max_len = 32;
  c.seed = 11;
  return c;
}

Dataset tiny_data(std::size_t samples) {
  SynthConfig s;
  s.words = {"ab", "ba", "abc"};
  s.writers = 2;
  s.samples = samples;
  s.channels = 4;
  s.seed = 3;
  return synth_generate(s);
}

}  // namespace

TEST(Schedule, ClosedFormPoints) {
  const auto c = schedule_cfg();
  EXPECT_EQ(lr_at(0, LrGroup::primary, c), 0.0);
  EXPECT_NEAR(lr_at(30, LrGroup::primary, c), 1e-3, 1e-12);
  EXPECT_NEAR(lr_at(30, LrGroup::aux, c), 2.5e-4, 1e-12);
  EXPECT_NEAR(lr_at(165, LrGroup::primary, c), 5e-4, 1e-12);
  EXPECT_NEAR(lr_at(300, LrGroup::primary, c), 0.0, 1e-12);
  EXPECT_NEAR(lr_at(15, LrGroup::primary, c), 5e-4, 1e-12);
}

TEST(Schedule, MatchesOracleAndIsContinuousAtWarmupEnd) {
  const auto c = schedule_cfg();
  for (double e = 0; e <= 300; e += 0.37)
    EXPECT_NEAR(lr_at(e, LrGroup::primary, c), schedule_oracle(e, 1e-3, 30, 300), 1e-15) << e;
  const double left = lr_at(std::nextafter(30.0, 0.0), LrGroup::primary, c);
  const double right = lr_at(std::nextafter(30.0, 1e9), LrGroup::primary, c);
  EXPECT_NEAR(left, 1e-3, 1e-12);
  EXPECT_NEAR(right, 1e-3, 1e-12);
  for (double e = 0; e <= 300; e += 1) EXPECT_GE(lr_at(e, LrGroup::aux, c), 0.0);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  ParamStore<double> s;
  s.add("sensor.w", Group::primary, Tensor<double>::from({3}, {1.0, -2.0, 0.5}));
  s.add("aux.w", Group::auxiliary, Tensor<double>::from({2}, {4.0, -1.0}));
  AdamW<double> opt(s, 1e-2);
  opt.step(1e-3, 2.5e-4);
  const auto p = s.find("sensor.w")->value.data();
  const auto a = s.find("aux.w")->value.data();
  EXPECT_EQ(p[0], 1.0 * (1.0 - 1e-3 * 1e-2));
  EXPECT_EQ(p[1], -2.0 * (1.0 - 1e-3 * 1e-2));
  EXPECT_EQ(a[0], 4.0 * (1.0 - 2.5e-4 * 1e-2));
  EXPECT_EQ(a[1], -1.0 * (1.0 - 2.5e-4 * 1e-2));
}

TEST(AdamW, FirstStepMovesByLearningRateAgainstGradient) {
  // Bias-corrected first step: m_hat / sqrt(v_hat) = sign(g).
  ParamStore<double> s;
  auto w = s.add("sensor.w", Group::primary, Tensor<double>::from({2}, {1.0, 1.0}));
  auto loss = sum_all(mul(w, Tensor<double>::from({2}, {3.0, -0.5})));
  backward(loss);
  AdamW<double> opt(s, 0.0);
  opt.step(0.1, 0.1);
  EXPECT_NEAR(s.find("sensor.w")->value.data()[0], 0.9, 1e-7);
  EXPECT_NEAR(s.find("sensor.w")->value.data()[1], 1.1, 1e-7);
}

TEST(GradClip, ScalesToMaxNorm) {
  ParamStore<double> s;
  auto w = s.add("sensor.w", Group::primary, Tensor<double>::from({2}, {0.0, 0.0}));
  backward(sum_all(mul(w, Tensor<double>::from({2}, {3.0, 4.0}))));
  EXPECT_DOUBLE_EQ(clip_grad_norm(s, 1.0), 5.0);
  const auto g = s.find("sensor.w")->value.grad();
  EXPECT_NEAR(g[0], 0.6, 1e-12);
  EXPECT_NEAR(g[1], 0.8, 1e-12);
}

TEST(TrainConfig, TextRoundTripAndValidation) {
  TrainConfig c = tiny_train(7);
  c.norm_kind = NormKind::rms;
  c.objectives = ObjectiveFlags::parse("ctc+bc");
  c.lr_aux = 1.0 / 3.0 * 1e-4;
  TrainConfig back;
  back.apply_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.lr_aux, c.lr_aux);

  TrainConfig bad;
  EXPECT_THROW(bad.set("nope", "1"), ConfigError);
  EXPECT_THROW(bad.set("epochs", "-3"), ConfigError);
  EXPECT_THROW(bad.set("gated", "maybe"), ConfigError);
  bad.warmup_epochs = bad.epochs;
  EXPECT_THROW(bad.validate(), ConfigError);
  TrainConfig lr;
  lr.lr_aux = 1.0;
  EXPECT_THROW(lr.validate(), ConfigError);
  TrainConfig defaults;
  EXPECT_NO_THROW(defaults.validate());
  EXPECT_EQ(defaults.epochs, 300u);
  EXPECT_EQ(defaults.batch_size, 64u);
  EXPECT_EQ(defaults.warmup_epochs, 30u);
  EXPECT_EQ(defaults.weight_decay, 1e-2);
  EXPECT_EQ(defaults.lr_primary, 1e-3);
  EXPECT_EQ(defaults.lr_aux, 2.5e-4);
  EXPECT_EQ(defaults.error_sets, 2u);
}

TEST(Train, TwoEpochSmokeWritesMetrics) {
  const auto data = tiny_data(64);
  const auto r = train<float>(data.records, {}, data.channels, tiny_train(2));
  ASSERT_EQ(r.epochs.size(), 2u);
  std::istringstream is(r.epochs_csv);
  std::string line;
  std::size_t rows = 0;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,l_ctc,l_bc,l_ec,l_total,tau,lr_primary,lr_aux,val_cer,val_wer");
  while (std::getline(is, line)) rows += !line.empty();
  EXPECT_EQ(rows, 2u);
  EXPECT_EQ(r.steps, 2u * 4u);
  EXPECT_EQ(r.step_reports.size(), r.steps);
  EXPECT_TRUE(r.all_finite);
  for (const auto& rep : r.step_reports) {
    EXPECT_TRUE(std::isfinite(rep.l_ctc) && std::isfinite(rep.l_bc) && std::isfinite(rep.l_ec));
    EXPECT_NEAR(rep.l_total, rep.l_ctc + rep.l_bc + rep.l_ec, 1e-4 * (1 + std::abs(rep.l_total)));
  }
  EXPECT_NE(r.tau_final, r.tau_initial);
  EXPECT_FALSE(r.best_checkpoint.empty());
  EXPECT_EQ(checkpoint_group_counts(r.exported).second, 0u);
}

TEST(Train, IdenticalSeedsGiveIdenticalArtifacts) {
  const auto data = tiny_data(32);
  const auto a = train<float>(data.records, {}, data.channels, tiny_train(2));
  const auto b = train<float>(data.records, {}, data.channels, tiny_train(2));
  EXPECT_EQ(a.last_checkpoint, b.last_checkpoint);
  EXPECT_EQ(a.best_checkpoint, b.best_checkpoint);
  EXPECT_EQ(a.steps_csv, b.steps_csv);
  EXPECT_EQ(a.epochs_csv, b.epochs_csv);
  auto other = tiny_train(2);
  other.seed = 12;
  EXPECT_NE(train<float>(data.records, {}, data.channels, other).last_checkpoint, a.last_checkpoint);
}

TEST(Train, CtcOnlyHasNoAuxiliaryBranch) {
  const auto data = tiny_data(32);
  auto cfg = tiny_train(1);
  cfg.warmup_epochs = 0;
  cfg.objectives = ObjectiveFlags::parse("ctc");
  const auto r = train<float>(data.records, {}, data.channels, cfg);
  EXPECT_EQ(checkpoint_group_counts(r.last_checkpoint).second, 0u);
  for (const auto& rep : r.step_reports) {
    EXPECT_EQ(rep.l_bc, 0.0);
    EXPECT_EQ(rep.l_ec, 0.0);
  }
}

TEST(Train, InfeasibleSamplesAreSkippedAndCounted) {
  auto data = tiny_data(16);
  // A 2-step signal cannot carry a 3-character target after 4x downsampling.
  SampleRecord shortie = data.records[0];
  shortie.sample_id = "short";
  shortie.transcript = "abc";
  shortie.length = 2;
  shortie.signal.resize(2 * data.channels);
  data.records.push_back(shortie);
  auto cfg = tiny_train(1);
  cfg.warmup_epochs = 0;
  const auto r = train<float>(data.records, {}, data.channels, cfg);
  EXPECT_EQ(r.skipped_infeasible, 1u);

  std::vector<SampleRecord> only{shortie};
  EXPECT_THROW(train<float>(only, {}, data.channels, cfg), InfeasibleTargetError);
}

TEST(Sweep, GridShapes) {
  const auto t2 = table2_grid();
  ASSERT_EQ(t2.size(), 12u);
  std::size_t with_ec = 0, gated = 0, regs = 0, rms = 0;
  for (const auto& d : t2) {
    with_ec += d.objectives.ec;
    gated += d.gated;
    regs += d.num_registers > 0;
    rms += d.norm_kind == NormKind::rms;
    EXPECT_TRUE(d.objectives.ctc && d.objectives.bc);
  }
  EXPECT_EQ(with_ec, 6u);
  EXPECT_EQ(gated, 8u);
  EXPECT_EQ(regs, 4u);
  EXPECT_EQ(rms, 6u);
  EXPECT_EQ(t2[0].variant, "LN");
  EXPECT_EQ(t2[2].variant, "LN+GA");
  EXPECT_EQ(t2[4].variant, "LN+GA+Reg");
  EXPECT_EQ(t2[11].variant, "RMS+GA+Reg");

  const auto s = error_set_grid(NormKind::layer, true, 4);
  ASSERT_EQ(s.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s[i].error_sets, i + 1);
}

TEST(Sweep, TwoConfigsGiveHeaderAndTwoRows) {
  const auto data = tiny_data(16);
  auto base = tiny_train(1);
  base.warmup_epochs = 0;
  const auto grid = error_set_grid(NormKind::rms, true, 2, 2);
  const auto rows = ablation_sweep<float>(data.records, {}, data.channels, base, grid);
  ASSERT_EQ(rows.size(), 2u);
  const std::string csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,norm,GA,Reg,objectives,S,CER,WER");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("RMS+GA+Reg,rms,1,2,ctc+bc+ec,1,"), std::string::npos);
  EXPECT_NE(csv.find("RMS+GA+Reg,rms,1,2,ctc+bc+ec,2,"), std::string::npos);
}
