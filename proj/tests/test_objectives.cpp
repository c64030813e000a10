#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "echwr/objectives.hpp"
#include "echwr/trainer.hpp"
#include "test_util.hpp"

using namespace echwr;
using testutil::TD;

namespace {

// Independent symmetric InfoNCE on the first occurrence of each label.
double bc_oracle(const std::vector<double>& c, const std::vector<double>& z, std::size_t D, double tau,
                 const std::vector<LabelSeq>& labels) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool dup = false;
    for (std::size_t j : keep) dup = dup || labels[j] == labels[i];
    if (!dup) keep.push_back(i);
  }
  const std::size_t n = keep.size();
  std::vector<double> s(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < D; ++k) d += c[keep[i] * D + k] * z[keep[j] * D + k];
      s[i * n + j] = tau * d;
    }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(s.begin() + static_cast<long>(i * n), s.begin() + static_cast<long>((i + 1) * n)), col(n);
    for (std::size_t j = 0; j < n; ++j) col[j] = s[j * n + i];
    total += (oracle::log_sum_exp(row) - s[i * n + i]) + (oracle::log_sum_exp(col) - s[i * n + i]);
  }
  return total / (2.0 * static_cast<double>(n));
}

std::vector<double> unit_rows(std::size_t n, std::size_t D, std::mt19937_64& gen) {
  auto v = testutil::random_values(n * D, gen);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < D; ++k) s += v[r * D + k] * v[r * D + k];
    for (std::size_t k = 0; k < D; ++k) v[r * D + k] /= std::sqrt(s);
  }
  return v;
}

TD log_uniform(std::size_t T, std::size_t C) { return TD::full({T, C}, -std::log(static_cast<double>(C))); }

}  // namespace

TEST(Ctc, CertainSingleStepHasZeroLoss) {
  const TD lp = TD::from({1, 2}, {std::log(1e-300), 0.0});
  EXPECT_NEAR(ctc_loss(lp, {1}, 1, 0.0).item(), 0.0, 1e-12);
}

TEST(Ctc, TwoUniformStepsExample) {
  const double loss = ctc_loss(log_uniform(2, 2), {1}, 2, 0.0).item();
  EXPECT_NEAR(loss, -std::log(0.75), 1e-12);
  EXPECT_NEAR(loss, 0.28768, 1e-5);
  EXPECT_NEAR(loss, oracle::ctc_brute_force(testutil::values(log_uniform(2, 2)), 2, 2, {1}), 1e-12);
}

TEST(Ctc, RepeatNeedsSeparatingBlank) {
  EXPECT_EQ(ctc_required_length({1, 1}), 3u);
  EXPECT_EQ(ctc_required_length({1, 2, 2, 2}), 6u);
  EXPECT_THROW(ctc_loss(log_uniform(2, 2), {1, 1}, 2, 0.0), InfeasibleTargetError);
  EXPECT_NO_THROW(ctc_loss(log_uniform(3, 2), {1, 1}, 3, 0.0));
}

TEST(Ctc, MatchesBruteForceEnumeration) {
  std::mt19937_64 gen(42);
  std::size_t cases = 0;
  for (std::size_t T = 1; T <= 8; ++T)
    for (std::size_t V = 1; V <= 4; ++V) {
      const std::size_t C = V + 1;
      for (int rep = 0; rep < 3; ++rep) {
        std::uniform_int_distribution<std::size_t> len_d(0, 4), id_d(1, V);
        LabelSeq target(len_d(gen));
        for (auto& id : target) id = static_cast<std::uint32_t>(id_d(gen));
        if (ctc_required_length(target) > T) continue;
        const TD lp = log_softmax(testutil::random_tensor({T, C}, gen, -2.0, 2.0), -1);
        const double got = ctc_loss(lp, target, T, 0.0).item();
        EXPECT_NEAR(got, oracle::ctc_brute_force(testutil::values(lp), T, C, target), 1e-9)
            << "T=" << T << " V=" << V << " |y|=" << target.size();
        ++cases;
      }
    }
  EXPECT_GT(cases, 60u);
}

TEST(Ctc, SmoothingMixesInUniformLabelTerm) {
  std::mt19937_64 gen(3);
  const TD lp = log_softmax(testutil::random_tensor({6, 4}, gen), -1);
  const LabelSeq y{2, 3, 2};
  const double nll = oracle::ctc_brute_force(testutil::values(lp), 6, 4, y);
  const auto v = testutil::values(lp);
  const double mean_lp = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  EXPECT_NEAR(ctc_loss(lp, y, 6, 0.1).item(), 0.9 * nll - 0.1 * mean_lp, 1e-9);
  EXPECT_THROW(ctc_loss(lp, y, 6, 1.0), ConfigError);
}

TEST(Ctc, BatchUsesOnlyValidSteps) {
  std::mt19937_64 gen(5);
  const TD a = log_softmax(testutil::random_tensor({5, 3}, gen), -1);
  auto rows = testutil::values(a);
  std::vector<double> batch = rows;
  batch.insert(batch.end(), rows.begin(), rows.end());
  const TD l = ctc_loss_batch(TD::from({2, 5, 3}, batch), {{1, 2}, {1, 2}}, {5, 3}, 0.1);
  EXPECT_NEAR(l[0], ctc_loss(a, {1, 2}, 5, 0.1).item(), 1e-12);
  EXPECT_NEAR(l[1], ctc_loss(TD::from({3, 3}, std::vector<double>(rows.begin(), rows.begin() + 9)), {1, 2}, 3, 0.1).item(),
              1e-12);
}

TEST(Ctc, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(9);
  for (double eps : {0.0, 0.1}) {
    for (int trial = 0; trial < 10; ++trial) {
      const LabelSeq y{1, 3, 3};
      const auto x0 = testutil::random_values(7 * 4, gen, -2.0, 2.0);
      const double err = testutil::grad_error(
          [&](const TD& logits) { return sum_all(ctc_loss(log_softmax(logits, -1), y, 7, eps)); }, {7, 4}, x0);
      EXPECT_LE(err, 1e-4) << "eps=" << eps;
    }
  }
}

TEST(Temperature, InitialValueClampAndGradient) {
  Temperature<double> t{TD::scalar(std::log(1.0 / 0.07)), 100.0};
  t.log_tau.set_requires_grad(true);
  EXPECT_NEAR(t.value().item(), 1.0 / 0.07, 1e-12);
  backward(scale(t.value(), 3.0));
  EXPECT_NEAR(t.log_tau.grad()[0], 3.0 / 0.07, 1e-9);

  Temperature<double> hot{TD::scalar(std::log(250.0)), 100.0};
  hot.log_tau.set_requires_grad(true);
  EXPECT_EQ(hot.value().item(), 100.0);
  EXPECT_FALSE(hot.value().requires_grad());
}

TEST(BcLoss, TwoSampleExample) {
  const TD c = TD::from({2, 2}, {1, 0, 0, 1});
  const double loss = bc_loss(c, c, TD::scalar(2.0), std::vector<LabelSeq>{{1}, {2}}).loss.item();
  EXPECT_NEAR(loss, std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(loss, 0.12693, 1e-5);
}

TEST(BcLoss, SingleUniqueLabelGivesZero) {
  std::mt19937_64 gen(1);
  const TD c = TD::from({3, 4}, unit_rows(3, 4, gen)), z = TD::from({3, 4}, unit_rows(3, 4, gen));
  const auto r = bc_loss(c, z, TD::scalar(14.0), std::vector<LabelSeq>{{1, 2}, {1, 2}, {1, 2}});
  EXPECT_EQ(r.effective_n, 1u);
  EXPECT_NEAR(r.loss.item(), 0.0, 1e-12);
}

TEST(BcLoss, IdenticalEmbeddingsGiveLogN) {
  const std::vector<double> row{0.6, 0.8};
  std::vector<double> rows;
  for (int i = 0; i < 5; ++i) rows.insert(rows.end(), row.begin(), row.end());
  const TD e = TD::from({5, 2}, rows);
  const auto r = bc_loss(e, e, TD::scalar(7.0), std::vector<LabelSeq>{{1}, {2}, {3}, {1}, {4}});
  EXPECT_EQ(r.effective_n, 4u);
  EXPECT_NEAR(r.loss.item(), std::log(4.0), 1e-12);
}

TEST(BcLoss, MatchesOracleAndIsPermutationSymmetric) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 6, D = 5;
    const auto c = unit_rows(N, D, gen), z = unit_rows(N, D, gen);
    std::vector<LabelSeq> labels;
    for (std::size_t i = 0; i < N; ++i) labels.push_back({static_cast<std::uint32_t>(1 + gen() % 4)});
    const double tau = 1.0 + static_cast<double>(gen() % 20);
    const double got = bc_loss(TD::from({N, D}, c), TD::from({N, D}, z), TD::scalar(tau), labels).loss.item();
    EXPECT_NEAR(got, bc_oracle(c, z, D, tau, labels), 1e-12);

    // Permute unique rows only, so the kept set stays the same.
    std::vector<std::size_t> uniq;
    for (std::size_t i = 0; i < N; ++i) {
      bool dup = false;
      for (std::size_t j : uniq) dup = dup || labels[j] == labels[i];
      if (!dup) uniq.push_back(i);
    }
    std::vector<std::size_t> perm = uniq;
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<double> pc, pz;
    std::vector<LabelSeq> pl;
    for (std::size_t i : perm) {
      pc.insert(pc.end(), c.begin() + static_cast<long>(i * D), c.begin() + static_cast<long>((i + 1) * D));
      pz.insert(pz.end(), z.begin() + static_cast<long>(i * D), z.begin() + static_cast<long>((i + 1) * D));
      pl.push_back(labels[i]);
    }
    std::vector<double> uc, uz;
    std::vector<LabelSeq> ul;
    for (std::size_t i : uniq) {
      uc.insert(uc.end(), c.begin() + static_cast<long>(i * D), c.begin() + static_cast<long>((i + 1) * D));
      uz.insert(uz.end(), z.begin() + static_cast<long>(i * D), z.begin() + static_cast<long>((i + 1) * D));
      ul.push_back(labels[i]);
    }
    const std::size_t n = uniq.size();
    const double base = bc_loss(TD::from({n, D}, uc), TD::from({n, D}, uz), TD::scalar(tau), ul).loss.item();
    const double permuted = bc_loss(TD::from({n, D}, pc), TD::from({n, D}, pz), TD::scalar(tau), pl).loss.item();
    EXPECT_NEAR(base, got, 1e-12);
    EXPECT_NEAR(base, permuted, 1e-12);
  }
}

TEST(BcLoss, AppendedDuplicateDoesNotChangeEffectiveN) {
  std::mt19937_64 gen(11);
  const std::size_t D = 4;
  auto c = unit_rows(3, D, gen), z = unit_rows(3, D, gen);
  const std::vector<LabelSeq> labels{{1}, {2}, {3}};
  const auto base = bc_loss(TD::from({3, D}, c), TD::from({3, D}, z), TD::scalar(5.0), labels);
  const auto extra = unit_rows(1, D, gen);  // different signal embedding, same transcript as row 1
  c.insert(c.end(), extra.begin(), extra.end());
  z.insert(z.end(), z.begin() + static_cast<long>(D), z.begin() + static_cast<long>(2 * D));
  auto dup_labels = labels;
  dup_labels.push_back({2});
  const auto dup = bc_loss(TD::from({4, D}, c), TD::from({4, D}, z), TD::scalar(5.0), dup_labels);
  EXPECT_EQ(dup.effective_n, base.effective_n);
  EXPECT_EQ(dup.loss.item(), base.loss.item());
}

TEST(EcLoss, UniformSimilaritiesGiveLogFour) {
  const TD c = TD::from({1, 2}, {1, 0});
  const TD zp = TD::from({1, 2}, {0, 1});
  const TD zn = TD::from({1, 3, 2}, {0, 1, 0, -1, 0, 1});
  EXPECT_NEAR(ec_loss(c, zp, zn, TD::scalar(3.0)).item(), std::log(4.0), 1e-12);
}

TEST(EcLoss, SinglePositiveUnitGapExample) {
  const TD c = TD::from({1, 2}, {1, 0});
  const TD zp = TD::from({1, 2}, {1, 0});
  const TD zn = TD::from({1, 3, 2}, {0, 1, 0, 1, 0, -1});
  const double loss = ec_loss(c, zp, zn, TD::scalar(1.0)).item();
  EXPECT_NEAR(loss, -std::log(std::exp(1.0) / (std::exp(1.0) + 3.0)), 1e-12);
  EXPECT_NEAR(loss, 0.74367, 1e-5);
}

TEST(EcLoss, LargeGapDrivesLossToZero) {
  const TD c = TD::from({1, 2}, {1, 0});
  const TD zp = TD::from({1, 2}, {1, 0});
  const TD zn = TD::from({1, 3, 2}, {0, 1, 0, 1, 0, -1});
  EXPECT_LT(ec_loss(c, zp, zn, TD::scalar(40.0)).item(), 1e-6);
}

TEST(EcLoss, NoNegativesGivesZero) {
  std::mt19937_64 gen(2);
  const TD c = TD::from({3, 4}, unit_rows(3, 4, gen));
  EXPECT_EQ(ec_loss(c, c, TD(), TD::scalar(10.0)).item(), 0.0);
}

TEST(EcLoss, PartialSignsAtRandomPoints) {
  std::mt19937_64 gen(4);
  const std::size_t N = 3, M = 6, D = 3;
  for (int trial = 0; trial < 50; ++trial) {
    // c = e_0, so d loss / d z[.., 0] is exactly d loss / d similarity.
    std::vector<double> cv(N * D, 0.0);
    for (std::size_t i = 0; i < N; ++i) cv[i * D] = 1.0;
    TD zp = testutil::random_tensor({N, D}, gen), zn = testutil::random_tensor({N, M, D}, gen);
    zp.set_requires_grad(true);
    zn.set_requires_grad(true);
    const double tau = 0.5 + 10.0 * testutil::random_values(1, gen, 0.0, 1.0)[0];
    const TD loss = ec_loss(TD::from({N, D}, cv), zp, zn, TD::scalar(tau));
    backward(loss);
    double expect = 0;
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> logits{tau * zp[i * D]};
      for (std::size_t k = 0; k < M; ++k) logits.push_back(tau * zn[(i * M + k) * D]);
      expect += oracle::log_sum_exp(logits) - logits[0];
      EXPECT_LT(zp.grad()[i * D], 0.0);
      for (std::size_t k = 0; k < M; ++k) EXPECT_GT(zn.grad()[(i * M + k) * D], 0.0);
    }
    EXPECT_NEAR(loss.item(), expect / N, 1e-12);
  }
}

TEST(TotalLoss, SumsEnabledComponentsOnly) {
  const ObjectiveFlags all = ObjectiveFlags::parse("ctc,bc,ec");
  const auto r = total_loss<double>(TD::scalar(0.3), ContrastiveResult<double>{TD::scalar(0.2), 4}, TD::scalar(0.1), all);
  EXPECT_NEAR(r.report.l_total, 0.6, 1e-15);
  EXPECT_EQ(r.report.l_total, r.report.l_ctc + r.report.l_bc + r.report.l_ec);
  EXPECT_EQ(r.report.effective_batch_bc, 4u);

  const auto only = total_loss<double>(TD::scalar(0.3), std::nullopt, std::nullopt, ObjectiveFlags::parse("ctc"));
  EXPECT_EQ(only.report.l_total, only.report.l_ctc);
  EXPECT_EQ(only.report.l_bc, 0.0);
  EXPECT_EQ(only.report.l_ec, 0.0);

  const auto two = total_loss<double>(TD::scalar(0.3), ContrastiveResult<double>{TD::scalar(0.2), 2}, std::nullopt,
                                      ObjectiveFlags::parse("ctc+bc"));
  EXPECT_NEAR(two.report.l_total, 0.5, 1e-15);
  EXPECT_EQ(two.report.l_ec, 0.0);
}

TEST(TotalLoss, RejectsNonFiniteAndMissingParts) {
  EXPECT_THROW(total_loss<double>(TD::scalar(0.3), std::nullopt, std::nullopt, ObjectiveFlags::parse("ctc,bc")),
               ConfigError);
  EXPECT_THROW(total_loss<double>(TD::scalar(0.3), std::nullopt, std::nullopt, ObjectiveFlags{false, false, false}),
               ConfigError);
}

TEST(ObjectiveFlags, ParseAndFormat) {
  EXPECT_EQ(ObjectiveFlags::parse("ctc").to_string(), "ctc");
  EXPECT_EQ(ObjectiveFlags::parse("ctc+bc").to_string(), "ctc+bc");
  EXPECT_EQ(ObjectiveFlags::parse("bc, ctc ,ec").to_string(), "ctc+bc+ec");
  EXPECT_THROW(ObjectiveFlags::parse("bc,ec"), ConfigError);
  EXPECT_THROW(ObjectiveFlags::parse("ctc,xx"), ConfigError);
}

TEST(Temperature, OneOptimizerStepMovesLogTau) {
  ParamStore<double> store;
  Temperature<double> temp{store.add("aux.log_tau", Group::auxiliary, TD::scalar(std::log(1.0 / 0.07))), 100.0};
  std::mt19937_64 gen(8);
  const TD c = l2_normalize(testutil::random_tensor({4, 6}, gen), 1);
  const TD z = l2_normalize(testutil::random_tensor({4, 6}, gen), 1);
  const double before = temp.log_tau.item();
  backward(bc_loss(c, z, temp.value(), std::vector<LabelSeq>{{1}, {2}, {3}, {4}}).loss);
  ASSERT_TRUE(temp.log_tau.has_grad());
  EXPECT_NE(temp.log_tau.grad()[0], 0.0);
  AdamW<double> opt(store, 0.0);
  opt.step(1e-3, 1e-3);
  EXPECT_NE(temp.log_tau.item(), before);
}
