#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <sstream>

#include "mic/gradcheck.hpp"
#include "mic/trainer.hpp"

using namespace mic;
using hp = boost::multiprecision::cpp_bin_float_50;

namespace {

TaskSpec small_world() {
  TaskSpec s;
  s.n_base = 8;
  s.n_novel = 4;
  s.dim = 12;
  s.cluster_count = 4;
  s.seed = 5;
  return s;
}

TrainConfig small_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.fg_length = 3;
  c.bg_length = 3;
  c.prompt_steps = 20;
  c.prompt_batch = 16;
  c.batch_classes = 4;
  c.detector_steps = 60;
  c.bank_capacity = 16;
  c.bank_sample = 4;
  c.proj_dim = 4;
  c.train_per_class = 40;
  c.train_background = 40;
  c.test_per_class = 20;
  c.test_background = 20;
  c.seed = seed;
  return c;
}

Vec unit(std::size_t d, std::size_t i) {
  Vec e(d, 0.0);
  e[i] = 1.0;
  return e;
}

double oracle_loss_cls(std::span<const ClassificationExample> batch, const Mat& T, const Vec& t_bg, double tau) {
  hp total = 0;
  for (const auto& ex : batch) {
    std::vector<hp> e;
    hp z = 0;
    for (std::size_t j = 0; j <= T.rows(); ++j) {
      const Vec row = j < T.rows() ? T.row_vec(j) : t_bg;
      hp ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < row.size(); ++k) {
        ab += hp(ex.f[k]) * hp(row[k]);
        aa += hp(ex.f[k]) * hp(ex.f[k]);
        bb += hp(row[k]) * hp(row[k]);
      }
      e.push_back(boost::multiprecision::exp(ab / boost::multiprecision::sqrt(aa * bb) / tau));
      z += e.back();
    }
    total -= boost::multiprecision::log(e[ex.target] / z);
  }
  return static_cast<double>(total / batch.size());
}

}  // namespace

TEST(Classify, LimitAndUniformCases) {
  const Mat T = Mat::from_rows({unit(4, 0), unit(4, 1), unit(4, 2)});
  const Vec p = classify(unit(4, 1), T, unit(4, 3), 0.001);
  EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 1);
  EXPECT_GT(p[1], 1.0 - 1e-12);
  for (double q : classify(Vec{1, 1, 1, 1}, T, unit(4, 3), 0.05)) EXPECT_NEAR(q, 0.25, 1e-15);
}

TEST(Classify, MatchesDirectFormula) {
  Rng rng(4);
  std::vector<Vec> rows;
  for (int i = 0; i < 5; ++i) rows.push_back(gaussian_vec(rng, 6, 1.0));
  const Mat T = Mat::from_rows(rows);
  const Vec bg = gaussian_vec(rng, 6, 1.0), f = gaussian_vec(rng, 6, 1.0);
  const Vec p = classify(f, T, bg, 0.3);
  double z = 0.0;
  Vec e;
  for (int i = 0; i <= 5; ++i) {
    const Vec& r = i < 5 ? rows[static_cast<std::size_t>(i)] : bg;
    e.push_back(std::exp(dot(f, r) / (norm(f) * norm(r)) / 0.3));
    z += e.back();
  }
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(p[i], e[i] / z, 1e-15);
}

TEST(LossCls, UniformOverFortyOneSlots) {
  std::vector<Vec> rows;
  for (std::size_t i = 1; i <= 40; ++i) rows.push_back(unit(42, i));
  const Mat T = Mat::from_rows(rows);
  const std::vector<ClassificationExample> b{{unit(42, 0), 7}, {unit(42, 0), 40}};
  EXPECT_NEAR(loss_cls(b, T, unit(42, 41), 0.02), std::log(41.0), 1e-12);
  EXPECT_NEAR(loss_cls(b, T, unit(42, 41), 0.02), 3.71357207, 1e-8);
}

TEST(LossCls, PerfectPredictionsApproachZero) {
  const Mat T = Mat::from_rows({unit(3, 0), unit(3, 1)});
  const std::vector<ClassificationExample> b{{unit(3, 0), 0}, {unit(3, 2), 2}};
  EXPECT_LT(loss_cls(b, T, unit(3, 2), 0.01), 1e-40);
  EXPECT_THROW(loss_cls(std::vector<ClassificationExample>{}, T, unit(3, 2), 0.01), ConfigError);
}

TEST(LossCls, MatchesHighPrecisionOracleAndGradient) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    std::vector<Vec> rows;
    for (int i = 0; i < 6; ++i) rows.push_back(gaussian_vec(rng, 8, 1.0));
    const Mat T = Mat::from_rows(rows);
    const Vec bg = gaussian_vec(rng, 8, 1.0);
    std::vector<ClassificationExample> b;
    for (std::size_t i = 0; i < 4; ++i) b.push_back({gaussian_vec(rng, 8, 1.0), (i * 5 + t) % 7});
    const double tau = t % 2 ? 0.05 : 0.5;
    EXPECT_NEAR(loss_cls(b, T, bg, tau), oracle_loss_cls(b, T, bg, tau), 1e-10);
    const ClsGrads g = loss_cls_grads(b, T, bg, tau);
    EXPECT_NEAR(g.loss, loss_cls(b, T, bg, tau), 1e-12);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const Vec fd = finite_diff_grad(
          [&](const Vec& x) {
            auto m = b;
            m[i].f = x;
            return loss_cls(m, T, bg, tau);
          },
          b[i].f);
      EXPECT_LT(relative_error(g.features[i], fd, 1e-8), 1e-5);
    }
  }
}

TEST(AlphaSchedule, LinearDecayToZero) {
  EXPECT_EQ(alpha_schedule(0.1, 0, 2000), 0.1);
  EXPECT_DOUBLE_EQ(alpha_schedule(0.1, 1000, 2000), 0.05);
  EXPECT_EQ(alpha_schedule(0.1, 2000, 2000), 0.0);
  EXPECT_EQ(alpha_schedule(0.1, 5000, 2000), 0.0);
  double prev = 1.0;
  for (std::size_t i = 0; i <= 2000; ++i) {
    const double a = alpha_schedule(0.1, i, 2000);
    EXPECT_LE(a, prev);
    prev = a;
  }
}

TEST(AlphaSchedule, CompoundingReadingCollapses) {
  EXPECT_EQ(alpha_schedule_compounding(0.1, 0, 100), 0.1);
  EXPECT_DOUBLE_EQ(alpha_schedule_compounding(0.1, 2, 100), 0.1 * 0.99 * 0.98);
  EXPECT_LT(alpha_schedule_compounding(0.1, 200, 2000), 1e-5);
  EXPECT_EQ(alpha_schedule_compounding(0.1, 2000, 2000), 0.0);
}

TEST(WarmupCosine, Endpoints) {
  EXPECT_DOUBLE_EQ(warmup_cosine_lr(0.05, 0, 2000, 222, 1e-4), 0.05 * 1e-4);
  EXPECT_DOUBLE_EQ(warmup_cosine_lr(0.05, 222, 2000, 222, 1e-4), 0.05);
  EXPECT_NEAR(warmup_cosine_lr(0.05, 1111, 2000, 222, 1e-4), 0.025, 1e-12);
  EXPECT_NEAR(warmup_cosine_lr(0.05, 2000, 2000, 222, 1e-4), 0.0, 1e-15);
  TrainConfig c;
  EXPECT_EQ(c.effective_warmup(), 222u);
}

TEST(SgdStep, ZeroRateAndPlainStep) {
  Vec p{1.0, -2.0}, v{0.5, 0.5};
  const Vec g{3.0, 4.0};
  sgd_step(p, g, v, 0.0, 0.9);
  EXPECT_EQ(p, (Vec{1.0, -2.0}));
  Vec q{1.0, -2.0}, w{0.0, 0.0};
  sgd_step(q, g, w, 0.1, 0.0);
  EXPECT_EQ(q[0], 1.0 - 0.1 * 3.0);
  EXPECT_EQ(q[1], -2.0 - 0.1 * 4.0);
}

TEST(SgdStep, ThreeStepMomentumUnroll) {
  Vec p{1.0}, v{0.0};
  const double lr = 0.1, mu = 0.9;
  const double g1 = 1.0, g2 = -2.0, g3 = 0.5;
  sgd_step(p, Vec{g1}, v, lr, mu);
  sgd_step(p, Vec{g2}, v, lr, mu);
  sgd_step(p, Vec{g3}, v, lr, mu);
  const double v1 = g1, v2 = mu * v1 + g2, v3 = mu * v2 + g3;
  EXPECT_NEAR(p[0], 1.0 - lr * (v1 + v2 + v3), 1e-15);
}

TEST(ProcedureA, ZeroStepsKeepsInitialization) {
  const SyntheticWorld w = gen_world(small_world());
  TrainConfig cfg = small_config(3);
  cfg.prompt_steps = 0;
  const ProcedureAResult a = run_procedure_A(w, cfg);
  const PromptPair init = init_prompts(cfg.fg_length, cfg.bg_length, w.spec.dim, cfg.seed);
  ASSERT_EQ(a.prompts.members.size(), kIouLevels);
  for (const auto& m : a.prompts.members) EXPECT_EQ(fingerprint(m), fingerprint(init));
  EXPECT_TRUE(a.curve.empty());
}

TEST(ProcedureA, SingleLevelTrainsOnePrompt) {
  const SyntheticWorld w = gen_world(small_world());
  TrainConfig cfg = small_config();
  cfg.iou_levels = 1;
  const ProcedureAResult a = run_procedure_A(w, cfg);
  EXPECT_EQ(a.prompts.members.size(), 1u);
  EXPECT_EQ(a.curve.size(), cfg.prompt_steps);
}

class ProcedureBTest : public ::testing::Test {
 protected:
  SyntheticWorld w = gen_world(small_world());
  TrainConfig cfg = small_config();
  PromptEnsemble prompts = run_procedure_A(w, cfg).prompts;
};

TEST_F(ProcedureBTest, LeavesPromptsAndClassifierFrozen) {
  const std::vector<ClassId> ids = w.vocab.all();
  const auto h_prompts = prompts.fingerprint();
  const auto h_classes = content_hash(prompts.class_embeddings(ids, w.words, w.encoder).values());
  const auto h_bg = content_hash(prompts.background_embedding(w.encoder));
  const auto h_enc = w.encoder.fingerprint(), h_words = w.words.fingerprint();
  run_procedure_B(w, prompts, cfg);
  EXPECT_EQ(prompts.fingerprint(), h_prompts);
  EXPECT_EQ(content_hash(prompts.class_embeddings(ids, w.words, w.encoder).values()), h_classes);
  EXPECT_EQ(content_hash(prompts.background_embedding(w.encoder)), h_bg);
  EXPECT_EQ(w.encoder.fingerprint(), h_enc);
  EXPECT_EQ(w.words.fingerprint(), h_words);
}

TEST_F(ProcedureBTest, DeterministicMetricStream) {
  const ProcedureBResult a = run_procedure_B(w, prompts, cfg), b = run_procedure_B(w, prompts, cfg);
  ASSERT_EQ(a.metrics.size(), cfg.detector_steps);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].loss_det, b.metrics[i].loss_det);
    EXPECT_EQ(a.metrics[i].loss_icl, b.metrics[i].loss_icl);
  }
  EXPECT_EQ(a.detector.net.flatten(), b.detector.net.flatten());
  EXPECT_EQ(a.detector.adapter, b.detector.adapter);
}

TEST_F(ProcedureBTest, DetectionLossIsClsPlusWeightedIcl) {
  DetectorTrainer tr(w, prompts, cfg);
  for (int it = 0; it < 30; ++it) {
    const auto batch = tr.sample_batch();
    MemoryBank bank = tr.bank();
    update(bank, tr.bank_candidates(batch), cfg.u_pos, cfg.u_neg, cfg.bank_sample);
    // Independent recomputation from the same snapshot.
    const Detector det = tr.detector();
    std::vector<ClassificationExample> cls;
    std::vector<Anchor> anchors;
    for (const auto& s : batch) {
      const Vec f = matvec(det.adapter, s.embedding);
      const bool fg = s.label != kBackground && s.iou >= 0.5;
      cls.push_back({f, fg ? tr.class_rows().at(s.label) : w.vocab.base.size()});
      if (s.label != kBackground && s.iou > cfg.u_pos) anchors.push_back({project(det.net, f), s.label});
      else if (s.iou < cfg.u_neg) anchors.push_back({project(det.net, f), kBackground});
    }
    const double alpha = alpha_schedule(cfg.alpha0, static_cast<std::size_t>(it), cfg.detector_steps);
    const double want = loss_cls(cls, tr.base_embeddings(), tr.background_embedding(), cfg.tau_cls) +
                        alpha * icl_loss(anchors, bank, {cfg.gamma, false});
    const DetectorMetrics m = tr.step(batch);
    EXPECT_NEAR(m.loss_det, want, 1e-12);
    EXPECT_EQ(m.alpha, alpha);
  }
}

TEST_F(ProcedureBTest, ZeroAlphaLeavesProjectionUntouched) {
  cfg.alpha0 = 0.0;
  DetectorTrainer tr(w, prompts, cfg);
  const Vec before = tr.detector().net.flatten();
  for (int i = 0; i < 20; ++i) tr.step(tr.sample_batch());
  EXPECT_EQ(tr.detector().net.flatten(), before);
  EXPECT_NE(tr.detector().adapter, Mat::identity(w.spec.dim));
}

TEST_F(ProcedureBTest, BankHoldsUnitProjectedEmbeddings) {
  const ProcedureBResult r = run_procedure_B(w, prompts, cfg);
  EXPECT_GT(r.bank.total_size(), 0u);
  EXPECT_EQ(r.bank.queue_count(), w.vocab.base.size() + 1);
  for (ClassId c : r.bank.classes()) {
    EXPECT_LE(r.bank.queue(c).size(), cfg.bank_capacity);
    for (const auto& e : r.bank.queue(c)) {
      EXPECT_EQ(e.embedding.size(), cfg.proj_dim);
      EXPECT_NEAR(norm(e.embedding), 1.0, 1e-12);
    }
  }
}

TEST_F(ProcedureBTest, DetectorCheckpointRoundTrips) {
  const ProcedureBResult r = run_procedure_B(w, prompts, cfg);
  std::stringstream ss;
  write_detector(ss, r.detector);
  const Detector d = read_detector(ss);
  EXPECT_EQ(d.adapter, r.detector.adapter);
  EXPECT_EQ(d.net.flatten(), r.detector.net.flatten());
}

TEST(GradCheck, EveryAnalyticGradientAgrees) {
  const GradCheckReport r = run_gradcheck(1);
  EXPECT_EQ(r.instances, 20u);
  EXPECT_FALSE(r.entries.empty());
  EXPECT_TRUE(r.passed(1e-5)) << r.max_rel_err();
}
