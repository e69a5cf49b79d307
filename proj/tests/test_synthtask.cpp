#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <sstream>

#include "mic/synthtask.hpp"

using namespace mic;

namespace {

TaskSpec small_spec(std::uint64_t seed = 3) {
  TaskSpec s;
  s.n_base = 8;
  s.n_novel = 4;
  s.dim = 12;
  s.cluster_count = 4;
  s.seed = seed;
  return s;
}

std::string dump(const SyntheticWorld& w) {
  std::stringstream ss;
  write_world(ss, w);
  return ss.str();
}

}  // namespace

TEST(GenWorld, PrototypesSitAtTheConfiguredAngle) {
  for (double spread : {0.5, 0.1, 1e-6}) {
    TaskSpec s = small_spec();
    s.spread = spread;
    const SyntheticWorld w = gen_world(s);
    for (std::size_t c = 0; c < w.class_count(); ++c) {
      const Vec& center = w.centers[static_cast<std::size_t>(w.cluster_of[c])];
      EXPECT_NEAR(norm(w.prototypes[c]), 1.0, 1e-12);
      EXPECT_NEAR(dot(w.prototypes[c], center), std::cos(spread), 1e-12);
    }
  }
}

TEST(GenWorld, VanishingSpreadCollapsesClusters) {
  TaskSpec s = small_spec();
  s.spread = 1e-7;
  const SyntheticWorld w = gen_world(s);
  for (std::size_t a = 0; a < w.class_count(); ++a)
    for (std::size_t b = 0; b < w.class_count(); ++b)
      if (w.cluster_of[a] == w.cluster_of[b]) {
        EXPECT_GT(cosine_sim(w.prototypes[a], w.prototypes[b]), 1.0 - 1e-12);
      }
}

TEST(GenWorld, NovelClassesShareClustersWithBase) {
  const SyntheticWorld w = gen_world(TaskSpec{});
  EXPECT_EQ(w.vocab.base.size(), 40u);
  EXPECT_EQ(w.vocab.novel.size(), 10u);
  for (ClassId n : w.vocab.novel) {
    bool shared = false;
    for (ClassId b : w.vocab.base) shared |= w.cluster_of[static_cast<std::size_t>(b)] == w.cluster_of[static_cast<std::size_t>(n)];
    EXPECT_TRUE(shared);
    EXPECT_FALSE(w.vocab.is_base(n));
  }
}

TEST(GenWorld, SeedDeterminesTheWorld) {
  EXPECT_EQ(dump(gen_world(small_spec(5))), dump(gen_world(small_spec(5))));
  EXPECT_NE(dump(gen_world(small_spec(5))), dump(gen_world(small_spec(6))));
}

TEST(GenWorld, NoiselessIdentityMapCopiesPrototypes) {
  TaskSpec s = small_spec();
  s.word_noise = 0.0;
  s.identity_text_map = true;
  const SyntheticWorld w = gen_world(s);
  for (std::size_t c = 0; c < w.class_count(); ++c)
    for (std::size_t k = 0; k < s.dim; ++k) EXPECT_NEAR(w.words[c][k], w.prototypes[c][k], 1e-15);
}

TEST(GenWorld, RejectsInvalidSpecs) {
  TaskSpec s = small_spec();
  s.dim = 2;
  EXPECT_THROW(gen_world(s), ConfigError);
  s = small_spec();
  s.n_base = 1;
  EXPECT_THROW(gen_world(s), ConfigError);
  s = small_spec();
  s.spread = 0.0;
  EXPECT_THROW(gen_world(s), ConfigError);
}

TEST(GenWorld, UnseenWordsDecodeToTheirCluster) {
  // Least-squares probe fitted on base classes, scored on novel ones.
  const SyntheticWorld w = gen_world(TaskSpec{});
  const auto d = static_cast<Eigen::Index>(w.spec.dim);
  const auto nb = static_cast<Eigen::Index>(w.vocab.base.size());
  Eigen::MatrixXd X(nb, d), Y(nb, d);
  for (Eigen::Index i = 0; i < nb; ++i)
    for (Eigen::Index k = 0; k < d; ++k) {
      X(i, k) = w.words[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      Y(i, k) = w.prototypes[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
  const Eigen::MatrixXd B = X.completeOrthogonalDecomposition().solve(Y);
  // Each decoded novel word lands nearest its own cluster center.
  for (ClassId c : w.vocab.novel) {
    Eigen::RowVectorXd x(d);
    for (Eigen::Index k = 0; k < d; ++k) x(k) = w.words[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
    const Eigen::RowVectorXd p = x * B;
    const Vec pv(p.data(), p.data() + p.size());
    std::size_t best = 0;
    for (std::size_t j = 1; j < w.centers.size(); ++j)
      if (cosine_sim(pv, w.centers[j]) > cosine_sim(pv, w.centers[best])) best = j;
    EXPECT_EQ(best, static_cast<std::size_t>(w.cluster_of[static_cast<std::size_t>(c)]));
  }
}

TEST(GenWorld, LowNoiseWordsProbeOntoUnseenPrototypes) {
  // Least-squares probe fitted on base classes, scored on novel ones.
  TaskSpec s;
  s.word_noise = 0.01;
  const SyntheticWorld w = gen_world(s);
  const auto d = static_cast<Eigen::Index>(w.spec.dim);
  const auto nb = static_cast<Eigen::Index>(w.vocab.base.size());
  Eigen::MatrixXd X(nb, d), Y(nb, d);
  for (Eigen::Index i = 0; i < nb; ++i)
    for (Eigen::Index k = 0; k < d; ++k) {
      X(i, k) = w.words[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      Y(i, k) = w.prototypes[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
  const Eigen::MatrixXd B = X.completeOrthogonalDecomposition().solve(Y);
  double mean = 0.0;
  for (ClassId c : w.vocab.novel) {
    Eigen::RowVectorXd x(d), y(d);
    for (Eigen::Index k = 0; k < d; ++k) {
      x(k) = w.words[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
      y(k) = w.prototypes[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
    }
    const Eigen::RowVectorXd p = x * B;
    mean += p.dot(y) / (p.norm() * y.norm()) / static_cast<double>(w.vocab.novel.size());
  }
  EXPECT_GT(mean, 0.9);
}

TEST(GenProposals, NoiselessSamplesEqualThePrototype) {
  TaskSpec s = small_spec();
  s.iou_mix = 0.0;
  const SyntheticWorld w = gen_world(s);
  Rng rng(1);
  for (const auto& p : gen_proposals(w, 3, 50, 0.0, {5.0, 2.0}, rng)) {
    EXPECT_EQ(p.label, 3);
    for (std::size_t k = 0; k < s.dim; ++k) EXPECT_NEAR(p.embedding[k], w.prototypes[3][k], 1e-15);
  }
  EXPECT_THROW(gen_proposals(w, 99, 1, 0.0, {5.0, 2.0}, rng), ConfigError);
}

TEST(GenProposals, LooseBoxesCarryBackground) {
  const SyntheticWorld w = gen_world(small_spec());
  Rng rng(2);
  double hi = 0.0, lo = 0.0;
  int n_hi = 0, n_lo = 0;
  for (const auto& p : gen_proposals(w, 0, 4000, 0.0, {1.0, 1.0}, rng)) {
    const double c = cosine_sim(p.embedding, w.bg_center);
    if (p.iou > 0.8) hi += c, ++n_hi;
    if (p.iou < 0.3) lo += c, ++n_lo;
  }
  EXPECT_GT(lo / n_lo, hi / n_hi);
}

TEST(GenProposals, MeanCosineFallsWithNoise) {
  TaskSpec s = small_spec();
  s.iou_mix = 0.0;
  const SyntheticWorld w = gen_world(s);
  double prev = 1.0;
  for (double sigma : {0.1, 0.5, 1.0}) {
    Rng rng(7);
    double mean = 0.0;
    for (const auto& p : gen_proposals(w, 1, 1000, sigma, {5.0, 2.0}, rng))
      mean += cosine_sim(p.embedding, w.prototypes[1]) / 1000.0;
    EXPECT_LT(mean, prev);
    prev = mean;
  }
}

TEST(GenProposals, IouFollowsTheConfiguredBeta) {
  const SyntheticWorld w = gen_world(small_spec());
  Rng rng(11);
  const auto ps = gen_proposals(w, 0, 10000, w.spec.proposal_sigma, {5.0, 2.0}, rng);
  constexpr int bins = 10;
  std::array<double, bins> edges{};
  for (int b = 0; b < bins; ++b) edges[static_cast<std::size_t>(b)] = boost::math::ibeta_inv(5.0, 2.0, (b + 1) / 10.0);
  std::array<double, bins> counts{};
  for (const auto& p : ps) {
    ASSERT_GE(p.iou, 0.0);
    ASSERT_LE(p.iou, 1.0);
    int b = 0;
    while (b < bins - 1 && p.iou > edges[static_cast<std::size_t>(b)]) ++b;
    ++counts[static_cast<std::size_t>(b)];
  }
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(bins - 1), chi2));
  EXPECT_GT(p, 0.01) << "chi2 " << chi2;
}

TEST(GenBackground, UnitNormLowIou) {
  const SyntheticWorld w = gen_world(small_spec());
  Rng rng(4);
  for (const auto& b : gen_background(w, 500, rng)) {
    EXPECT_NEAR(norm(b.embedding), 1.0, 1e-12);
    EXPECT_TRUE(b.is_background());
    EXPECT_GE(b.iou, 0.0);
    EXPECT_LT(b.iou, w.spec.bg_iou_max);
  }
}

TEST(IouLevel, IntervalMembership) {
  EXPECT_EQ(iou_level(0.55), 0);
  EXPECT_EQ(iou_level(0.5), 0);
  EXPECT_EQ(iou_level(0.6), 1);
  EXPECT_EQ(iou_level(0.7), 2);
  EXPECT_EQ(iou_level(0.95), 4);
  EXPECT_EQ(iou_level(1.0), 4);
  EXPECT_EQ(iou_level(0.4999), -1);
}

TEST(IouLevel, DatasetsPartitionTheHighIouSamples) {
  const SyntheticWorld w = gen_world(small_spec());
  Rng rng(9);
  auto ps = gen_proposals(w, 2, 14000, 0.1, {2.0, 1.0}, rng);
  ps.push_back({w.prototypes[2], 1.0, 2, 0});
  std::size_t eligible = 0;
  for (const auto& p : ps) eligible += p.iou >= 0.5;
  const auto levels = gen_iou_level_datasets(ps);
  std::size_t total = 0;
  for (std::size_t l = 0; l < kIouLevels; ++l) {
    total += levels[l].size();
    for (const auto& p : levels[l]) {
      EXPECT_GE(p.iou, 0.5 + 0.1 * static_cast<double>(l) - 1e-12);
      if (l + 1 < kIouLevels) {
        EXPECT_LT(p.iou, 0.6 + 0.1 * static_cast<double>(l) + 1e-12);
      }
    }
  }
  EXPECT_GE(eligible, 10000u);
  EXPECT_EQ(total, eligible);
  EXPECT_EQ(levels[4].back().iou, 1.0);
}

TEST(WorldFile, RoundTripsBitExactly) {
  const SyntheticWorld w = gen_world(small_spec(8));
  std::stringstream ss(dump(w));
  const SyntheticWorld r = read_world(ss);
  EXPECT_EQ(dump(r), dump(w));
  EXPECT_EQ(r.bg_center, w.bg_center);
  EXPECT_EQ(r.text_map, w.text_map);
}
