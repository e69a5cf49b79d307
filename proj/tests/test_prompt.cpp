#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mic/prompt.hpp"

using namespace mic;

namespace {

ForegroundPrompt make_fg(std::size_t n, TokenPosition pos) {
  ForegroundPrompt fg;
  fg.position = pos;
  for (std::size_t i = 0; i < n; ++i) fg.context.push_back(Vec{static_cast<double>(i + 1), 0.0});
  return fg;
}

}  // namespace

TEST(InitPrompts, DefaultShapes) {
  const PromptPair p = init_prompts(8, 10, 512, 1);
  EXPECT_EQ(p.fg.length(), 8u);
  EXPECT_EQ(p.bg.length(), 10u);
  EXPECT_EQ(p.fg.dim(), 512u);
  EXPECT_EQ(p.bg.dim(), 512u);
}

TEST(InitPrompts, StandardDeviationNearPointZeroTwo) {
  const PromptPair p = init_prompts(8, 10, 512, 4);
  double s = 0.0, ss = 0.0, n = 0.0;
  for (const auto* ctx : {&p.fg.context, &p.bg.context})
    for (const Vec& v : *ctx)
      for (double x : v) {
        s += x;
        ss += x * x;
        n += 1.0;
      }
  const double sd = std::sqrt((ss - s * s / n) / (n - 1.0));
  EXPECT_GE(sd, 0.015);
  EXPECT_LE(sd, 0.025);
}

TEST(InitPrompts, DeterministicPerSeed) {
  const PromptPair a = init_prompts(4, 6, 16, 9), b = init_prompts(4, 6, 16, 9), c = init_prompts(4, 6, 16, 10);
  EXPECT_EQ(a.fg.context, b.fg.context);
  EXPECT_EQ(a.bg.context, b.bg.context);
  EXPECT_NE(a.fg.context, c.fg.context);
  EXPECT_THROW(init_prompts(0, 1, 4, 1), ConfigError);
  EXPECT_THROW(init_prompts(1, 0, 4, 1), ConfigError);
}

TEST(AssembleClassPrompt, TokenPositions) {
  const Vec w{0.0, 9.0};
  auto seq = assemble_class_prompt(make_fg(2, TokenPosition::end), w);
  ASSERT_EQ(seq.size(), 3u);
  EXPECT_EQ(seq[0][0], 1.0);
  EXPECT_EQ(seq[1][0], 2.0);
  EXPECT_EQ(seq[2], w);

  seq = assemble_class_prompt(make_fg(2, TokenPosition::front), w);
  EXPECT_EQ(seq[0], w);
  EXPECT_EQ(seq[1][0], 1.0);
  EXPECT_EQ(seq[2][0], 2.0);

  seq = assemble_class_prompt(make_fg(3, TokenPosition::middle), w);
  ASSERT_EQ(seq.size(), 4u);
  EXPECT_EQ(seq[0][0], 1.0);
  EXPECT_EQ(seq[1][0], 2.0);
  EXPECT_EQ(seq[2], w);
  EXPECT_EQ(seq[3][0], 3.0);
}

TEST(AssembleClassPrompt, EveryTokenExactlyOnce) {
  const Vec w{0.0, -1.0};
  for (TokenPosition pos : {TokenPosition::front, TokenPosition::middle, TokenPosition::end})
    for (std::size_t n = 1; n <= 7; ++n) {
      const auto seq = assemble_class_prompt(make_fg(n, pos), w);
      ASSERT_EQ(seq.size(), n + 1);
      std::size_t words = 0;
      std::vector<int> seen(n, 0);
      for (const Vec& v : seq) {
        if (v == w) ++words;
        else ++seen[static_cast<std::size_t>(v[0]) - 1];
      }
      EXPECT_EQ(words, 1u);
      for (int c : seen) EXPECT_EQ(c, 1);
    }
}

TEST(TokenPosition, ParsesAndPrints) {
  for (TokenPosition p : {TokenPosition::front, TokenPosition::middle, TokenPosition::end})
    EXPECT_EQ(parse_token_position(to_string(p)), p);
  EXPECT_THROW(parse_token_position("left"), ConfigError);
}

class ClassEmbeddingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(2);
    std::vector<Vec> w;
    for (int c = 0; c < 3; ++c) w.push_back(random_unit(rng, 6));
    words = WordEmbeddingTable(std::move(w), 2);
    prompts = init_prompts(3, 4, 6, 5);
    for (Vec& v : prompts.fg.context) v = gaussian_vec(rng, 6, 0.5);
    for (Vec& v : prompts.bg.context) v = gaussian_vec(rng, 6, 0.5);
  }
  FrozenTextEncoder enc = FrozenTextEncoder::random(6, 6, 11, 0.2);
  WordEmbeddingTable words;
  PromptPair prompts;
};

TEST_F(ClassEmbeddingTest, RowsMatchPerClassRecomputation) {
  const std::vector<ClassId> ids{0, 1, 2};
  const Mat T = class_embeddings(prompts.fg, ids, words, enc);
  for (std::size_t i = 0; i < 3; ++i) {
    // Straight-line: mean of [v1, v2, v3, w_c], through W plus offset, normalized.
    Vec mean(6, 0.0);
    for (const Vec& v : prompts.fg.context) axpy(0.25, v, mean);
    axpy(0.25, words[i], mean);
    Vec u = matvec(enc.weights(), mean);
    axpy(1.0, enc.offset(), u);
    const Vec want = normalized(u);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(T(i, k), want[k], 1e-14);
    EXPECT_NEAR(norm(T.row(i)), 1.0, 1e-12);
  }
}

TEST_F(ClassEmbeddingTest, SingletonAndPermutation) {
  const std::vector<ClassId> one{1};
  const Mat T1 = class_embeddings(prompts.fg, one, words, enc);
  EXPECT_EQ(T1.row_vec(0), encode_text(enc, assemble_class_prompt(prompts.fg, words[1])));
  const std::vector<ClassId> fwd{0, 1, 2}, rev{2, 1, 0};
  const Mat a = class_embeddings(prompts.fg, fwd, words, enc), b = class_embeddings(prompts.fg, rev, words, enc);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.row_vec(i), b.row_vec(2 - i));
  const std::vector<ClassId> bad{3};
  EXPECT_THROW(class_embeddings(prompts.fg, bad, words, enc), ConfigError);
}

TEST_F(ClassEmbeddingTest, BackgroundEmbeddingDependsOnlyOnItsContext) {
  const Vec t = background_embedding(prompts.bg, enc);
  EXPECT_NEAR(norm(t), 1.0, 1e-12);
  PromptPair other = prompts;
  other.fg.context[0][0] += 1.0;
  EXPECT_EQ(background_embedding(other.bg, enc), t);
  other.bg.context[1][3] += 1e-3;
  EXPECT_NE(background_embedding(other.bg, enc), t);
}

TEST_F(ClassEmbeddingTest, EnsembleOfIdenticalMembersEqualsOneMember) {
  PromptEnsemble single{{prompts}, 1};
  PromptEnsemble five{std::vector<PromptPair>(5, prompts), 1};
  const std::vector<ClassId> ids{0, 1, 2};
  const Mat a = single.class_embeddings(ids, words, enc), b = five.class_embeddings(ids, words, enc);
  for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-15);
  const Vec ta = single.background_embedding(enc), tb = five.background_embedding(enc);
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_NEAR(ta[i], tb[i], 1e-15);
}

TEST_F(ClassEmbeddingTest, TwoMemberEnsembleIsNormalizedMean) {
  PromptPair second = prompts;
  for (Vec& v : second.fg.context) scale(v, -0.7);
  PromptEnsemble ens{{prompts, second}, 1};
  const std::vector<ClassId> ids{0, 1, 2};
  const Mat T = ens.class_embeddings(ids, words, enc);
  const Mat t1 = class_embeddings(prompts.fg, ids, words, enc), t2 = class_embeddings(second.fg, ids, words, enc);
  for (std::size_t i = 0; i < 3; ++i) {
    Vec m = t1.row_vec(i);
    axpy(1.0, t2.row(i), m);
    scale(m, 0.5);
    const Vec want = normalized(m);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(T(i, k), want[k], 1e-14);
    EXPECT_NEAR(norm(T.row(i)), 1.0, 1e-12);
  }
}

TEST_F(ClassEmbeddingTest, CheckpointRoundTripsBitExactly) {
  PromptEnsemble ens{{prompts, prompts}, 77};
  ens.members[1].fg.context[0][0] = 0.1234567890123456789;
  std::stringstream ss;
  write_prompts(ss, ens);
  const PromptEnsemble back = read_prompts(ss);
  ASSERT_EQ(back.members.size(), 2u);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.fingerprint(), ens.fingerprint());
  std::stringstream bad("mic-prompts 2\n");
  EXPECT_THROW(read_prompts(bad), ArtifactError);
}
