#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "rceg/metrics.hpp"
#include "rceg/random.hpp"
#include "support.hpp"

using namespace rceg;

namespace {

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

TEST(Bleu, IdentityIsOne) {
  Rng rng(3);
  for (std::size_t len = 4; len < 40; ++len) {
    std::vector<int> seq(len);
    for (auto& x : seq) x = static_cast<int>(rng.below(6));
    EXPECT_EQ(bleu(seq, seq), 1.0) << "len " << len;
  }
}

TEST(Bleu, HandComputedPrecisions) {
  const auto hyp = words("the cat the cat");
  const auto ref = words("the cat sat");
  // p1 = 2/4, p2 = 1/3, p3 = 0
  EXPECT_EQ(bleu(hyp, ref), 0.0);
  EXPECT_NEAR(bleu(hyp, ref, {2, false}), std::sqrt(1.0 / 6.0), 1e-15);
  // add-one above unigrams: 2/4, 2/4, 1/3, 1/2
  EXPECT_NEAR(bleu(hyp, ref, {4, true}), std::pow(1.0 / 24.0, 0.25), 1e-15);
}

TEST(Bleu, BrevityPenalty) {
  EXPECT_NEAR(bleu(words("the cat"), words("the cat sat on"), {1, false}), std::exp(-1.0), 1e-15);
  EXPECT_EQ(bleu(words("the cat sat on"), words("the cat"), {1, false}), 0.5);
}

TEST(Bleu, EdgeCases) {
  const std::vector<int> empty;
  const std::vector<int> three{1, 2, 3};
  EXPECT_EQ(bleu(empty, three), 0.0);
  EXPECT_EQ(bleu(three, three), 0.0);  // no 4-grams
  EXPECT_THROW(bleu(three, three, {0, false}), Error);
}

TEST(Bleu, BoundedInUnitInterval) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> h(1 + rng.below(20)), r(1 + rng.below(20));
    for (auto& x : h) x = static_cast<int>(rng.below(4));
    for (auto& x : r) x = static_cast<int>(rng.below(4));
    const double b = bleu(h, r, {4, trial % 2 == 0});
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
  }
}

TEST(Rouge, UnigramRecall) {
  const auto r = rouge_n(words("the cat ran"), words("the cat sat"), 1);
  EXPECT_TRUE(r.defined);
  EXPECT_NEAR(r.value, 2.0 / 3.0, 1e-12);
}

TEST(Rouge, BigramRecallAndClipping) {
  EXPECT_EQ(rouge_n(words("the cat ran"), words("the cat sat"), 2).value, 0.5);
  // the reference has "the" twice; the hypothesis can only match it once
  EXPECT_EQ(rouge_n(words("the"), words("the the"), 1).value, 0.5);
  EXPECT_EQ(rouge_n(words("the the the"), words("the the"), 1).value, 1.0);
}

TEST(Rouge, ShortReferenceIsUndefined) {
  const auto r = rouge_n(words("the cat"), words("cat"), 2);
  EXPECT_FALSE(r.defined);
  EXPECT_FALSE(rouge_l(words("cat"), std::vector<std::string>{}).defined);
  EXPECT_THROW(rouge_n(words("a"), words("a"), 0), Error);
}

TEST(Rouge, LongestCommonSubsequence) {
  const std::string a = "ABCBDAB", b = "BDCABA";
  EXPECT_EQ(lcs_length(std::span<const char>(a), std::span<const char>(b)), 4u);
  EXPECT_NEAR(rouge_l(words("the cat ran"), words("the cat sat")).value, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(rouge_l(words("sat cat the"), words("the cat sat")).value, 1.0 / 3.0);
}

TEST(Perplexity, UniformModelEqualsVocabularySize) {
  ModelConfig c;
  c.vocab_size = 256;
  c.context_length = 64;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.adapter_rank = 0;
  const auto state = ModelState::zeros(c);
  Rng rng(5);
  std::vector<TokenId> seq(40);
  for (auto& t : seq) t = static_cast<TokenId>(rng.below(256));
  EXPECT_NEAR(perplexity(state, seq), 256.0, 1e-6);
}

TEST(Perplexity, MatchesLogSoftmaxOfForwardPass) {
  const auto state = fixtures::tiny_model(2);
  Rng rng(9);
  const auto seq = fixtures::random_ids(state, 12, rng);
  std::vector<TokenId> ids{kBos};
  ids.insert(ids.end(), seq.begin(), seq.end());
  const Matrix logits = forward(state, ids);
  double nll = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto row = logits.row(static_cast<Eigen::Index>(t));
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    nll += lse - row(seq[t]);
  }
  EXPECT_NEAR(perplexity(state, seq), std::exp(nll / static_cast<double>(seq.size())), 1e-9);
  EXPECT_GE(perplexity(state, seq), 1.0);
}

TEST(Report, RoundTripsThroughTsv) {
  MetricReport r;
  r.samples = {{0, 0.25, 0.5, 0.125, 1.0 / 3.0, 12.5}, {1, 0.0, 0.1, 0.2, 0.3, 7.0}};
  r.bleu4 = 0.125;
  r.rouge1 = 0.3;
  r.rouge2 = 0.1625;
  r.rougeL = 0.31666666666666665;
  r.ppl = 9.75;
  const auto text = format_report(r);
  EXPECT_EQ(text.substr(0, text.find('\n')), "id\tbleu4\trouge1\trouge2\trougeL\tppl");
  const auto back = parse_report(text);
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.samples[0].rougeL, 1.0 / 3.0);
  EXPECT_EQ(back.ppl, r.ppl);
  EXPECT_EQ(format_report(back), text);
}

TEST(Evaluate, ReferenceHypothesesScorePerfectly) {
  auto config = fixtures::tiny_config();
  config.context_length = 256;
  const auto state = ModelState::initialize(config, fixtures::tiny_vocab(), 4);
  std::vector<PromptRecord> prompts{{"write", {"travel", "story", 30, 2, 4, Difficulty::kBasic}},
                                    {"write", {"food", "news", 40, 3, 3, Difficulty::kAdvanced}}};
  std::vector<std::string> refs{"the cat sat on the mat", "a dog ran on a mat the cat sat"};
  EvalOptions opts;
  opts.hypotheses = refs;
  const auto report = evaluate_run(state, prompts, refs, opts);
  EXPECT_EQ(report.bleu4, 1.0);
  EXPECT_EQ(report.rouge1, 1.0);
  EXPECT_EQ(report.rouge2, 1.0);
  EXPECT_EQ(report.rougeL, 1.0);
  EXPECT_GT(report.ppl, 1.0);
  EXPECT_THROW(evaluate_run(state, prompts, std::span(refs).first(1)), Error);
}
