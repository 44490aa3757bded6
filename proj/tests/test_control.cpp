#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "rceg/control.hpp"
#include "support.hpp"

using namespace rceg;
using rceg::fixtures::tiny_model;

namespace {

AttributeGraph random_graph(Rng& rng, std::size_t n, std::size_t edges) {
  AttributeGraph g;
  for (std::size_t i = 0; i < n; ++i) g.nodes.push_back(static_cast<TokenId>(300 + 3 * i));
  for (std::size_t e = 0; e < edges; ++e) {
    g.weights[{g.nodes[rng.below(n)], g.nodes[rng.below(n)]}] += rng.uniform();
  }
  return g;
}

// Stationary vector of the damped chain from a direct linear solve.
Vector solve_stationary(const AttributeGraph& g, double d) {
  const auto n = static_cast<Eigen::Index>(g.nodes.size());
  auto idx = [&](TokenId id) {
    return static_cast<Eigen::Index>(std::find(g.nodes.begin(), g.nodes.end(), id) - g.nodes.begin());
  };
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (const auto& [e, w] : g.weights) out(idx(e.first)) += w;
  for (const auto& [e, w] : g.weights) {
    if (w > 0) m(idx(e.second), idx(e.first)) += w / out(idx(e.first));
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    if (out(j) == 0.0) m.col(j).setConstant(1.0 / static_cast<double>(n));
  }
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - d * m;
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(n, (1.0 - d) / static_cast<double>(n));
  return a.partialPivLu().solve(b);
}

AttributeClassifier word_classifier() {
  return AttributeClassifier({{"clean", 2.0}, {"nice", 1.0}, {"rude", -1.5}, {"awful", -3.0}}, 0.25);
}

}  // namespace

TEST(Classifier, LogisticOverWordCounts) {
  const auto c = word_classifier();
  EXPECT_EQ(c.logit("clean clean rude unknown"), 0.25 + 2.0 + 2.0 - 1.5);
  EXPECT_NEAR(c.score("clean clean rude unknown"), 1.0 / (1.0 + std::exp(-2.75)), 1e-15);
  EXPECT_NEAR(c.score(""), 1.0 / (1.0 + std::exp(-0.25)), 1e-15);
  std::string long_toxic;
  for (int i = 0; i < 200; ++i) long_toxic += "awful ";
  EXPECT_GT(c.score(long_toxic), 0.0);
  EXPECT_LT(c.score(long_toxic), 1e-250);
  EXPECT_EQ(score_attribute(c, "nice"), c.score("nice"));
}

TEST(Classifier, JsonAndFileRoundTrip) {
  const auto c = word_classifier();
  EXPECT_EQ(AttributeClassifier::from_json(c.to_json()), c);
  const auto path = std::filesystem::temp_directory_path() / "rceg_test_classifier.json";
  c.save(path);
  EXPECT_EQ(AttributeClassifier::load(path), c);
  std::filesystem::remove(path);
}

TEST(Classifier, LearnsSeparableMarkers) {
  Rng rng(4);
  const std::vector<std::string> filler = {"the", "river", "town", "walk", "boat", "green", "old"};
  std::vector<LabeledText> data;
  for (int i = 0; i < 400; ++i) {
    std::string text;
    for (int w = 0; w < 8; ++w) text += rng.pick(filler) + " ";
    const bool toxic = i % 2 == 1;
    if (toxic) text += rng.pick(toxic_markers());
    data.push_back({text, toxic});
  }
  const auto r = train_attribute_classifier(data, {}, 9);
  EXPECT_GE(r.heldout_accuracy, 0.95);
  EXPECT_EQ(r.heldout_size, 80u);
  EXPECT_LT(r.classifier.score(data[1].text), 0.5);
  EXPECT_GT(r.classifier.score(data[0].text), 0.5);

  const std::vector<LabeledText> one_class{{"a b", false}, {"c d", false}};
  EXPECT_THROW(train_attribute_classifier(one_class, {}, 9), Error);
}

TEST(Graphs, WeightsAreComplementaryPerTransition) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<CandidateVariant> variants(1 + rng.below(12));
    for (auto& v : variants) {
      v.ids.resize(rng.below(15));
      for (auto& t : v.ids) t = static_cast<TokenId>(rng.below(8));
      v.mu = trial % 7 == 0 ? static_cast<double>(rng.below(2)) : rng.uniform();
    }
    const auto g = build_attribute_graphs(variants);
    EXPECT_EQ(g.positive.nodes, g.negative.nodes);
    EXPECT_TRUE(std::is_sorted(g.positive.nodes.begin(), g.positive.nodes.end()));
    std::size_t transitions = 0;
    for (const auto& v : variants) transitions += v.ids.empty() ? 0 : v.ids.size() - 1;
    std::size_t counted = 0;
    for (const auto& [e, count] : g.transition_counts) {
      counted += count;
      EXPECT_NEAR(g.positive.weights.at(e) + g.negative.weights.at(e), static_cast<double>(count),
                  1e-12);
      EXPECT_GE(g.positive.weights.at(e), 0.0);
      EXPECT_GE(g.negative.weights.at(e), 0.0);
    }
    EXPECT_EQ(counted, transitions);
  }
}

TEST(Graphs, RejectsScoresOutsideUnitInterval) {
  std::vector<CandidateVariant> v{{{300, 301}, "", 1.5}};
  EXPECT_THROW(build_attribute_graphs(v), Error);
  v[0].mu = std::nan("");
  EXPECT_THROW(build_attribute_graphs(v), Error);
}

TEST(Ranking, MatchesLinearSolve) {
  AttributeGraph g;
  g.nodes = {300, 301, 302, 303};
  g.weights = {{{300, 301}, 1.0}, {{300, 302}, 3.0}, {{301, 302}, 2.0},
               {{302, 300}, 0.5}, {{302, 301}, 0.5}};
  // 303 has no out-edges and no in-edges
  const auto r = rank_tokens(g, 4, 0.85, 1e-14, 100000);
  const auto expected = solve_stationary(g, 0.85);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.scores[i], expected(static_cast<Eigen::Index>(i)), 1e-10);
  EXPECT_EQ(r.top.front(), 302);
  EXPECT_EQ(r.top.back(), 303);
}

TEST(Ranking, FuzzedGraphsSumToOneAndMatchSolve) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = random_graph(rng, 1 + rng.below(12), rng.below(40));
    const auto r = rank_tokens(g, 5);
    EXPECT_NEAR(std::accumulate(r.scores.begin(), r.scores.end(), 0.0), 1.0, 1e-6);
    const auto expected = solve_stationary(g, 0.85);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      EXPECT_NEAR(r.scores[i], expected(static_cast<Eigen::Index>(i)), 1e-7);
    }
    EXPECT_LE(r.top.size(), 5u);
  }
}

TEST(Ranking, TiesGoToLowerIdAndSpecialsAreSkipped) {
  AttributeGraph g;
  g.nodes = {kEos, 305, 310};
  const auto r = rank_tokens(g, 3);
  EXPECT_EQ(r.top, (std::vector<TokenId>{305, 310}));
  EXPECT_THROW(rank_tokens(AttributeGraph{}, 3), Error);
}

TEST(Steering, ShiftedSoftmaxOracle) {
  Vector z = Vector::Zero(3);
  const TokenId pos[] = {0};
  const auto p = steered_distribution(z, pos, {}, std::log(2.0), 0.0);
  EXPECT_NEAR(p(0), 0.5, 1e-15);
  EXPECT_NEAR(p(1), 0.25, 1e-15);
  EXPECT_NEAR(p(2), 0.25, 1e-15);

  Vector y(4);
  y << 1.0, -0.5, 2.0, 0.25;
  const TokenId p2[] = {1};
  const TokenId n2[] = {2, 1};
  const auto q = steered_distribution(y, p2, n2, 4.0, 6.0);
  Vector shifted = y;
  shifted(1) += 4.0 - 6.0;
  shifted(2) -= 6.0;
  const Vector e = shifted.array().exp();
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(q(i), e(i) / e.sum(), 1e-15);
}

TEST(Steering, ZeroStrengthTransformIsIdentity) {
  const auto hook = make_steering_transform({300, 301}, {302}, 0.0, 0.0);
  std::vector<double> row{0.1, -3.7, 1e-300, 5.5};
  row.resize(400, 0.3);
  const auto before = row;
  hook(row);
  EXPECT_EQ(row, before);
}

TEST(Steering, ZeroStrengthReproducesPlainSampling) {
  const auto state = tiny_model(31);
  const auto cls = word_classifier();
  SteeringConfig cfg;
  cfg.num_variants = 6;
  cfg.num_final_candidates = 3;
  cfg.boost = 0.0;
  cfg.suppress = 0.0;
  cfg.sampler.max_new_tokens = 20;
  const std::vector<TokenId> prompt{kBos, 300, 301};
  const auto out = generate_steered_candidates(state, prompt, cls, cfg, 77);
  ASSERT_EQ(out.candidates.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    SamplerConfig s = cfg.sampler;
    s.seed = derive_seed(77, kCandidateStream, c);
    EXPECT_EQ(out.candidates[c].ids, sample(state, prompt, s));
  }
}

TEST(Steering, VariantsAreSeededAndScored) {
  const auto state = tiny_model(32);
  const auto cls = word_classifier();
  SteeringConfig cfg;
  cfg.num_variants = 5;
  cfg.sampler.max_new_tokens = 15;
  const std::vector<TokenId> prompt{kBos, 300};
  const auto a = sample_variants(state, prompt, cls, cfg, 3);
  const auto b = sample_variants(state, prompt, cls, cfg, 3);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ids, b[i].ids);
    EXPECT_EQ(a[i].mu, cls.score(a[i].text));
    SamplerConfig s = cfg.sampler;
    s.seed = derive_seed(3, kVariantStream, i);
    EXPECT_EQ(a[i].ids, sample(state, prompt, s));
  }
}

TEST(Steering, BoostRaisesPositiveTokenFrequency) {
  const auto state = tiny_model(33);
  const std::vector<TokenId> prompt{kBos, 300};
  const TokenId target = 305;
  SamplerConfig s{1.0, 0, 10, 0};
  std::size_t plain = 0, boosted = 0;
  const auto hook = make_steering_transform({target}, {}, 4.0, 0.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    s.seed = seed;
    for (auto t : sample(state, prompt, s)) plain += t == target;
    for (auto t : sample(state, prompt, s, hook)) boosted += t == target;
  }
  EXPECT_GT(boosted, plain);
}

TEST(Selection, ExhaustiveSmallCases) {
  const auto cls = word_classifier();
  const std::vector<std::string> pool = {"clean", "nice", "rude", "awful", "", "clean rude"};
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<std::size_t> pick(n, 0);
    while (true) {
      std::vector<std::string> cands;
      for (auto p : pick) cands.push_back(pool[p]);
      const auto sel = select_final(cands, cls);
      double best = -1.0;
      std::size_t first_best = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (cls.score(cands[i]) > best) {
          best = cls.score(cands[i]);
          first_best = i;
        }
      }
      EXPECT_EQ(sel.index, first_best);
      EXPECT_EQ(sel.scores[sel.index], best);
      for (double s : sel.scores) EXPECT_LE(s, sel.scores[sel.index]);
      std::size_t k = 0;
      while (k < n && ++pick[k] == pool.size()) pick[k++] = 0;
      if (k == n) break;
    }
  }
  EXPECT_THROW(select_final(std::vector<std::string>{}, cls), Error);
  const double tied[] = {0.2, 0.7, 0.7};
  EXPECT_EQ(argmax_first(tied), 1u);
}

TEST(Steering, ReportDescribesOutcome) {
  const auto state = tiny_model(34);
  const auto cls = word_classifier();
  SteeringConfig cfg;
  cfg.num_variants = 4;
  cfg.top_k = 3;
  cfg.num_final_candidates = 2;
  cfg.sampler.max_new_tokens = 12;
  const std::vector<TokenId> prompt{kBos, 300};
  const auto out = generate_steered_candidates(state, prompt, cls, cfg, 5);
  std::vector<std::string> texts;
  for (const auto& c : out.candidates) texts.push_back(c.text);
  const auto sel = select_final(texts, cls);
  const auto j = steering_report(out, sel, state.vocab);
  EXPECT_EQ(j.at("variant_count"), 4);
  EXPECT_EQ(j.at("variant_mu").size(), 4u);
  EXPECT_LE(j.at("positive_tokens").size(), 3u);
  EXPECT_EQ(j.at("candidate_scores").size(), 2u);
  EXPECT_EQ(j.at("selected_index"), sel.index);
}

TEST(SteeringConfig, OverridesAndValidation) {
  SteeringConfig c;
  apply_overrides(c, {{"boost", 1.5}, {"num_variants", 8}, {"positive_threshold", 0.1}});
  EXPECT_EQ(c.boost, 1.5);
  EXPECT_EQ(c.num_variants, 8u);
  EXPECT_EQ(c.positive_threshold, 0.1);
  EXPECT_THROW(apply_overrides(c, {{"boost", "big"}}), Error);
  EXPECT_THROW(apply_overrides(c, {{"num_variants", -1}}), Error);
  EXPECT_THROW(apply_overrides(c, {{"negative_threshold", "x"}}), Error);
  c.num_final_candidates = 9;
  EXPECT_THROW(c.validate(), Error);
}
